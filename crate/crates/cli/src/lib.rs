//! Command implementations behind the `semamil` binary.
//!
//! Every command reads one [`CliConfig`] (JSON file plus `section.key=value`
//! overrides) and returns a [`CliError`] whose [`CliError::exit_code`] is 1
//! for validation or check failures and 2 for I/O or format errors.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use semamil::bagdata::{generate_synthetic, load_bag, load_dataset, save_dataset, split_monte_carlo, Dataset, SplitPlan, SynthConfig};
use semamil::gradcheck::{check_gradients, tiny_config, tiny_problem, Fault, GradReport, DEFAULT_EPS, DEFAULT_TOL};
use semamil::harness::{evaluate, run_ablation, run_protocol, AblationTable, History, Metrics, TrainConfig};
use semamil::model::{count_flops, count_params, ModelConfig, SemaMilModel};
use semamil::reorder::cluster_sizes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_folds: usize,
    pub split_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_folds: 10,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input, failed validation or a failed check.
    Invalid(String),
    /// Unreadable, unwritable or malformed files.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<semamil::Error> for CliError {
    fn from(e: semamil::Error) -> Self {
        if e.is_format_or_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Configuration

/// Parse `value` as JSON, falling back to a plain string.
fn parse_override_value(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Invalid(format!("override `{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(CliError::Invalid(format!("unknown config key `{key}`")));
            }
            obj.insert(part.to_string(), parse_override_value(value));
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Invalid(format!("unknown config key `{key}`")))?;
    }
    unreachable!("split always yields at least one part")
}

/// Recursively overlay `patch` onto `base`; objects merge, everything else
/// replaces. Unknown keys are kept so deserialization can reject them.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Defaults, then the file, then dotted overrides, then `--seed`.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<CliConfig> {
    let mut root = serde_json::to_value(CliConfig::default()).expect("config serializes");
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        if !file.is_object() {
            return Err(CliError::Invalid(format!("{}: config must be a JSON object", p.display())));
        }
        merge(&mut root, file);
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: CliConfig = serde_json::from_value(root).map_err(|e| CliError::Invalid(format!("config: {e}")))?;
    if let Some(s) = seed {
        cfg.data.seed = s;
        cfg.protocol.split_seed = s;
        cfg.train.seed = s;
    }
    cfg.data.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.protocol.n_folds == 0 {
        return Err(CliError::Invalid("protocol.n_folds must be at least 1".into()));
    }
    Ok(cfg)
}

/// Refuse to write into a non-empty directory unless `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Invalid(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// The dataset at `data` (manifest or directory), or the configured
/// synthetic one when no path is given.
pub fn resolve_dataset(cfg: &CliConfig, data: Option<&Path>) -> CliResult<Dataset> {
    Ok(match data {
        Some(p) => load_dataset(p)?,
        None => generate_synthetic(&cfg.data)?,
    })
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_gen(cfg: &CliConfig, out: &Path, force: bool) -> CliResult<String> {
    let ds = generate_synthetic(&cfg.data)?;
    prepare_out_dir(out, force)?;
    let manifest = save_dataset(&ds, out)?;
    Ok(format!(
        "wrote {} bags to {}\nclass histogram: {:?}\n",
        ds.bags.len(),
        manifest.display(),
        ds.class_histogram()
    ))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    history: Vec<&'a History>,
}

pub fn checkpoint_path(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold:02}.semm"))
}

/// Runs the protocol and writes `metrics.json`, `metrics.csv`,
/// `splits.json`, `history.json`, `config.json` and one checkpoint per fold.
pub fn cmd_train(cfg: &CliConfig, data: Option<&Path>, out: &Path, jobs: usize, force: bool) -> CliResult<Metrics> {
    let ds = resolve_dataset(cfg, data)?;
    let plan = split_monte_carlo(ds.bags.len(), cfg.protocol.n_folds, cfg.protocol.split_seed)?;
    prepare_out_dir(out, force)?;
    let res = run_protocol(&ds, &plan, |s| SemaMilModel::init(&cfg.model, s), &cfg.train, jobs)?;
    for (i, f) in res.folds.iter().enumerate() {
        f.model.save_checkpoint(&checkpoint_path(out, i))?;
    }
    write_file(&out.join("metrics.json"), to_json(&res.metrics))?;
    write_file(&out.join("metrics.csv"), res.metrics.to_csv())?;
    write_file(&out.join("splits.json"), to_json(&plan))?;
    write_file(&out.join("config.json"), to_json(cfg))?;
    let summary = TrainSummary {
        history: res.folds.iter().map(|f| &f.history).collect(),
    };
    write_file(&out.join("history.json"), to_json(&summary))?;
    Ok(res.metrics)
}

pub fn format_metrics(m: &Metrics) -> String {
    let mut s = String::new();
    for f in &m.per_fold {
        writeln!(s, "fold {:2}  auc {:.4}  acc {:.4}", f.fold, f.auc, f.acc).unwrap();
    }
    let ((am, asd), (cm, csd)) = m.mean_std;
    writeln!(s, "auc {am:.4} ± {asd:.4}  acc {cm:.4} ± {csd:.4}").unwrap();
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_bags: usize,
    pub auc: f64,
    pub acc: f64,
}

pub fn read_splits(path: &Path) -> CliResult<SplitPlan> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Dimensions that must agree between a checkpoint and a config.
fn shape_signature(m: &ModelConfig) -> String {
    format!(
        "d_in={} d={} hidden={} n_clusters={} n_state={} n_layers={} n_classes={}",
        m.d_in, m.d, m.hidden, m.n_clusters, m.n_state, m.n_layers, m.n_classes
    )
}

/// Evaluate a checkpoint on all bags, or on one fold's test split when
/// `split` is given.
pub fn cmd_eval(
    cfg: Option<&CliConfig>,
    checkpoint: &Path,
    data: Option<&Path>,
    split: Option<(&Path, usize)>,
) -> CliResult<EvalResult> {
    let model = SemaMilModel::load_checkpoint(checkpoint)?;
    if let Some(c) = cfg {
        let (a, b) = (shape_signature(&model.config), shape_signature(&c.model));
        if a != b {
            return Err(CliError::Invalid(format!(
                "checkpoint {} has shape [{a}] but the config asks for [{b}]",
                checkpoint.display()
            )));
        }
    }
    let ds = match (data, cfg) {
        (Some(p), _) => load_dataset(p)?,
        (None, Some(c)) => generate_synthetic(&c.data)?,
        (None, None) => return Err(CliError::Invalid("eval needs --data or --config".into())),
    };
    let ids: Vec<usize> = match split {
        Some((path, fold)) => {
            let plan = read_splits(path)?;
            let f = plan.folds.get(fold).ok_or_else(|| {
                CliError::Invalid(format!("fold {fold} out of range; {} has {} folds", path.display(), plan.folds.len()))
            })?;
            if f.test.iter().any(|&i| i >= ds.bags.len()) {
                return Err(CliError::Invalid(format!(
                    "{} refers to bags beyond the {} in the dataset",
                    path.display(),
                    ds.bags.len()
                )));
            }
            f.test.clone()
        }
        None => (0..ds.bags.len()).collect(),
    };
    let bags: Vec<_> = ids.iter().map(|&i| &ds.bags[i]).collect();
    let (auc, acc) = evaluate(&model, &bags)?;
    Ok(EvalResult {
        n_bags: bags.len(),
        auc,
        acc,
    })
}

/// Writes `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(
    cfg: &CliConfig,
    data: Option<&Path>,
    out: &Path,
    jobs: usize,
    force: bool,
) -> CliResult<AblationTable> {
    let ds = resolve_dataset(cfg, data)?;
    let plan = split_monte_carlo(ds.bags.len(), cfg.protocol.n_folds, cfg.protocol.split_seed)?;
    prepare_out_dir(out, force)?;
    let table = run_ablation(&ds, &plan, &cfg.model, &cfg.train, jobs)?;
    write_file(&out.join("ablation.csv"), table.to_csv())?;
    write_file(&out.join("ablation.json"), to_json(&table))?;
    Ok(table)
}

pub fn format_ablation(t: &AblationTable) -> String {
    let mark = |b: bool| if b { "on " } else { "off" };
    let mut s = String::from("SR   SRSM  AUC              ACC\n");
    for r in &t.rows {
        let ((am, asd), (cm, csd)) = r.metrics.mean_std;
        writeln!(
            s,
            "{}  {}   {am:.4} ± {asd:.4}  {cm:.4} ± {csd:.4}",
            mark(r.spec.sr_enabled),
            mark(r.spec.srsm_enabled)
        )
        .unwrap();
    }
    s
}

/// Gradient check on the tiny configuration. `fault` scales the analytic
/// gradient of one tensor, for exercising the failure path.
pub fn cmd_gradcheck(cfg: &CliConfig, fault: Option<&Fault>) -> CliResult<GradReport> {
    let model_cfg = ModelConfig {
        assign_mode: cfg.model.assign_mode,
        directions: cfg.model.directions,
        ..tiny_config()
    };
    let (model, bag) = tiny_problem(&model_cfg, cfg.train.seed)?;
    Ok(check_gradients(
        &model,
        &bag,
        cfg.train.lambda_router,
        DEFAULT_EPS,
        DEFAULT_TOL,
        fault,
    )?)
}

pub fn format_gradcheck(r: &GradReport) -> String {
    let mut s = format!("{:<22} {:>5} {:>12} {:>12}  status\n", "tensor", "size", "max_abs_err", "max_rel_err");
    for t in &r.tensors {
        let ok = if t.max_rel_err < r.tol { "ok" } else { "FAIL" };
        writeln!(s, "{:<22} {:>5} {:>12.3e} {:>12.3e}  {ok}", t.name, t.len, t.max_abs_err, t.max_rel_err).unwrap();
    }
    writeln!(
        s,
        "max relative error {:.3e} (tolerance {:.0e}): {}",
        r.max_rel_err(),
        r.tol,
        if r.passed() { "PASS" } else { "FAIL" }
    )
    .unwrap();
    s
}

fn scaled(v: u64, unit: f64, suffix: &str) -> String {
    format!("{:.3}{suffix}", v as f64 / unit)
}

pub fn cmd_flops(cfg: &CliConfig, l: usize) -> String {
    let p = count_params(&cfg.model);
    let f = count_flops(&cfg.model, l);
    let mut s = String::new();
    writeln!(s, "parameters").unwrap();
    for (name, v) in [
        ("projection", p.projection),
        ("router", p.router),
        ("blocks", p.blocks),
        ("pooling", p.pooling),
        ("head", p.head),
        ("total", p.total()),
    ] {
        writeln!(s, "  {name:<12} {v:>14}  {}", scaled(v, 1e6, "M")).unwrap();
    }
    writeln!(s, "flops at L={l}").unwrap();
    for (name, v) in [
        ("projection", f.projection),
        ("router", f.router),
        ("blocks", f.blocks),
        ("pooling", f.pooling),
        ("head", f.head),
        ("total", f.total()),
    ] {
        writeln!(s, "  {name:<12} {v:>14}  {}", scaled(v, 1e9, "G")).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReorderReport {
    pub labels: Vec<usize>,
    pub pi: Vec<usize>,
    pub pi_inv: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
}

/// Router labels and the induced permutation for one bag file, with the
/// model from `checkpoint` or freshly initialised from the config.
pub fn cmd_reorder_inspect(cfg: &CliConfig, bag_path: &Path, checkpoint: Option<&Path>) -> CliResult<ReorderReport> {
    let model = match checkpoint {
        Some(p) => SemaMilModel::load_checkpoint(p)?,
        None => SemaMilModel::init(&cfg.model, cfg.train.seed)?,
    };
    let id = bag_path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let bag = load_bag(bag_path, &id, 0)?;
    let (labels, perm) = model.reorder(&bag)?;
    let pi = perm.pi().to_vec();
    let pi_inv = perm.pi_inv().to_vec();
    if (0..pi.len()).any(|j| pi_inv[pi[j]] != j) {
        return Err(CliError::Invalid("internal error: pi_inv is not the inverse of pi".into()));
    }
    Ok(ReorderReport {
        cluster_sizes: cluster_sizes(&labels, model.config.n_clusters),
        labels,
        pi,
        pi_inv,
    })
}
