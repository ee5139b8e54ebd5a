//! Training, evaluation, Monte Carlo cross-validation and the 2×2 ablation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagdata::{Bag, Dataset, Fold, SplitPlan};
use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax_in_place};
use crate::model::{cross_entropy, MilModel, ModelConfig, SemaMilModel};

pub use crate::model::cross_entropy as cross_entropy_loss;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub lambda_router: f64,
    /// Epochs without a better validation score before stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            epochs: 30,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            lambda_router: 0.01,
            early_stop_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("train.epochs must be at least 1".into()));
        }
        if !(self.lambda_router >= 0.0) {
            return Err(Error::InvalidConfig("train.lambda_router must be >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Binary ROC AUC as the Mann–Whitney statistic; a tied positive/negative
/// pair counts one half. `None` when either class is empty.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives; ranks are 1-based.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// AUC over an `n × n_classes` score table. Two classes: AUC of the class-1
/// column. More: macro one-vs-rest over classes with both positives and
/// negatives present.
pub fn auc_score(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_classes = scores.first().map_or(0, Vec::len);
    if n_classes == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc_binary(&s, &pos).ok_or(Error::AucUndefined);
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..n_classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(a) = auc_binary(&s, &pos) {
            total += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::AucUndefined);
    }
    Ok(total / used as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalDetail {
    pub auc: Option<f64>,
    pub acc: f64,
    pub mean_loss: f64,
    pub probabilities: Vec<Vec<f64>>,
}

pub fn evaluate_detailed<M: MilModel>(model: &M, bags: &[&Bag]) -> Result<EvalDetail> {
    let mut probabilities = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    let mut correct = 0usize;
    let mut loss = 0.0;
    for bag in bags {
        let logits = model.logits(bag)?;
        loss += cross_entropy(&logits, bag.label);
        if argmax(&logits) == bag.label {
            correct += 1;
        }
        let mut p = logits;
        softmax_in_place(&mut p);
        probabilities.push(p);
        labels.push(bag.label);
    }
    let n = bags.len().max(1) as f64;
    Ok(EvalDetail {
        auc: auc_score(&probabilities, &labels).ok(),
        acc: correct as f64 / n,
        mean_loss: loss / n,
        probabilities,
    })
}

/// `(auc, acc)` on the given bags.
pub fn evaluate<M: MilModel>(model: &M, bags: &[&Bag]) -> Result<(f64, f64)> {
    let d = evaluate_detailed(model, bags)?;
    Ok((d.auc.ok_or(Error::AucUndefined)?, d.acc))
}

/// Population mean and standard deviation (denominator `n`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    // Exact for constant input; the summed mean can be off by an ulp.
    if let Some(&first) = values.first() {
        if values.iter().all(|&v| v == first) {
            return (first, 0.0);
        }
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub acc: f64,
    pub per_fold: Vec<FoldMetrics>,
    /// `((auc_mean, auc_std), (acc_mean, acc_std))`, population std.
    pub mean_std: ((f64, f64), (f64, f64)),
}

impl Metrics {
    pub fn from_folds(per_fold: Vec<FoldMetrics>) -> Self {
        let aucs: Vec<f64> = per_fold.iter().map(|f| f.auc).collect();
        let accs: Vec<f64> = per_fold.iter().map(|f| f.acc).collect();
        let a = mean_std(&aucs);
        let c = mean_std(&accs);
        Metrics {
            auc: a.0,
            acc: c.0,
            per_fold,
            mean_std: (a, c),
        }
    }

    /// `fold,auc,acc` rows followed by `mean` and `std` summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,auc,acc\n");
        for f in &self.per_fold {
            writeln!(s, "{},{},{}", f.fold, f.auc, f.acc).unwrap();
        }
        let ((am, asd), (cm, csd)) = self.mean_std;
        writeln!(s, "mean,{am},{cm}").unwrap();
        writeln!(s, "std,{asd},{csd}").unwrap();
        s
    }
}

// ---------------------------------------------------------------------------
// Optimizers

enum OptState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl OptState {
    fn new<M: MilModel>(cfg: &OptimizerConfig, model: &M) -> Self {
        match *cfg {
            OptimizerConfig::Sgd => OptState::Sgd,
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
                OptState::Adam {
                    beta1,
                    beta2,
                    eps,
                    t: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    fn step<M: MilModel>(&mut self, model: &mut M, grads: &[Vec<f64>], lr: f64) {
        let trainable: Vec<bool> = model.tensors().iter().map(|t| t.trainable).collect();
        let params = model.tensors_mut();
        match self {
            OptState::Sgd => {
                for ((p, g), train) in params.into_iter().zip(grads).zip(&trainable) {
                    if *train {
                        p.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
                    }
                }
            }
            OptState::Adam { beta1, beta2, eps, t, m, v } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t);
                let bc2 = 1.0 - beta2.powi(*t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    if !trainable[i] {
                        continue;
                    }
                    for j in 0..p.len() {
                        m[i][j] = *beta1 * m[i][j] + (1.0 - *beta1) * g[j];
                        v[i][j] = *beta2 * v[i][j] + (1.0 - *beta2) * g[j] * g[j];
                        let mh = m[i][j] / bc1;
                        let vh = v[i][j] / bc2;
                        p[j] -= lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn select<'a>(ds: &'a Dataset, ids: &[usize]) -> Vec<&'a Bag> {
    ids.iter().map(|&i| &ds.bags[i]).collect()
}

/// Validation ranking key: AUC (accuracy when AUC is undefined), then lower
/// loss as a tie-break so a saturated AUC does not freeze selection.
fn val_key(r: &EpochRecord) -> (f64, f64) {
    (r.val_auc.unwrap_or(r.val_acc), -r.val_loss)
}

/// One epoch is a full pass over the training bags in a seeded shuffle, one
/// bag per step. Returns the checkpoint with the best validation key.
pub fn train_fold<M: MilModel>(mut model: M, ds: &Dataset, fold: &Fold, cfg: &TrainConfig) -> Result<(M, History)> {
    cfg.validate()?;
    let train = select(ds, &fold.train);
    let val = select(ds, &fold.val);
    let mut opt = OptState::new(&cfg.optimizer, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.clone();
    let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = model.loss_and_grad(train[i], cfg.lambda_router)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            total += loss;
            opt.step(&mut model, &grads, cfg.lr);
        }
        let ev = evaluate_detailed(&model, &val)?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / train.len().max(1) as f64,
            val_auc: ev.auc,
            val_acc: ev.acc,
            val_loss: ev.mean_loss,
        };
        let key = val_key(&rec);
        epochs.push(rec);
        if key > best_key {
            best_key = key;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok((
        best,
        History {
            epochs,
            best_epoch,
            stopped_early,
        },
    ))
}

/// Training seed for fold `fold` derived from the base seed.
pub fn fold_train_seed(base: u64, fold: usize) -> u64 {
    base ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct FoldOutcome<M> {
    pub model: M,
    pub history: History,
    pub metrics: FoldMetrics,
}

pub struct ProtocolResult<M> {
    pub metrics: Metrics,
    pub folds: Vec<FoldOutcome<M>>,
}

/// Train on each fold's train split, select on val, report on test.
/// `factory(seed)` builds a fresh model for a fold. With `jobs > 1` folds
/// run on a thread pool; results are always merged in fold order.
pub fn run_protocol<M, F>(
    ds: &Dataset,
    plan: &SplitPlan,
    factory: F,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<ProtocolResult<M>>
where
    M: MilModel,
    F: Fn(u64) -> Result<M> + Sync,
{
    let run_one = |fi: usize| -> Result<FoldOutcome<M>> {
        let fold = &plan.folds[fi];
        let seed = fold_train_seed(cfg.seed, fi);
        let fold_cfg = TrainConfig { seed, ..cfg.clone() };
        let (model, history) = train_fold(factory(seed)?, ds, fold, &fold_cfg)?;
        let (auc, acc) = evaluate(&model, &select(ds, &fold.test))?;
        Ok(FoldOutcome {
            model,
            history,
            metrics: FoldMetrics { fold: fi, auc, acc },
        })
    };
    let n = plan.folds.len();
    let folds: Vec<FoldOutcome<M>> = if jobs <= 1 {
        (0..n).map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(run_one).collect::<Result<_>>())?
    };
    let metrics = Metrics::from_folds(folds.iter().map(|f| f.metrics.clone()).collect());
    Ok(ProtocolResult { metrics, folds })
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub sr_enabled: bool,
    pub srsm_enabled: bool,
}

/// Rows in table order: neither, scan only, reordering only, both.
pub const ABLATION_ROWS: [AblationSpec; 4] = [
    AblationSpec { sr_enabled: false, srsm_enabled: false },
    AblationSpec { sr_enabled: false, srsm_enabled: true },
    AblationSpec { sr_enabled: true, srsm_enabled: false },
    AblationSpec { sr_enabled: true, srsm_enabled: true },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, sr: bool, srsm: bool) -> Option<&Metrics> {
        self.rows
            .iter()
            .find(|r| r.spec.sr_enabled == sr && r.spec.srsm_enabled == srsm)
            .map(|r| &r.metrics)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sr,srsm,auc_mean,auc_std,acc_mean,acc_std\n");
        for r in &self.rows {
            let ((am, asd), (cm, csd)) = r.metrics.mean_std;
            writeln!(s, "{},{},{am},{asd},{cm},{csd}", r.spec.sr_enabled, r.spec.srsm_enabled).unwrap();
        }
        s
    }
}

/// Run the protocol for all four on/off combinations of reordering and the
/// query-conditioned scan, sharing splits and training seeds.
pub fn run_ablation(
    ds: &Dataset,
    plan: &SplitPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    jobs: usize,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(4);
    for spec in ABLATION_ROWS {
        let mc = ModelConfig {
            sr_enabled: spec.sr_enabled,
            srsm_enabled: spec.srsm_enabled,
            ..model_cfg.clone()
        };
        let res = run_protocol(ds, plan, |seed| SemaMilModel::init(&mc, seed), train_cfg, jobs)?;
        rows.push(AblationRow {
            spec,
            metrics: res.metrics,
        });
    }
    Ok(AblationTable { rows })
}
