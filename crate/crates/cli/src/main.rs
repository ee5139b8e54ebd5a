use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semamil::gradcheck::Fault;
use semamil_cli::{
    cmd_ablate, cmd_eval, cmd_flops, cmd_gen, cmd_gradcheck, cmd_reorder_inspect, cmd_train, format_ablation,
    format_gradcheck, format_metrics, load_config, CliConfig, CliError, CliResult,
};

#[derive(Parser)]
#[command(name = "semamil", version, about = "Semantic reordering + query-conditioned scanning for bag classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config with `data`, `model`, `train` and `protocol` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data, split and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted overrides, e.g. `model.d=8 train.lr=1e-3`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> CliResult<CliConfig> {
        load_config(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest plus one bag file per bag).
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Monte Carlo cross-validation; writes checkpoints and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Manifest or dataset directory; defaults to the configured synthetic data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a dataset or on one fold's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `splits.json` written by `train`.
        #[arg(long, requires = "fold")]
        splits: Option<PathBuf>,
        #[arg(long, requires = "splits")]
        fold: Option<usize>,
        /// Also write `eval.json` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all four reordering/scan on-off combinations on shared folds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Compare analytic gradients with central differences on a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale one tensor's analytic gradient by 1.1 (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Parameter and FLOP counts for a bag of `length` instances.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1024)]
        length: usize,
    },
    /// Print router labels and the reordering permutation for one bag as JSON.
    ReorderInspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bag: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { common, out, force } => {
            print!("{}", cmd_gen(&common.load()?, &out, force)?);
        }
        Command::Train {
            common,
            data,
            out,
            jobs,
            force,
        } => {
            let m = cmd_train(&common.load()?, data.as_deref(), &out, jobs, force)?;
            print!("{}", format_metrics(&m));
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            splits,
            fold,
            out,
        } => {
            let cfg = if common.config.is_some() || !common.overrides.is_empty() || common.seed.is_some() {
                Some(common.load()?)
            } else {
                None
            };
            let split = splits.as_deref().zip(fold);
            let r = cmd_eval(cfg.as_ref(), &checkpoint, data.as_deref(), split)?;
            let text = json(&r);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
                let p = dir.join("eval.json");
                std::fs::write(&p, format!("{text}\n")).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            }
            println!("{text}");
        }
        Command::Ablate {
            common,
            data,
            out,
            jobs,
            force,
        } => {
            let t = cmd_ablate(&common.load()?, data.as_deref(), &out, jobs, force)?;
            print!("{}", format_ablation(&t));
        }
        Command::Gradcheck { common, inject_fault } => {
            let fault = inject_fault.map(|tensor| Fault { tensor, scale: 1.1 });
            let report = cmd_gradcheck(&common.load()?, fault.as_ref())?;
            print!("{}", format_gradcheck(&report));
            if !report.passed() {
                return Err(CliError::Invalid("gradient check failed".into()));
            }
        }
        Command::Flops { common, length } => {
            print!("{}", cmd_flops(&common.load()?, length));
        }
        Command::ReorderInspect {
            common,
            bag,
            checkpoint,
        } => {
            let r = cmd_reorder_inspect(&common.load()?, &bag, checkpoint.as_deref())?;
            println!("{}", json(&r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // Usage errors are validation failures (1); help and version exit 0.
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
