use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fapl_cli::commands::{self, RunScheme};
use fapl_cli::config::ExperimentConfig;
use fapl_core::Error;

#[derive(Parser)]
#[command(
    name = "fapl",
    version,
    about = "Semi-supervised embedding experiments: affinity pseudo-labeling, center regularization, retrieval evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Scalar config overrides, e.g. --override train.lambda=1e-3
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; sets data/unlabeled/train seeds to seed, seed+1, seed+2.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        match &self.config {
            Some(path) => ExperimentConfig::load_with_overrides(path, &self.overrides, self.seed),
            None => ExperimentConfig::from_toml("", &self.overrides, self.seed),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled and unlabeled CSVs plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on generated data; writes checkpoint and training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding labeled.csv and (optionally) unlabeled.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on the hold-out split; writes report.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate each (scheme, seed) pair; writes an aggregate CSV.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated schemes: baseline,fapl-o,fapl-d,all-in-one,pred-onehot,lsro
        #[arg(long, value_delimiter = ',', required = true)]
        schemes: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Optional sweep over unlabeled pool sizes.
        #[arg(long, value_delimiter = ',')]
        unlabeled_counts: Option<Vec<usize>>,
    },
    /// Sweep the center-loss weight; writes an aggregate CSV.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lambda values (default 1e-3,1e-4,1e-5).
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error[{}]: {err}", err.class());
    ExitCode::FAILURE
}

fn finish_grid(outcome: commands::GridOutcome) -> ExitCode {
    println!("wrote {}", outcome.csv.display());
    if outcome.failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    for f in &outcome.failures {
        eprintln!(
            "sub-run failed (scheme={}, seed={}, n_unlabeled={}, lambda={}): error[{}]: {}",
            f.scheme,
            f.seed,
            f.n_unlabeled,
            f.lambda,
            f.error.class(),
            f.error
        );
    }
    eprintln!(
        "error[subrun]: {} sub-run(s) failed",
        outcome.failures.len()
    );
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => {
            let cfg = match common.load() {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match commands::cmd_gen_data(&cfg, &common.out) {
                Ok(a) => {
                    println!("wrote {}", a.labeled_csv.display());
                    println!("wrote {}", a.unlabeled_csv.display());
                    println!("wrote {}", a.manifest.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Train { common, data } => {
            let cfg = match common.load() {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match commands::cmd_train(&cfg, &data, &common.out) {
                Ok(a) => {
                    println!("wrote {}", a.checkpoint.display());
                    println!("wrote {}", a.train_log.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let cfg = match common.load() {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match commands::cmd_eval(&cfg, &checkpoint, &data, &common.out) {
                Ok(a) => {
                    let r = &a.report_data;
                    println!(
                        "rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  mAP {:.4}",
                        r.rank1, r.rank5, r.rank10, r.map
                    );
                    println!("wrote {}", a.report.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Compare {
            common,
            schemes,
            seeds,
            unlabeled_counts,
        } => {
            let cfg = match common.load() {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let parsed: Result<Vec<RunScheme>, Error> =
                schemes.iter().map(|s| RunScheme::parse(s)).collect();
            let parsed = match parsed {
                Ok(p) => p,
                Err(e) => return fail(&e),
            };
            match commands::cmd_compare(
                &cfg,
                &parsed,
                &seeds,
                unlabeled_counts.as_deref(),
                &common.out,
            ) {
                Ok(outcome) => finish_grid(outcome),
                Err(e) => fail(&e),
            }
        }
        Command::SweepLambda {
            common,
            lambdas,
            seeds,
        } => {
            let cfg = match common.load() {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let lambdas = lambdas.unwrap_or_else(|| commands::DEFAULT_LAMBDAS.to_vec());
            match commands::cmd_sweep_lambda(&cfg, &lambdas, &seeds, &common.out) {
                Ok(outcome) => finish_grid(outcome),
                Err(e) => fail(&e),
            }
        }
    }
}
