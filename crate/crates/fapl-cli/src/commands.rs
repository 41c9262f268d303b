//! The five experiment commands. Each one writes its artifacts under an
//! output directory and returns their paths; all outputs except the manifest
//! timestamp are byte-reproducible for a fixed config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fapl_core::data::{
    generate_synthetic, generate_unlabeled, load_csv, reduce_labeled, save_csv, split_holdout,
    write_csv, Dataset, Sample,
};
use fapl_core::eval::{intra_class_variance, pseudo_label_accuracy, retrieval_report};
use fapl_core::labeling::assign_pseudo_label;
use fapl_core::model::{forward_trace, load_checkpoint, save_checkpoint};
use fapl_core::trainer::train;
use fapl_core::{Checkpoint, Error, ModelParams, Result, Scheme, TrainHistory, TrainOutcome};

use crate::config::ExperimentConfig;

pub const LABELED_CSV: &str = "labeled.csv";
pub const UNLABELED_CSV: &str = "unlabeled.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const TRAIN_LOG_JSONL: &str = "train_log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const COMPARE_CSV: &str = "compare_results.csv";
pub const SWEEP_LAMBDA_CSV: &str = "sweep_lambda_results.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, cfg.to_toml_string()?)?;
    Ok(path)
}

/// Labeled pool (training plus hold-out rows) and the unlabeled pool the
/// training set induces, as an in-memory pipeline stage shared by every
/// command.
struct PreparedData {
    /// Full labeled pool as written to/read from `labeled.csv`.
    full: Dataset,
    /// Training side after hold-out split and labeled-set reduction.
    train: Dataset,
    /// Held-out labeled samples for retrieval evaluation.
    holdout: Dataset,
}

fn prepare_labeled(cfg: &ExperimentConfig, full: Dataset) -> Result<PreparedData> {
    let (train_raw, holdout) = split_holdout(&full, cfg.data.holdout_per_class)?;
    let train = reduce_labeled(&train_raw, cfg.data.labeled_fraction);
    Ok(PreparedData {
        full,
        train,
        holdout,
    })
}

fn generate_all(cfg: &ExperimentConfig) -> Result<(PreparedData, Vec<Sample>)> {
    let full = generate_synthetic(&cfg.synth_config())?;
    let prepared = prepare_labeled(cfg, full)?;
    let unlabeled = generate_unlabeled(
        &prepared.train,
        cfg.unlabeled.count,
        cfg.unlabeled.mix_strength,
        cfg.unlabeled_noise_std(),
        cfg.unlabeled.seed,
    )?;
    Ok((prepared, unlabeled))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    created_at_unix: u64,
    labeled_csv: String,
    unlabeled_csv: String,
    num_classes: usize,
    input_dim: usize,
    labeled_samples: usize,
    holdout_per_class: usize,
    unlabeled_samples: usize,
    data_seed: u64,
    unlabeled_seed: u64,
}

#[derive(Debug)]
pub struct GenDataArtifacts {
    pub labeled_csv: PathBuf,
    pub unlabeled_csv: PathBuf,
    pub manifest: PathBuf,
    pub resolved_config: PathBuf,
}

/// Writes the labeled pool, the unlabeled pool, a manifest, and the resolved
/// config. The unlabeled pool is interpolated from the training side only.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenDataArtifacts> {
    ensure_dir(out)?;
    let (prepared, unlabeled) = generate_all(cfg)?;

    let labeled_csv = out.join(LABELED_CSV);
    save_csv(&labeled_csv, &prepared.full)?;
    let unlabeled_csv = out.join(UNLABELED_CSV);
    write_csv(
        &unlabeled_csv,
        &unlabeled,
        prepared.full.input_dim,
        prepared.full.num_classes,
    )?;

    let manifest = Manifest {
        created_at_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        labeled_csv: LABELED_CSV.into(),
        unlabeled_csv: UNLABELED_CSV.into(),
        num_classes: prepared.full.num_classes,
        input_dim: prepared.full.input_dim,
        labeled_samples: prepared.full.samples.len(),
        holdout_per_class: cfg.data.holdout_per_class,
        unlabeled_samples: unlabeled.len(),
        data_seed: cfg.data.seed,
        unlabeled_seed: cfg.unlabeled.seed,
    };
    let manifest_path = out.join(MANIFEST_JSON);
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?,
    )?;
    let resolved_config = write_resolved_config(cfg, out)?;
    Ok(GenDataArtifacts {
        labeled_csv,
        unlabeled_csv,
        manifest: manifest_path,
        resolved_config,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord {
    Iteration {
        epoch: usize,
        batch: usize,
        loss: f64,
        classification: f64,
        center: f64,
        unlabeled_in_batch: usize,
    },
    Epoch {
        epoch: usize,
        pseudo_label_accuracy: Option<f64>,
    },
}

fn write_train_log(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut out = String::new();
    let mut iter_idx = 0usize;
    for (epoch, acc) in history.pseudo_label_accuracy.iter().enumerate() {
        while iter_idx < history.iterations.len() && history.iterations[iter_idx].epoch == epoch {
            let r = &history.iterations[iter_idx];
            let record = LogRecord::Iteration {
                epoch: r.epoch,
                batch: r.batch,
                loss: r.loss,
                classification: r.classification,
                center: r.center,
                unlabeled_in_batch: r.unlabeled_in_batch,
            };
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(&record)
                    .map_err(|e| Error::Config(format!("log serialization failed: {e}")))?
            );
            iter_idx += 1;
        }
        let record = LogRecord::Epoch {
            epoch,
            pseudo_label_accuracy: *acc,
        };
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string(&record)
                .map_err(|e| Error::Config(format!("log serialization failed: {e}")))?
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn load_data_dir(cfg: &ExperimentConfig, data_dir: &Path) -> Result<(PreparedData, Vec<Sample>)> {
    let full = load_csv(&data_dir.join(LABELED_CSV))?;
    let prepared = prepare_labeled(cfg, full)?;
    let unlabeled_path = data_dir.join(UNLABELED_CSV);
    let unlabeled = if unlabeled_path.exists() {
        let ds = load_csv(&unlabeled_path)?;
        if ds.input_dim != prepared.full.input_dim {
            return Err(Error::Shape(format!(
                "unlabeled pool dimension {} does not match labeled pool {}",
                ds.input_dim, prepared.full.input_dim
            )));
        }
        ds.samples
    } else {
        Vec::new()
    };
    Ok((prepared, unlabeled))
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub resolved_config: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains on the CSVs under `data_dir` and writes checkpoint, training log,
/// and resolved config under `out`.
pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<TrainArtifacts> {
    ensure_dir(out)?;
    let (prepared, unlabeled) = load_data_dir(cfg, data_dir)?;
    let outcome = train(&cfg.train_config(), &prepared.train, &unlabeled)?;

    let checkpoint = out.join(CHECKPOINT_JSON);
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            config_hash: cfg.hash()?,
            params: outcome.params.clone(),
            centers: outcome.centers.clone(),
        },
    )?;
    let train_log = out.join(TRAIN_LOG_JSONL);
    write_train_log(&train_log, &outcome.history)?;
    let resolved_config = write_resolved_config(cfg, out)?;
    Ok(TrainArtifacts {
        checkpoint,
        train_log,
        resolved_config,
        outcome,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// One evaluation record; also a row of the comparison/sweep CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub scheme: String,
    pub seed: u64,
    pub n_unlabeled: usize,
    pub lambda: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub intra_class_variance: f64,
    pub pseudo_label_accuracy: Option<f64>,
    pub query_count: usize,
    pub gallery_size: usize,
    pub cmc: Vec<f64>,
}

fn evaluate_model(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    centers: &fapl_core::CenterBank,
    holdout: &Dataset,
    unlabeled: &[Sample],
    scheme_name: &str,
    seed: u64,
) -> Result<ReportFile> {
    if params.input_dim() != holdout.input_dim {
        return Err(Error::Shape(format!(
            "checkpoint expects inputs of dimension {}, data has {}",
            params.input_dim(),
            holdout.input_dim
        )));
    }
    let report = retrieval_report(
        params,
        holdout,
        cfg.eval.queries_per_class,
        cfg.eval.max_rank,
    )?;
    let descriptors = fapl_core::eval::extract_descriptors(params, &holdout.samples)?;
    let labels: Vec<usize> = holdout
        .samples
        .iter()
        .map(|s| s.label.class().expect("holdout is labeled"))
        .collect();
    let icv = intra_class_variance(&descriptors, &labels)?;

    let tagged: Vec<&Sample> = unlabeled
        .iter()
        .filter(|s| s.provenance.is_some())
        .collect();
    let pseudo_acc = if tagged.is_empty() {
        None
    } else {
        let mut assigned = Vec::with_capacity(tagged.len());
        let mut provenance = Vec::with_capacity(tagged.len());
        for s in &tagged {
            let trace = forward_trace(params, &s.features)?;
            assigned.push(assign_pseudo_label(
                cfg.train.scheme,
                &trace.feature,
                &trace.logits,
                centers,
                holdout.num_classes,
            )?);
            provenance.push(s.provenance.unwrap());
        }
        Some(pseudo_label_accuracy(&assigned, &provenance)?)
    };

    Ok(ReportFile {
        scheme: scheme_name.to_string(),
        seed,
        n_unlabeled: unlabeled.len(),
        lambda: cfg.train.lambda,
        rank1: report.rank(1),
        rank5: report.rank(5),
        rank10: report.rank(10),
        map: report.map,
        intra_class_variance: icv,
        pseudo_label_accuracy: pseudo_acc,
        query_count: report.query_count,
        gallery_size: report.gallery_size,
        cmc: report.cmc,
    })
}

#[derive(Debug)]
pub struct EvalArtifacts {
    pub report: PathBuf,
    pub report_data: ReportFile,
}

/// Evaluates a checkpoint on the hold-out split of the data directory and
/// writes `report.json`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    data_dir: &Path,
    out: &Path,
) -> Result<EvalArtifacts> {
    ensure_dir(out)?;
    let ckpt = load_checkpoint(checkpoint_path)?;
    let (prepared, unlabeled) = load_data_dir(cfg, data_dir)?;
    let report_data = evaluate_model(
        cfg,
        &ckpt.params,
        &ckpt.centers,
        &prepared.holdout,
        &unlabeled,
        cfg.train.scheme.token(),
        cfg.train.seed,
    )?;
    let report = out.join(REPORT_JSON);
    std::fs::write(
        &report,
        serde_json::to_string_pretty(&report_data)
            .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?,
    )?;
    write_resolved_config(cfg, out)?;
    Ok(EvalArtifacts {
        report,
        report_data,
    })
}

// ---------------------------------------------------------------------------
// compare / sweep-lambda
// ---------------------------------------------------------------------------

/// A scheme axis entry: a labeling scheme, or the supervised-only baseline
/// that trains without any unlabeled data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunScheme {
    Baseline,
    Labeling(Scheme),
}

impl RunScheme {
    pub fn parse(token: &str) -> Result<Self> {
        if token == "baseline" {
            return Ok(RunScheme::Baseline);
        }
        Ok(RunScheme::Labeling(token.parse()?))
    }

    pub fn token(&self) -> &'static str {
        match self {
            RunScheme::Baseline => "baseline",
            RunScheme::Labeling(s) => s.token(),
        }
    }
}

/// One grid point of a comparison or sweep.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec {
    pub scheme: RunScheme,
    pub seed: u64,
    pub n_unlabeled: usize,
    pub lambda: f64,
}

/// Runs the full generate/train/evaluate pipeline in memory for one grid
/// point and returns its report row.
pub fn run_single(base: &ExperimentConfig, spec: &RunSpec) -> Result<ReportFile> {
    let mut cfg = base.with_run_seed(spec.seed);
    cfg.train.lambda = spec.lambda;
    cfg.unlabeled.count = match spec.scheme {
        RunScheme::Baseline => 0,
        RunScheme::Labeling(_) => spec.n_unlabeled,
    };
    if let RunScheme::Labeling(s) = spec.scheme {
        cfg.train.scheme = s;
    }
    let (prepared, unlabeled) = generate_all(&cfg)?;
    let outcome = train(&cfg.train_config(), &prepared.train, &unlabeled)?;
    let mut row = evaluate_model(
        &cfg,
        &outcome.params,
        &outcome.centers,
        &prepared.holdout,
        &unlabeled,
        spec.scheme.token(),
        spec.seed,
    )?;
    // report the trainer's own final-epoch labeling accuracy so the row
    // matches the training log
    if let Some(acc) = outcome.history.final_pseudo_label_accuracy() {
        row.pseudo_label_accuracy = Some(acc);
    }
    Ok(row)
}

#[derive(Debug)]
pub struct FailedRun {
    pub scheme: String,
    pub seed: u64,
    pub n_unlabeled: usize,
    pub lambda: f64,
    pub error: Error,
}

pub struct GridOutcome {
    pub csv: PathBuf,
    pub rows: Vec<ReportFile>,
    pub failures: Vec<FailedRun>,
}

fn run_grid(
    base: &ExperimentConfig,
    specs: &[RunSpec],
    out: &Path,
    csv_name: &str,
) -> Result<GridOutcome> {
    ensure_dir(out)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for spec in specs {
        match run_single(base, spec) {
            Ok(row) => rows.push(row),
            Err(error) => failures.push(FailedRun {
                scheme: spec.scheme.token().to_string(),
                seed: spec.seed,
                n_unlabeled: spec.n_unlabeled,
                lambda: spec.lambda,
                error,
            }),
        }
    }
    rows.sort_by(|a, b| {
        a.scheme
            .cmp(&b.scheme)
            .then(a.seed.cmp(&b.seed))
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.n_unlabeled.cmp(&b.n_unlabeled))
    });
    let csv = out.join(csv_name);
    std::fs::write(&csv, grid_csv(&rows))?;
    write_resolved_config(base, out)?;
    Ok(GridOutcome {
        csv,
        rows,
        failures,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-run rows followed by per-group mean/std rows, where a group is one
/// (scheme, lambda, n_unlabeled) combination.
fn grid_csv(rows: &[ReportFile]) -> String {
    let mut out = String::from(
        "scheme,seed,n_unlabeled,lambda,rank1,rank5,rank10,map,intra_class_variance,pseudo_label_accuracy\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.scheme,
            r.seed,
            r.n_unlabeled,
            r.lambda,
            r.rank1,
            r.rank5,
            r.rank10,
            r.map,
            r.intra_class_variance,
            fmt_opt(r.pseudo_label_accuracy)
        );
    }
    let mut groups: Vec<(String, f64, usize)> = rows
        .iter()
        .map(|r| (r.scheme.clone(), r.lambda, r.n_unlabeled))
        .collect();
    groups.dedup();
    for (scheme, lambda, n_unlabeled) in groups {
        let members: Vec<&ReportFile> = rows
            .iter()
            .filter(|r| r.scheme == scheme && r.lambda == lambda && r.n_unlabeled == n_unlabeled)
            .collect();
        for (tag, f) in [("mean", mean as fn(&[f64]) -> f64), ("std", std_dev)] {
            let col = |get: fn(&ReportFile) -> f64| -> f64 {
                let vals: Vec<f64> = members.iter().map(|r| get(r)).collect();
                f(&vals)
            };
            let pseudo: Vec<f64> = members
                .iter()
                .filter_map(|r| r.pseudo_label_accuracy)
                .collect();
            let pseudo_cell = if pseudo.is_empty() {
                String::new()
            } else {
                f(&pseudo).to_string()
            };
            let _ = writeln!(
                out,
                "{scheme},{tag},{n_unlabeled},{lambda},{},{},{},{},{},{pseudo_cell}",
                col(|r| r.rank1),
                col(|r| r.rank5),
                col(|r| r.rank10),
                col(|r| r.map),
                col(|r| r.intra_class_variance),
            );
        }
    }
    out
}

fn mean(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn std_dev(vals: &[f64]) -> f64 {
    if vals.len() < 2 {
        return 0.0;
    }
    let m = mean(vals);
    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
}

/// Trains and evaluates every (scheme, seed, n_unlabeled) combination.
/// Sub-run failures are collected, not fatal; rows are emitted for the rest.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    schemes: &[RunScheme],
    seeds: &[u64],
    unlabeled_counts: Option<&[usize]>,
    out: &Path,
) -> Result<GridOutcome> {
    if schemes.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "compare needs at least one scheme and one seed".into(),
        ));
    }
    let default_counts = [cfg.unlabeled.count];
    let counts = unlabeled_counts.unwrap_or(&default_counts);
    let mut specs = Vec::new();
    for &scheme in schemes {
        let scheme_counts: &[usize] = match scheme {
            RunScheme::Baseline => &[0],
            RunScheme::Labeling(_) => counts,
        };
        for &n in scheme_counts {
            for &seed in seeds {
                specs.push(RunSpec {
                    scheme,
                    seed,
                    n_unlabeled: n,
                    lambda: cfg.train.lambda,
                });
            }
        }
    }
    run_grid(cfg, &specs, out, COMPARE_CSV)
}

/// Sensitivity sweep over the center-loss weight with the config's scheme.
pub fn cmd_sweep_lambda(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
    seeds: &[u64],
    out: &Path,
) -> Result<GridOutcome> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one lambda and one seed".into(),
        ));
    }
    if lambdas.iter().any(|l| *l < 0.0 || !l.is_finite()) {
        return Err(Error::Config(
            "lambda values must be >= 0 and finite".into(),
        ));
    }
    let mut specs = Vec::new();
    for &lambda in lambdas {
        for &seed in seeds {
            specs.push(RunSpec {
                scheme: RunScheme::Labeling(cfg.train.scheme),
                seed,
                n_unlabeled: cfg.unlabeled.count,
                lambda,
            });
        }
    }
    run_grid(cfg, &specs, out, SWEEP_LAMBDA_CSV)
}

/// Default lambda grid for the sensitivity sweep.
pub const DEFAULT_LAMBDAS: [f64; 3] = [1e-3, 1e-4, 1e-5];
