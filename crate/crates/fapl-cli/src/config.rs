//! Experiment configuration: a TOML file with a section per concern, every
//! field defaulted, unknown keys rejected. A resolved copy (defaults and
//! derived values expanded) is written next to every command's outputs so a
//! run can be reproduced from its artifacts alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fapl_core::data::Fraction;
use fapl_core::{Error, Result, Scheme, SynthConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Labeled training samples per class (after the hold-out split).
    pub per_class: usize,
    /// Labeled samples per class held out for retrieval evaluation.
    pub holdout_per_class: usize,
    pub mean_spread: f64,
    pub within_std: f64,
    /// Shared offset of all class means along the all-ones direction; large
    /// values collapse raw cosine geometry until an embedding is learned.
    pub mean_offset: f64,
    pub labeled_fraction: Fraction,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_classes: 8,
            input_dim: 16,
            per_class: 30,
            holdout_per_class: 13,
            mean_spread: 1.0,
            within_std: 1.35,
            mean_offset: 0.0,
            labeled_fraction: Fraction::Full,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlabeledSection {
    pub count: usize,
    /// Interpolation reach: `t` is drawn from `[1 - mix_strength, 1]`.
    pub mix_strength: f64,
    /// Additive noise; omitted means `0.3 * data.within_std`.
    pub noise_std: Option<f64>,
    pub seed: u64,
}

impl Default for UnlabeledSection {
    fn default() -> Self {
        UnlabeledSection {
            count: 960,
            mix_strength: 1.0,
            noise_std: None,
            seed: 22,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub scheme: Scheme,
    pub lambda: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
    pub head_outputs: Option<usize>,
    pub average_batch_loss: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            scheme: base.scheme,
            lambda: base.lambda,
            alpha: base.alpha,
            // The default experiment trains the 240-sample labeled pool as
            // one batch per epoch; the learning rate is scaled for summed
            // batch gradients of that size.
            learning_rate: 2e-5,
            momentum: base.momentum,
            epochs: base.epochs,
            batch_size: 240,
            warmup_epochs: base.warmup_epochs,
            seed: 33,
            hidden_sizes: base.hidden_sizes,
            head_outputs: base.head_outputs,
            average_batch_loss: base.average_batch_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub queries_per_class: usize,
    pub max_rank: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            queries_per_class: 1,
            max_rank: 10,
        }
    }
}

/// Union of everything an experiment needs; see section types for fields.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub unlabeled: UnlabeledSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[], None)
    }

    /// Loads a config file, then applies `key=value` overrides (dotted keys,
    /// e.g. `train.lambda=0.001`) and an optional master seed.
    pub fn load_with_overrides(
        path: &Path,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides, seed)
    }

    pub fn from_toml(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse failed: {e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config invalid: {e}")))?;
        if let Some(s) = seed {
            cfg.set_master_seed(s);
        }
        cfg.resolve();
        Ok(cfg)
    }

    /// Derives one seed per randomness consumer from a single master seed.
    pub fn set_master_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.unlabeled.seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
    }

    /// Expands derived defaults so the serialized copy is self-contained.
    pub fn resolve(&mut self) {
        if self.unlabeled.noise_std.is_none() {
            self.unlabeled.noise_std = Some(0.3 * self.data.within_std);
        }
    }

    /// Shifts every seed by a per-run offset; used by compare/sweep grids.
    pub fn with_run_seed(&self, offset: u64) -> Self {
        let mut cfg = self.clone();
        cfg.data.seed = cfg.data.seed.wrapping_add(offset);
        cfg.unlabeled.seed = cfg.unlabeled.seed.wrapping_add(offset);
        cfg.train.seed = cfg.train.seed.wrapping_add(offset);
        cfg
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    /// Stable hash of the resolved config, recorded in checkpoints.
    pub fn hash(&self) -> Result<String> {
        Ok(fnv1a_hex(&self.to_toml_string()?))
    }

    /// Generator settings for the full labeled pool (training plus hold-out).
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.data.num_classes,
            input_dim: self.data.input_dim,
            per_class: self.data.per_class + self.data.holdout_per_class,
            mean_spread: self.data.mean_spread,
            within_std: self.data.within_std,
            mean_offset: self.data.mean_offset,
            seed: self.data.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            scheme: self.train.scheme,
            lambda: self.train.lambda,
            alpha: self.train.alpha,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            warmup_epochs: self.train.warmup_epochs,
            seed: self.train.seed,
            hidden_sizes: self.train.hidden_sizes.clone(),
            head_outputs: self.train.head_outputs,
            average_batch_loss: self.train.average_batch_loss,
        }
    }

    /// Noise level for unlabeled generation after resolution.
    pub fn unlabeled_noise_std(&self) -> f64 {
        self.unlabeled
            .noise_std
            .unwrap_or(0.3 * self.data.within_std)
    }
}

fn fnv1a_hex(s: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let value = parse_override_value(raw);
    let mut cur = table;
    for seg in &segments[..segments.len() - 1] {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override key {key:?} traverses a non-table value"))
        })?;
    }
    cur.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Interprets the value as TOML when possible, else as a bare string, so
/// `train.lambda=1e-3`, `train.hidden_sizes=[32,16]`, and
/// `train.scheme=fapl-d` all work without quoting.
fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(t) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
