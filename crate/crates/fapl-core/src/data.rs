//! Sample sets: synthetic cluster generation, unlabeled-sample synthesis by
//! within-class interpolation, labeled-set reduction, CSV persistence, and
//! deterministic mini-batch partitioning.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity of a training sample: a 1-based class index or unlabeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Identity(usize),
    Unlabeled,
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Identity(k) => Some(*k),
            Label::Unlabeled => None,
        }
    }

    pub fn is_labeled(&self) -> bool {
        matches!(self, Label::Identity(_))
    }
}

/// One input vector with its label and, for synthetic unlabeled samples, the
/// hidden class it was generated from. Provenance is never consulted by
/// training; it exists only so pseudo-label accuracy can be measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Label,
    pub provenance: Option<usize>,
}

/// An ordered sample collection with its class count and input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Dataset {
    /// Indices of labeled samples of class `k`, in stored order.
    pub fn class_indices(&self, k: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == Label::Identity(k))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.samples.iter().filter(|s| s.label.is_labeled()).count()
    }

    /// Checks per-sample invariants: dimensions, finiteness, label ranges.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Input("dataset input dimension must be >= 1".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != self.input_dim {
                return Err(Error::Shape(format!(
                    "sample {i} has dimension {} but dataset declares {}",
                    s.features.len(),
                    self.input_dim
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("sample {i} has non-finite feature")));
            }
            if let Label::Identity(k) = s.label {
                if k == 0 || k > self.num_classes {
                    return Err(Error::Input(format!(
                        "sample {i} labeled {k}, outside 1..={}",
                        self.num_classes
                    )));
                }
            }
            if let Some(p) = s.provenance {
                if p == 0 || p > self.num_classes {
                    return Err(Error::Input(format!(
                        "sample {i} provenance {p}, outside 1..={}",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// True when every class 1..=K has at least one labeled sample.
    pub fn covers_all_classes(&self) -> bool {
        let mut seen = vec![false; self.num_classes];
        for s in &self.samples {
            if let Label::Identity(k) = s.label {
                seen[k - 1] = true;
            }
        }
        seen.iter().all(|&b| b)
    }
}

/// Parameters for the synthetic Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub per_class: usize,
    /// Standard deviation of the per-class mean draw (distance scale between
    /// cluster means).
    pub mean_spread: f64,
    /// Within-class standard deviation around the class mean.
    pub within_std: f64,
    /// Common offset added to every class mean along the all-ones direction.
    /// Large offsets push all clusters into a narrow cone, so raw cosine
    /// geometry is uninformative until an embedding learns to cancel the
    /// shared component.
    #[serde(default)]
    pub mean_offset: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_dim < 1 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.per_class < 1 {
            return Err(Error::Config("per_class must be >= 1".into()));
        }
        if !self.mean_spread.is_finite() || self.mean_spread <= 0.0 {
            return Err(Error::Config(format!(
                "mean_spread must be positive and finite, got {}",
                self.mean_spread
            )));
        }
        if self.within_std < 0.0 || !self.within_std.is_finite() {
            return Err(Error::Config(format!(
                "within_std must be >= 0 and finite, got {}",
                self.within_std
            )));
        }
        if !self.mean_offset.is_finite() {
            return Err(Error::Config(format!(
                "mean_offset must be finite, got {}",
                self.mean_offset
            )));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; dim];
    }
    let normal = Normal::new(0.0, std).expect("validated std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// Draws `K` class means once, then `per_class` samples per class around each
/// mean. Sample order is class 1 first, then class 2, and so on; the whole
/// construction is a pure function of the config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shift = cfg.mean_offset / (cfg.input_dim as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let mut m = gaussian_vec(&mut rng, cfg.input_dim, cfg.mean_spread);
            for v in &mut m {
                *v += shift;
            }
            m
        })
        .collect();
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    for (ci, mean) in means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let noise = gaussian_vec(&mut rng, cfg.input_dim, cfg.within_std);
            let features = mean.iter().zip(&noise).map(|(m, n)| m + n).collect();
            samples.push(Sample {
                features,
                label: Label::Identity(ci + 1),
                provenance: None,
            });
        }
    }
    Ok(Dataset {
        samples,
        num_classes: cfg.num_classes,
        input_dim: cfg.input_dim,
    })
}

/// Synthesizes `count` unlabeled samples lying on the labeled data manifold:
/// each is a convex combination `t*a + (1-t)*b` of two labeled samples of one
/// class, plus Gaussian noise, with `t` uniform in `[1-mix_strength, 1]`.
/// The source class is recorded as hidden provenance.
pub fn generate_unlabeled(
    ds: &Dataset,
    count: usize,
    mix_strength: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if !(0.0..=1.0).contains(&mix_strength) {
        return Err(Error::Input(format!(
            "mix_strength must be in [0, 1], got {mix_strength}"
        )));
    }
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::Input(format!(
            "noise_std must be >= 0 and finite, got {noise_std}"
        )));
    }
    if ds.samples.is_empty() {
        return Err(Error::Input(
            "cannot generate unlabeled samples from an empty dataset".into(),
        ));
    }
    let per_class: Vec<Vec<usize>> = (1..=ds.num_classes).map(|k| ds.class_indices(k)).collect();
    if let Some(k) = per_class.iter().position(|ix| ix.is_empty()) {
        return Err(Error::Input(format!(
            "class {} has no labeled samples to interpolate",
            k + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.random_range(0..ds.num_classes);
        let pool = &per_class[k];
        let a = &ds.samples[pool[rng.random_range(0..pool.len())]].features;
        let b = &ds.samples[pool[rng.random_range(0..pool.len())]].features;
        let t = if mix_strength == 0.0 {
            1.0
        } else {
            rng.random_range((1.0 - mix_strength)..=1.0)
        };
        let noise = gaussian_vec(&mut rng, ds.input_dim, noise_std);
        let features = a
            .iter()
            .zip(b)
            .zip(&noise)
            .map(|((av, bv), nv)| t * av + (1.0 - t) * bv + nv)
            .collect();
        out.push(Sample {
            features,
            label: Label::Unlabeled,
            provenance: Some(k + 1),
        });
    }
    Ok(out)
}

/// Labeled-set reduction fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fraction {
    Full,
    Half,
    Third,
}

impl Fraction {
    /// Number of samples kept from a class of size `n` under the reduction
    /// rule: classes under 8 samples keep everything, larger classes keep a
    /// ceil fraction.
    fn kept(&self, n: usize) -> usize {
        if n < 8 {
            return n;
        }
        match self {
            Fraction::Full => n,
            Fraction::Half => n.div_ceil(2),
            Fraction::Third => n.div_ceil(3),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            Fraction::Full => "full",
            Fraction::Half => "half",
            Fraction::Third => "third",
        }
    }
}

impl std::str::FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Fraction::Full),
            "half" => Ok(Fraction::Half),
            "third" => Ok(Fraction::Third),
            other => Err(Error::Config(format!(
                "unknown fraction {other:?}, expected full|half|third"
            ))),
        }
    }
}

/// Keeps the first `kept(n)` labeled samples of each class in stored order;
/// unlabeled samples pass through untouched. Every class stays represented.
pub fn reduce_labeled(ds: &Dataset, fraction: Fraction) -> Dataset {
    if fraction == Fraction::Full {
        return ds.clone();
    }
    let mut counts = vec![0usize; ds.num_classes];
    for s in &ds.samples {
        if let Label::Identity(k) = s.label {
            counts[k - 1] += 1;
        }
    }
    let quotas: Vec<usize> = counts.iter().map(|&n| fraction.kept(n)).collect();
    let mut taken = vec![0usize; ds.num_classes];
    let samples = ds
        .samples
        .iter()
        .filter(|s| match s.label {
            Label::Unlabeled => true,
            Label::Identity(k) => {
                if taken[k - 1] < quotas[k - 1] {
                    taken[k - 1] += 1;
                    true
                } else {
                    false
                }
            }
        })
        .cloned()
        .collect();
    Dataset {
        samples,
        num_classes: ds.num_classes,
        input_dim: ds.input_dim,
    }
}

/// Splits off the last `holdout_per_class` labeled samples of every class as
/// a held-out evaluation set. Unlabeled samples stay on the training side.
pub fn split_holdout(ds: &Dataset, holdout_per_class: usize) -> Result<(Dataset, Dataset)> {
    let counts: Vec<usize> = (1..=ds.num_classes)
        .map(|k| ds.class_indices(k).len())
        .collect();
    if let Some(k) = counts.iter().position(|&n| n <= holdout_per_class) {
        return Err(Error::Input(format!(
            "class {} has {} labeled samples, not enough to hold out {}",
            k + 1,
            counts[k],
            holdout_per_class
        )));
    }
    let mut seen = vec![0usize; ds.num_classes];
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for s in &ds.samples {
        match s.label {
            Label::Unlabeled => train.push(s.clone()),
            Label::Identity(k) => {
                seen[k - 1] += 1;
                if seen[k - 1] > counts[k - 1] - holdout_per_class {
                    holdout.push(s.clone());
                } else {
                    train.push(s.clone());
                }
            }
        }
    }
    let wrap = |samples| Dataset {
        samples,
        num_classes: ds.num_classes,
        input_dim: ds.input_dim,
    };
    Ok((wrap(train), wrap(holdout)))
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

/// Serializes samples to CSV. Header row is `d_in=<int>,K=<int>`; each sample
/// row is `f1,...,fd,label[,provenance]` with `U` for unlabeled. Floats use
/// the shortest representation that parses back to the identical value.
pub fn write_csv(
    path: &Path,
    samples: &[Sample],
    input_dim: usize,
    num_classes: usize,
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "d_in={input_dim},K={num_classes}");
    for (i, s) in samples.iter().enumerate() {
        if s.features.len() != input_dim {
            return Err(Error::Shape(format!(
                "sample {i} has dimension {}, expected {input_dim}",
                s.features.len()
            )));
        }
        if s.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "sample {i} has a non-finite feature, refusing to serialize"
            )));
        }
        for v in &s.features {
            let _ = write!(out, "{v},");
        }
        match s.label {
            Label::Identity(k) => {
                let _ = write!(out, "{k}");
            }
            Label::Unlabeled => out.push('U'),
        }
        if let Some(p) = s.provenance {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Convenience wrapper writing a whole dataset.
pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    write_csv(path, &ds.samples, ds.input_dim, ds.num_classes)
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = |msg: String| Error::Parse {
        line: 1,
        message: msg,
    };
    let mut parts = line.split(',');
    let d_part = parts.next().unwrap_or("");
    let k_part = parts
        .next()
        .ok_or_else(|| bad("header must be `d_in=<int>,K=<int>`".into()))?;
    if parts.next().is_some() {
        return Err(bad("header has trailing fields".into()));
    }
    let d_in: usize = d_part
        .strip_prefix("d_in=")
        .ok_or_else(|| bad(format!("expected `d_in=<int>`, got {d_part:?}")))?
        .parse()
        .map_err(|e| bad(format!("bad d_in: {e}")))?;
    let k: usize = k_part
        .strip_prefix("K=")
        .ok_or_else(|| bad(format!("expected `K=<int>`, got {k_part:?}")))?
        .parse()
        .map_err(|e| bad(format!("bad K: {e}")))?;
    if d_in == 0 {
        return Err(bad("d_in must be >= 1".into()));
    }
    if k == 0 {
        return Err(bad("K must be >= 1".into()));
    }
    Ok((d_in, k))
}

/// Parses a CSV file written by [`write_csv`]. Errors name the offending
/// 1-based line.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty file, header expected".into(),
    })?;
    let (input_dim, num_classes) = parse_header(header)?;
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != input_dim + 1 && fields.len() != input_dim + 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "expected {} or {} fields, got {}",
                    input_dim + 1,
                    input_dim + 2,
                    fields.len()
                ),
            });
        }
        let mut features = Vec::with_capacity(input_dim);
        for f in &fields[..input_dim] {
            let v: f64 = f.parse().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad feature value {f:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite feature value {f:?}"),
                });
            }
            features.push(v);
        }
        let label_tok = fields[input_dim];
        let label = if label_tok == "U" {
            Label::Unlabeled
        } else {
            let k: usize = label_tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("unknown label token {label_tok:?} (expected integer or `U`)"),
            })?;
            if k == 0 || k > num_classes {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("label {k} outside 1..={num_classes}"),
                });
            }
            Label::Identity(k)
        };
        let provenance = if fields.len() == input_dim + 2 {
            let p: usize = fields[input_dim + 1].parse().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad provenance: {e}"),
            })?;
            if p == 0 || p > num_classes {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("provenance {p} outside 1..={num_classes}"),
                });
            }
            Some(p)
        } else {
            None
        };
        samples.push(Sample {
            features,
            label,
            provenance,
        });
    }
    Ok(Dataset {
        samples,
        num_classes,
        input_dim,
    })
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Shuffles `0..sample_count` deterministically for `(seed, epoch)` and
/// partitions it into consecutive batches of `batch_size`; a final short
/// batch is kept.
pub fn make_batches(
    sample_count: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mixed = seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let mut order: Vec<usize> = (0..sample_count).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
