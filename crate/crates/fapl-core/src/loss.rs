//! Classification loss for one-hot and distributed targets with analytic
//! gradients, the center regularizer and its update rule, and the combined
//! batch objective `L = L_S + lambda * L_C`.
//!
//! Cross-entropy is evaluated in the max-shifted form
//! `-sum_k q_k (y_k - y_max) + ln sum_j exp(y_j - y_max)` so large logits
//! cannot overflow. Its gradient is `p - q` with `p` the softmax of the
//! logits; the one-hot forms are the `q = delta_l` special case and the two
//! routes agree to machine precision.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::labeling::{CenterBank, PseudoLabel};
use crate::model::softmax_prob;

/// Per-batch objective decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub center: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.classification.is_finite() && self.center.is_finite() && self.total.is_finite()
    }
}

fn check_distribution(q: &[f64]) -> Result<()> {
    if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input(
            "target distribution has negative or non-finite entries".into(),
        ));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!(
            "target distribution sums to {sum}, not 1"
        )));
    }
    Ok(())
}

fn shifted_logits(y: &[f64]) -> (Vec<f64>, f64) {
    let y_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = y.iter().map(|v| v - y_max).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    (shifted, lse)
}

/// Cross-entropy of logits `y` against a distribution target `q`.
pub fn cross_entropy(y: &[f64], q: &[f64]) -> Result<f64> {
    if y.len() != q.len() {
        return Err(Error::Shape(format!(
            "logits have {} entries, target has {}",
            y.len(),
            q.len()
        )));
    }
    check_distribution(q)?;
    let (shifted, lse) = shifted_logits(y);
    let weighted: f64 = q.iter().zip(&shifted).map(|(qk, s)| qk * s).sum();
    Ok(lse - weighted)
}

/// Cross-entropy of logits `y` against the one-hot target `class` (1-based):
/// `-(y_l - y_max) + ln sum exp(y_j - y_max)`.
pub fn cross_entropy_onehot(y: &[f64], class: usize) -> Result<f64> {
    if class == 0 || class > y.len() {
        return Err(Error::Input(format!(
            "one-hot class {class} outside 1..={}",
            y.len()
        )));
    }
    let (shifted, lse) = shifted_logits(y);
    Ok(lse - shifted[class - 1])
}

/// Gradient of [`cross_entropy`] with respect to the logits: `p - q`.
pub fn cross_entropy_grad(y: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if y.len() != q.len() {
        return Err(Error::Shape(format!(
            "logits have {} entries, target has {}",
            y.len(),
            q.len()
        )));
    }
    check_distribution(q)?;
    let p = softmax_prob(y)?;
    Ok(p.iter().zip(q).map(|(pk, qk)| pk - qk).collect())
}

/// Gradient of [`cross_entropy_onehot`]: `p - delta_l`.
pub fn cross_entropy_grad_onehot(y: &[f64], class: usize) -> Result<Vec<f64>> {
    if class == 0 || class > y.len() {
        return Err(Error::Input(format!(
            "one-hot class {class} outside 1..={}",
            y.len()
        )));
    }
    let mut p = softmax_prob(y)?;
    p[class - 1] -= 1.0;
    Ok(p)
}

/// Dispatches on the label encoding.
pub fn cross_entropy_label(y: &[f64], label: &PseudoLabel) -> Result<f64> {
    match label {
        PseudoLabel::OneHot(k) => cross_entropy_onehot(y, *k),
        PseudoLabel::Distribution(q) => cross_entropy(y, q),
    }
}

/// Dispatches on the label encoding.
pub fn cross_entropy_grad_label(y: &[f64], label: &PseudoLabel) -> Result<Vec<f64>> {
    match label {
        PseudoLabel::OneHot(k) => cross_entropy_grad_onehot(y, *k),
        PseudoLabel::Distribution(q) => cross_entropy_grad(y, q),
    }
}

/// Center regularizer over a batch: `0.5 * sum_i |x_i - c_{l_i}|^2`.
pub fn center_loss(features: &[Vec<f64>], assignments: &[usize], bank: &CenterBank) -> Result<f64> {
    if features.len() != assignments.len() {
        return Err(Error::Input(format!(
            "{} features but {} assignments",
            features.len(),
            assignments.len()
        )));
    }
    let mut total = 0.0;
    for (x, &k) in features.iter().zip(assignments) {
        if k == 0 || k > bank.num_classes() {
            return Err(Error::Input(format!(
                "assignment {k} outside 1..={}",
                bank.num_classes()
            )));
        }
        let c = &bank.centers[k - 1];
        if c.len() != x.len() {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match center dimension {}",
                x.len(),
                c.len()
            )));
        }
        total += x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(0.5 * total)
}

/// Gradient of the center term with respect to one feature: `x - c`.
pub fn center_loss_grad(x: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    if x.len() != c.len() {
        return Err(Error::Shape(format!(
            "center_loss_grad dimensions differ: {} vs {}",
            x.len(),
            c.len()
        )));
    }
    Ok(x.iter().zip(c).map(|(a, b)| a - b).collect())
}

/// Moves each class center toward the mean of that class's batch members:
/// `delta_k = sum_i [l_i = k](c_k - x_i) / (1 + n_k)` is the scaled gradient
/// of the center term with respect to `c_k`, and the center descends it,
/// `c_k <- c_k - alpha * delta_k`. Classes absent from the batch are left
/// untouched. Only labeled samples may participate.
pub fn center_update(features: &[Vec<f64>], labels: &[Label], bank: &mut CenterBank) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = bank.feature_dim();
    let k_total = bank.num_classes();
    let mut sums = vec![vec![0.0; dim]; k_total];
    let mut counts = vec![0usize; k_total];
    for (x, label) in features.iter().zip(labels) {
        let k = match label {
            Label::Identity(k) => *k,
            Label::Unlabeled => {
                return Err(Error::Contract(
                    "unlabeled sample passed to center_update".into(),
                ))
            }
        };
        if k == 0 || k > k_total {
            return Err(Error::Input(format!("label {k} outside 1..={k_total}")));
        }
        if x.len() != dim {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match center dimension {dim}",
                x.len()
            )));
        }
        let c = &bank.centers[k - 1];
        for (s, (cv, xv)) in sums[k - 1].iter_mut().zip(c.iter().zip(x)) {
            *s += cv - xv;
        }
        counts[k - 1] += 1;
    }
    let alpha = bank.update_rate;
    for (k, (sum, &n)) in sums.iter().zip(&counts).enumerate() {
        if n == 0 {
            continue;
        }
        let denom = 1.0 + n as f64;
        for (cv, s) in bank.centers[k].iter_mut().zip(sum) {
            *cv -= alpha * (s / denom);
        }
    }
    Ok(())
}

/// Batch objective per the joint formulation: `L_S` sums the cross-entropy of
/// every member against its target; `L_C` sums the center term over members
/// with a center assignment (labeled ones only — unlabeled members carry
/// `None` and contribute nothing to the regularizer).
pub fn total_loss(
    logits: &[Vec<f64>],
    targets: &[PseudoLabel],
    features: &[Vec<f64>],
    center_assignments: &[Option<usize>],
    bank: &CenterBank,
    lambda: f64,
) -> Result<LossBreakdown> {
    let n = logits.len();
    if targets.len() != n || features.len() != n || center_assignments.len() != n {
        return Err(Error::Input(format!(
            "batch arity mismatch: {} logits, {} targets, {} features, {} assignments",
            n,
            targets.len(),
            features.len(),
            center_assignments.len()
        )));
    }
    let mut classification = 0.0;
    for (y, t) in logits.iter().zip(targets) {
        classification += cross_entropy_label(y, t)?;
    }
    let mut labeled_features = Vec::new();
    let mut labeled_assignments = Vec::new();
    for (x, a) in features.iter().zip(center_assignments) {
        if let Some(k) = a {
            labeled_features.push(x.clone());
            labeled_assignments.push(*k);
        }
    }
    let center = center_loss(&labeled_features, &labeled_assignments, bank)?;
    Ok(LossBreakdown {
        classification,
        center,
        lambda,
        total: classification + lambda * center,
    })
}
