//! Pseudo-label assignment for unlabeled samples: affinity-based one-hot and
//! distributed encodings from per-class feature centers, plus the three
//! baseline schemes used for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Either a single class index (1-based; `K+1` allowed only under the
/// all-in-one scheme) or a full distribution over the K classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PseudoLabel {
    OneHot(usize),
    Distribution(Vec<f64>),
}

impl PseudoLabel {
    /// The class this label names: the one-hot index, or the argmax of the
    /// distribution with ties broken toward the lowest index.
    pub fn argmax_class(&self) -> usize {
        match self {
            PseudoLabel::OneHot(k) => *k,
            PseudoLabel::Distribution(q) => argmax_lowest(q) + 1,
        }
    }
}

/// Index of the maximum entry, lowest index on ties.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The K per-class feature centers together with their update rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    pub centers: Vec<Vec<f64>>,
    pub update_rate: f64,
}

impl CenterBank {
    pub fn zeros(num_classes: usize, feature_dim: usize, update_rate: f64) -> Self {
        CenterBank {
            centers: vec![vec![0.0; feature_dim]; num_classes],
            update_rate,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }
}

/// Cosine similarity `x.c / (|x||c|)`. Defined as exactly 0 when either
/// vector has zero norm, so freshly initialized zero centers produce equal
/// similarities everywhere.
pub fn cosine_sim(x: &[f64], c: &[f64]) -> Result<f64> {
    if x.len() != c.len() {
        return Err(Error::Shape(format!(
            "cosine_sim dimensions differ: {} vs {}",
            x.len(),
            c.len()
        )));
    }
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut nc = 0.0;
    for (a, b) in x.iter().zip(c) {
        dot += a * b;
        nx += a * a;
        nc += b * b;
    }
    if nx == 0.0 || nc == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nx.sqrt() * nc.sqrt()))
}

fn similarities(x: &[f64], bank: &CenterBank) -> Result<Vec<f64>> {
    if bank.centers.is_empty() {
        return Err(Error::Config("center bank has no centers".into()));
    }
    bank.centers.iter().map(|c| cosine_sim(x, c)).collect()
}

/// One-hot affinity label: the class whose center is most cosine-similar to
/// `x`, ties broken toward the lowest class index. Returns a 1-based index.
pub fn fapl_onehot(x: &[f64], bank: &CenterBank) -> Result<usize> {
    let sims = similarities(x, bank)?;
    Ok(argmax_lowest(&sims) + 1)
}

/// Distributed affinity label: softmax over the raw cosine similarities.
pub fn fapl_distributed(x: &[f64], bank: &CenterBank) -> Result<Vec<f64>> {
    let sims = similarities(x, bank)?;
    let exps: Vec<f64> = sims.iter().map(|s| s.exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// All-in-one baseline: every unlabeled sample gets the extra class `K+1`.
pub fn baseline_all_in_one(num_classes: usize) -> usize {
    num_classes + 1
}

/// Prediction-based one-hot baseline: the argmax of a probability vector,
/// lowest index on ties.
pub fn baseline_prediction_onehot(p: &[f64]) -> Result<usize> {
    if p.is_empty() {
        return Err(Error::Input("probability vector is empty".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input(
            "probability vector has negative or non-finite entries".into(),
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!(
            "probability vector sums to {sum}, not 1"
        )));
    }
    Ok(argmax_lowest(p) + 1)
}

/// LSRO baseline: the uniform distribution over the K classes.
pub fn baseline_lsro(num_classes: usize) -> Vec<f64> {
    vec![1.0 / num_classes as f64; num_classes]
}

/// Labeling scheme selector; the token form appears in configs and CLI args.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "fapl-o")]
    FaplOneHot,
    #[serde(rename = "fapl-d")]
    FaplDistributed,
    #[serde(rename = "all-in-one")]
    AllInOne,
    #[serde(rename = "pred-onehot")]
    PredictionOneHot,
    #[serde(rename = "lsro")]
    Lsro,
}

impl Scheme {
    pub fn token(&self) -> &'static str {
        match self {
            Scheme::FaplOneHot => "fapl-o",
            Scheme::FaplDistributed => "fapl-d",
            Scheme::AllInOne => "all-in-one",
            Scheme::PredictionOneHot => "pred-onehot",
            Scheme::Lsro => "lsro",
        }
    }

    /// Classifier head width the scheme requires for a K-class dataset.
    pub fn required_head(&self, num_classes: usize) -> usize {
        match self {
            Scheme::AllInOne => num_classes + 1,
            _ => num_classes,
        }
    }
}

/// Applies a scheme to one unlabeled sample given its embedding, its head
/// logits, and the current centers.
pub fn assign_pseudo_label(
    scheme: Scheme,
    feature: &[f64],
    logits: &[f64],
    bank: &CenterBank,
    num_classes: usize,
) -> Result<PseudoLabel> {
    match scheme {
        Scheme::FaplOneHot => Ok(PseudoLabel::OneHot(fapl_onehot(feature, bank)?)),
        Scheme::FaplDistributed => Ok(PseudoLabel::Distribution(fapl_distributed(feature, bank)?)),
        Scheme::AllInOne => Ok(PseudoLabel::OneHot(baseline_all_in_one(num_classes))),
        Scheme::PredictionOneHot => {
            let p = crate::model::softmax_prob(logits)?;
            Ok(PseudoLabel::OneHot(baseline_prediction_onehot(&p)?))
        }
        Scheme::Lsro => Ok(PseudoLabel::Distribution(baseline_lsro(num_classes))),
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fapl-o" => Ok(Scheme::FaplOneHot),
            "fapl-d" => Ok(Scheme::FaplDistributed),
            "all-in-one" => Ok(Scheme::AllInOne),
            "pred-onehot" => Ok(Scheme::PredictionOneHot),
            "lsro" => Ok(Scheme::Lsro),
            other => Err(Error::Config(format!(
                "unknown scheme {other:?}, expected fapl-o|fapl-d|all-in-one|pred-onehot|lsro"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(centers: Vec<Vec<f64>>) -> CenterBank {
        CenterBank {
            centers,
            update_rate: 0.5,
        }
    }

    #[test]
    fn cosine_parallel_orthogonal_and_angle() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[3.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
    }

    #[test]
    fn cosine_zero_norm_rule() {
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_dimension_mismatch() {
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn onehot_picks_most_similar_center() {
        let b = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(fapl_onehot(&[1.0, 0.0], &b).unwrap(), 1);
        // similarities 0.6 vs 0.8
        assert_eq!(fapl_onehot(&[0.6, 0.8], &b).unwrap(), 2);
    }

    #[test]
    fn onehot_tie_breaks_to_lowest_index() {
        let b = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(fapl_onehot(&[1.0, 1.0], &b).unwrap(), 1);
    }

    #[test]
    fn onehot_empty_bank_is_config_error() {
        let b = bank(vec![]);
        assert!(matches!(fapl_onehot(&[1.0], &b), Err(Error::Config(_))));
    }

    #[test]
    fn distributed_cold_start_is_uniform() {
        let b = CenterBank::zeros(4, 3, 0.5);
        let q = fapl_distributed(&[0.3, -0.7, 2.0], &b).unwrap();
        for v in &q {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn distributed_matches_softmax_of_similarities() {
        // centers chosen so similarities are exactly (1, 0)
        let b = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = fapl_distributed(&[1.0, 0.0], &b).unwrap();
        assert!((q[0] - 0.7311).abs() < 1e-4);
        assert!((q[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn distributed_argmax_agrees_with_onehot() {
        let b = bank(vec![vec![1.0, 0.2], vec![-0.3, 0.9], vec![0.5, 0.5]]);
        for x in [[2.0, 0.1], [-1.0, 3.0], [0.4, 0.45]] {
            let q = fapl_distributed(&x, &b).unwrap();
            assert_eq!(argmax_lowest(&q) + 1, fapl_onehot(&x, &b).unwrap());
        }
    }

    #[test]
    fn all_in_one_is_static_extra_class() {
        assert_eq!(baseline_all_in_one(751), 752);
        assert_eq!(baseline_all_in_one(751), baseline_all_in_one(751));
    }

    #[test]
    fn prediction_onehot_argmax_and_ties() {
        assert_eq!(baseline_prediction_onehot(&[0.2, 0.8]).unwrap(), 2);
        assert_eq!(
            baseline_prediction_onehot(&[0.25, 0.25, 0.25, 0.25]).unwrap(),
            1
        );
        assert_eq!(baseline_prediction_onehot(&[0.0, 0.0, 1.0]).unwrap(), 3);
        assert!(matches!(
            baseline_prediction_onehot(&[0.9, 0.9]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            baseline_prediction_onehot(&[-0.5, 1.5]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn lsro_is_uniform() {
        assert_eq!(baseline_lsro(4), vec![0.25; 4]);
        let q = baseline_lsro(751);
        assert!(q.iter().all(|&v| v == 1.0 / 751.0));
        let sum: f64 = q.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let sum4: f64 = baseline_lsro(4).iter().sum();
        assert_eq!(sum4, 1.0);
    }

    #[test]
    fn scheme_tokens_round_trip() {
        for s in [
            Scheme::FaplOneHot,
            Scheme::FaplDistributed,
            Scheme::AllInOne,
            Scheme::PredictionOneHot,
            Scheme::Lsro,
        ] {
            assert_eq!(s.token().parse::<Scheme>().unwrap(), s);
        }
        assert!("bogus".parse::<Scheme>().is_err());
    }
}
