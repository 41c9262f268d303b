//! Retrieval-style evaluation of learned embeddings: cosine ranking, CMC
//! rank-i accuracies, mean average precision, intra-class variance, and
//! pseudo-label accuracy against hidden provenance.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::labeling::{cosine_sim, PseudoLabel};
use crate::model::{forward, ModelParams};

/// CMC curve and mAP for one query/gallery evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `cmc[i]` is the rank-(i+1) accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub query_count: usize,
    pub gallery_size: usize,
}

impl RetrievalReport {
    /// Rank-`r` accuracy, clamped to the computed curve length.
    pub fn rank(&self, r: usize) -> f64 {
        let idx = r.clamp(1, self.cmc.len());
        self.cmc[idx - 1]
    }
}

/// Embeds every sample; the classifier head is not consulted.
pub fn extract_descriptors(params: &ModelParams, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| forward(params, &s.features).map(|(x, _)| x))
        .collect()
}

/// Gallery indices sorted by descending cosine similarity to the query,
/// ties broken by ascending index.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Input("gallery is empty".into()));
    }
    let sims = gallery
        .iter()
        .map(|g| cosine_sim(query, g))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

fn first_hit(ranked: &[bool]) -> Option<usize> {
    ranked.iter().position(|&r| r)
}

/// Cumulative match characteristic: `cmc[i]` is the fraction of queries whose
/// first relevant gallery item appears within the top `i+1` ranks. Each
/// query's relevance list must be in ranked order and contain at least one
/// relevant item.
pub fn cmc(relevance: &[Vec<bool>], max_rank: usize) -> Result<Vec<f64>> {
    if relevance.is_empty() {
        return Err(Error::Input("cmc needs at least one query".into()));
    }
    if max_rank == 0 {
        return Err(Error::Input("max_rank must be >= 1".into()));
    }
    let mut hits = Vec::with_capacity(relevance.len());
    for (qi, ranked) in relevance.iter().enumerate() {
        match first_hit(ranked) {
            Some(pos) => hits.push(pos),
            None => {
                return Err(Error::Input(format!(
                    "query {qi} has no relevant gallery item"
                )))
            }
        }
    }
    let n = relevance.len() as f64;
    Ok((1..=max_rank)
        .map(|rank| hits.iter().filter(|&&pos| pos < rank).count() as f64 / n)
        .collect())
}

/// Mean over queries of average precision, where a query's AP averages the
/// precision at each relevant item's rank over its relevant count.
pub fn mean_average_precision(relevance: &[Vec<bool>]) -> Result<f64> {
    if relevance.is_empty() {
        return Err(Error::Input("mAP needs at least one query".into()));
    }
    let mut ap_sum = 0.0;
    for (qi, ranked) in relevance.iter().enumerate() {
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &rel) in ranked.iter().enumerate() {
            if rel {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        if hits == 0 {
            return Err(Error::Input(format!(
                "query {qi} has no relevant gallery item"
            )));
        }
        ap_sum += precision_sum / hits as f64;
    }
    Ok(ap_sum / relevance.len() as f64)
}

/// Mean over classes of the mean squared distance of class members to their
/// class mean. Labels are arbitrary class ids; every class needs a member.
pub fn intra_class_variance(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::Input(
            "intra_class_variance needs at least one sample".into(),
        ));
    }
    if features.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let dim = features[0].len();
    let mut total = 0.0;
    for k in &classes {
        let members: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, l)| *l == k)
            .map(|(f, _)| f)
            .collect();
        let mut mean = vec![0.0; dim];
        for m in &members {
            for (a, b) in mean.iter_mut().zip(m.iter()) {
                *a += b;
            }
        }
        for a in &mut mean {
            *a /= members.len() as f64;
        }
        let msd: f64 = members
            .iter()
            .map(|m| {
                m.iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / members.len() as f64;
        total += msd;
    }
    Ok(total / classes.len() as f64)
}

/// Fraction of assignments whose named class equals the hidden provenance.
pub fn pseudo_label_accuracy(assigned: &[PseudoLabel], provenance: &[usize]) -> Result<f64> {
    if assigned.len() != provenance.len() {
        return Err(Error::Input(format!(
            "{} assignments but {} provenance entries",
            assigned.len(),
            provenance.len()
        )));
    }
    if assigned.is_empty() {
        return Err(Error::Input(
            "pseudo_label_accuracy needs at least one sample".into(),
        ));
    }
    let correct = assigned
        .iter()
        .zip(provenance)
        .filter(|(a, p)| a.argmax_class() == **p)
        .count();
    Ok(correct as f64 / assigned.len() as f64)
}

/// Query/gallery split over a labeled hold-out set: the first
/// `queries_per_class` samples of each class (stored order) probe the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSplit {
    pub query_indices: Vec<usize>,
    pub gallery_indices: Vec<usize>,
}

pub fn holdout_split(ds: &Dataset, queries_per_class: usize) -> Result<RetrievalSplit> {
    if queries_per_class == 0 {
        return Err(Error::Input("queries_per_class must be >= 1".into()));
    }
    let mut query_indices = Vec::new();
    let mut gallery_indices = Vec::new();
    for k in 1..=ds.num_classes {
        let members = ds.class_indices(k);
        if members.len() < queries_per_class + 1 {
            return Err(Error::Input(format!(
                "class {k} has {} samples; needs more than {queries_per_class} so every query has a match",
                members.len()
            )));
        }
        query_indices.extend_from_slice(&members[..queries_per_class]);
        gallery_indices.extend_from_slice(&members[queries_per_class..]);
    }
    Ok(RetrievalSplit {
        query_indices,
        gallery_indices,
    })
}

/// End-to-end retrieval evaluation of a model on a labeled hold-out set.
pub fn retrieval_report(
    params: &ModelParams,
    ds: &Dataset,
    queries_per_class: usize,
    max_rank: usize,
) -> Result<RetrievalReport> {
    let split = holdout_split(ds, queries_per_class)?;
    let descriptors = extract_descriptors(params, &ds.samples)?;
    let gallery: Vec<Vec<f64>> = split
        .gallery_indices
        .iter()
        .map(|&i| descriptors[i].clone())
        .collect();
    let gallery_labels: Vec<Label> = split
        .gallery_indices
        .iter()
        .map(|&i| ds.samples[i].label)
        .collect();
    let mut relevance = Vec::with_capacity(split.query_indices.len());
    for &qi in &split.query_indices {
        let order = rank_gallery(&descriptors[qi], &gallery)?;
        let qlabel = ds.samples[qi].label;
        relevance.push(
            order
                .iter()
                .map(|&gi| gallery_labels[gi] == qlabel)
                .collect::<Vec<bool>>(),
        );
    }
    Ok(RetrievalReport {
        cmc: cmc(&relevance, max_rank)?,
        map: mean_average_precision(&relevance)?,
        query_count: split.query_indices.len(),
        gallery_size: split.gallery_indices.len(),
    })
}
