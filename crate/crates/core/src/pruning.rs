//! EL2N scoring and per-class data pruning.
//!
//! A sample's EL2N score is the L2 distance between the predicted class
//! distribution and its one-hot target. High scores mark hard samples;
//! pruning keeps the hardest `ceil(keep_ratio * n_c)` of every class.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::numeric::ops::{one_hot_index, softmax};
use crate::numeric::Tensor;

/// Tolerance on `Σ probs = 1` accepted by [`el2n_score`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct El2nRecord {
    pub sample_index: usize,
    pub class_id: usize,
    pub score: f64,
    pub epoch_measured: usize,
}

/// `‖probs − one_hot‖₂` for a probability vector and a one-hot target.
pub fn el2n_score(probs: &[f64], one_hot: &[f64]) -> Result<f64> {
    if probs.len() != one_hot.len() || probs.is_empty() {
        return Err(Error::shape(
            "el2n_score",
            format!("probs len {} vs target len {}", probs.len(), one_hot.len()),
        ));
    }
    if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "probability {i} is {} (must be finite and >= 0)",
            probs[i]
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    one_hot_index(one_hot)?;
    Ok(probs
        .iter()
        .zip(one_hot)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt())
}

/// EL2N of `softmax(logits)` against class `label`.
pub fn el2n_from_logits(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let probs = softmax(logits);
    let mut target = vec![0.0; logits.len()];
    target[label] = 1.0;
    el2n_score(&probs, &target)
}

/// One record per sample, scored against the class head of `model`.
/// `sample_index` is the position in `images`.
pub fn score_dataset(
    model: &Model,
    images: &[Tensor],
    labels: &[usize],
    epoch: usize,
) -> Result<Vec<El2nRecord>> {
    if images.len() != labels.len() {
        return Err(Error::shape(
            "score_dataset",
            format!("{} images vs {} labels", images.len(), labels.len()),
        ));
    }
    images
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, &y))| {
            let logits = model.classify(x)?;
            Ok(El2nRecord {
                sample_index: i,
                class_id: y,
                score: el2n_from_logits(logits.data(), y)?,
                epoch_measured: epoch,
            })
        })
        .collect()
}

/// Averages the scores of several scoring passes over the same samples.
/// The result carries the epoch of the last pass.
pub fn average_scores(passes: &[Vec<El2nRecord>]) -> Result<Vec<El2nRecord>> {
    let (last, earlier) = passes
        .split_last()
        .ok_or_else(|| Error::InvalidArgument("no scoring passes to average".into()))?;
    let mut out = last.clone();
    for pass in earlier {
        if pass.len() != out.len() {
            return Err(Error::shape("average_scores", "passes cover different samples"));
        }
        for (acc, r) in out.iter_mut().zip(pass) {
            if (acc.sample_index, acc.class_id) != (r.sample_index, r.class_id) {
                return Err(Error::shape(
                    "average_scores",
                    format!("sample {} does not line up across passes", r.sample_index),
                ));
            }
            acc.score += r.score;
        }
    }
    let n = passes.len() as f64;
    out.iter_mut().for_each(|r| r.score /= n);
    Ok(out)
}

/// Number of samples kept from a group of `n`.
pub fn retained_count(n: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * n as f64).ceil() as usize).clamp(1.min(n), n)
}

fn check_keep_ratio(keep_ratio: f64) -> Result<()> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep_ratio {keep_ratio} not in (0, 1]"
        )));
    }
    Ok(())
}

/// Highest-scoring `ceil(keep_ratio * n)` records of each class (or of
/// the whole set when `per_class` is false). Equal scores prefer the
/// smaller sample index. Returns sorted sample indices.
pub fn select_retained(records: &[El2nRecord], keep_ratio: f64, per_class: bool) -> Result<Vec<usize>> {
    check_keep_ratio(keep_ratio)?;
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sample {} has a non-finite score",
            r.sample_index
        )));
    }
    let mut groups: BTreeMap<usize, Vec<&El2nRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry(if per_class { r.class_id } else { 0 })
            .or_default()
            .push(r);
    }
    let mut kept = Vec::new();
    for group in groups.values_mut() {
        group.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.sample_index.cmp(&b.sample_index))
        });
        let k = retained_count(group.len(), keep_ratio);
        kept.extend(group[..k].iter().map(|r| r.sample_index));
    }
    kept.sort_unstable();
    kept.dedup();
    Ok(kept)
}

/// Writes `sample_index,class_id,score,epoch` rows.
pub fn write_score_csv(records: &[El2nRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("sample_index,class_id,score,epoch\n");
    for r in records {
        writeln!(
            out,
            "{},{},{:.12},{}",
            r.sample_index, r.class_id, r.score, r.epoch_measured
        )
        .expect("writing to a String cannot fail");
    }
    fs::write(path, out)?;
    Ok(())
}
