//! Accuracy, Pearson correlation and clustering agreement
//! (homogeneity / completeness / V-measure) against hidden unstable values.
//!
//! Entropies use the natural log; every score is a ratio of entropies so the
//! base cancels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of positions where prediction equals label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(crate::error::shape_err("accuracy", labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::Undefined("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(crate::error::shape_err("pearson", u.len(), v.len()));
    }
    if u.len() < 2 {
        return Err(Error::Undefined("pearson needs at least two points".into()));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 || svv == 0.0 {
        return Err(Error::Undefined("pearson of a zero-variance sequence".into()));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0))
}

/// Homogeneity, completeness and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Scores for one flat clustering against truth values.
///
/// A single example scores `(1, 1, 1)`. When the truth has zero entropy,
/// homogeneity is 1; when the clustering has zero entropy, completeness is 1.
pub fn homogeneity_completeness_v(clusters: &[usize], truth: &[usize]) -> Result<ClusterScores> {
    if clusters.len() != truth.len() {
        return Err(crate::error::shape_err("cluster scores", truth.len(), clusters.len()));
    }
    if truth.is_empty() {
        return Err(Error::Undefined("cluster scores of an empty set".into()));
    }
    let n = truth.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_truth: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    for (&k, &c) in clusters.iter().zip(truth) {
        *joint.entry((k, c)).or_default() += 1;
        *by_truth.entry(c).or_default() += 1;
        *by_cluster.entry(k).or_default() += 1;
    }
    let h_truth = entropy(by_truth.values().copied(), n);
    let h_cluster = entropy(by_cluster.values().copied(), n);
    let h_joint = entropy(joint.values().copied(), n);
    let h_truth_given_cluster = h_joint - h_cluster;
    let h_cluster_given_truth = h_joint - h_truth;
    let homogeneity = if h_truth == 0.0 {
        1.0
    } else {
        (1.0 - h_truth_given_cluster / h_truth).clamp(0.0, 1.0)
    };
    let completeness = if h_cluster == 0.0 {
        1.0
    } else {
        (1.0 - h_cluster_given_truth / h_cluster).clamp(0.0, 1.0)
    };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(ClusterScores {
        homogeneity,
        completeness,
        v_measure,
    })
}

/// Cluster scores computed within each observed label, then averaged
/// without weighting across labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEvalReport {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
    pub per_label: BTreeMap<usize, ClusterScores>,
}

/// `labels[i]` is the observed label of example `i`, `clusters[i]` its
/// cluster id within that label, and `truth[i]` its hidden unstable value.
pub fn cluster_scores(labels: &[usize], clusters: &[usize], truth: &[usize]) -> Result<ClusterEvalReport> {
    if labels.len() != clusters.len() || labels.len() != truth.len() {
        return Err(crate::error::shape_err("cluster report", labels.len(), clusters.len()));
    }
    let mut slices: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for ((&y, &k), &z) in labels.iter().zip(clusters).zip(truth) {
        let e = slices.entry(y).or_default();
        e.0.push(k);
        e.1.push(z);
    }
    if slices.is_empty() {
        return Err(Error::Undefined("cluster report of an empty set".into()));
    }
    let mut per_label = BTreeMap::new();
    for (y, (k, z)) in &slices {
        per_label.insert(*y, homogeneity_completeness_v(k, z)?);
    }
    let m = per_label.len() as f64;
    let mean = |f: fn(&ClusterScores) -> f64| per_label.values().map(f).sum::<f64>() / m;
    Ok(ClusterEvalReport {
        homogeneity: mean(|s| s.homogeneity),
        completeness: mean(|s| s.completeness),
        v_measure: mean(|s| s.v_measure),
        per_label,
    })
}

/// Minimum and mean of per-group accuracies; empty groups are skipped.
pub fn group_accuracies(predictions: &[usize], labels: &[usize], groups: &[Vec<usize>]) -> Vec<Option<f64>> {
    groups
        .iter()
        .map(|g| {
            if g.is_empty() {
                None
            } else {
                let hits = g.iter().filter(|&&i| predictions[i] == labels[i]).count();
                Some(hits as f64 / g.len() as f64)
            }
        })
        .collect()
}
