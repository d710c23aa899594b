//! Target phase: per-label K-means in the unstable-feature space, worst-
//! cluster training, and the worst-cluster validation criterion.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng_from_seed, ModelParams, Rng};
use crate::synthgen::TrainView;
use crate::train::{self, GroupKey, Groups, TrainConfig, TrainOutcome};

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

fn sq(a: ndarray::ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn nearest(p: ndarray::ArrayView1<f64>, centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus(points: ArrayView2<f64>, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.nrows();
    let mut centroids = vec![points.row(rng.gen_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: ArrayView2<f64>, mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let n = points.nrows();
    let k = centroids.len();
    let dim = points.ncols();
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for (i, p) in points.rows().into_iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            dist[i] = d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        // an empty cluster takes the point farthest from its centroid
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] == 0 {
                let far = (0..n)
                    .filter(|&i| sizes[assignments[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    sizes[assignments[i]] -= 1;
                    sizes[c] += 1;
                    assignments[i] = c;
                    dist[i] = 0.0;
                    changed = true;
                }
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            counts[assignments[i]] += 1;
            for (s, v) in sums[assignments[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let inertia: f64 = points
            .rows()
            .into_iter()
            .zip(&assignments)
            .map(|(p, &a)| sq(p, &centroids[a]))
            .sum();
        history.push(inertia);
        if !changed {
            break;
        }
    }
    if hartigan(points, &mut centroids, &mut assignments) {
        let inertia = points
            .rows()
            .into_iter()
            .zip(&assignments)
            .map(|(p, &a)| sq(p, &centroids[a]))
            .sum();
        history.push(inertia);
    }
    KMeansResult {
        inertia: *history.last().expect("at least one iteration"),
        centroids,
        assignments,
        history,
    }
}

/// Single-point moves that lower the total inertia once centroid shifts are
/// accounted for. Escapes Lloyd fixpoints; returns whether anything moved.
fn hartigan(points: ArrayView2<f64>, centroids: &mut [Vec<f64>], assignments: &mut [usize]) -> bool {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut moved_any = false;
    for _ in 0..KMEANS_MAX_ITER {
        let mut moved = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let na = sizes[a] as f64;
            let removal = na / (na - 1.0) * sq(p, &centroids[a]);
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let nb = sizes[b] as f64;
                let gain = removal - nb / (nb + 1.0) * sq(p, &centroids[b]);
                if gain > 1e-12 * removal.max(1e-300) && best.is_none_or(|(_, g)| gain > g) {
                    best = Some((b, gain));
                }
            }
            if let Some((b, _)) = best {
                let nb = sizes[b] as f64;
                for (d, &v) in p.iter().enumerate() {
                    centroids[a][d] = (centroids[a][d] * na - v) / (na - 1.0);
                    centroids[b][d] = (centroids[b][d] * nb + v) / (nb + 1.0);
                }
                sizes[a] -= 1;
                sizes[b] += 1;
                assignments[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    if moved_any {
        // recompute centroids exactly to drop incremental rounding
        let dim = points.ncols();
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.rows().into_iter().zip(assignments.iter()) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            centroids[c] = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
        }
    }
    moved_any
}

/// Lloyd's algorithm with k-means++ seeding; best of
/// [`KMEANS_RESTARTS`] restarts by inertia (ties keep the earlier restart).
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if points.nrows() < k {
        return Err(Error::Config(format!("{} points for k = {k}", points.nrows())));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { layer: 0 });
    }
    let mut rng = rng_from_seed(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus(points, k, &mut rng);
        let r = lloyd(points, init);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Clusters of one label slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelClusters {
    /// Example indices (into the clustered view) carrying this label.
    pub indices: Vec<usize>,
    /// Cluster id of each entry of `indices`.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub n_c: usize,
    pub per_label: BTreeMap<usize, LabelClusters>,
}

impl ClusterAssignment {
    /// Cluster id per example of the clustered view.
    pub fn cluster_of(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for lc in self.per_label.values() {
            for (&i, &c) in lc.indices.iter().zip(&lc.assignment) {
                out[i] = c;
            }
        }
        out
    }

    /// One group per `(label, cluster)`.
    pub fn groups(&self) -> Groups {
        let mut keyed: Vec<(usize, GroupKey)> = Vec::new();
        for (&label, lc) in &self.per_label {
            for (&i, &part) in lc.indices.iter().zip(&lc.assignment) {
                keyed.push((i, GroupKey { label, part }));
            }
        }
        keyed.sort_unstable();
        Groups::from_keys_indexed(keyed)
    }

    /// Nearest-centroid assignment of new points (by observed label).
    pub fn assign(&self, points: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let lc = self.per_label.get(y).ok_or(Error::LabelOutOfRange {
                    label: *y,
                    num_classes: self.per_label.len(),
                })?;
                Ok(nearest(points.row(i), &lc.centroids).0)
            })
            .collect()
    }
}

impl Groups {
    /// Groups from explicit `(index, key)` pairs.
    pub fn from_keys_indexed(pairs: impl IntoIterator<Item = (usize, GroupKey)>) -> Self {
        let mut map = BTreeMap::<GroupKey, Vec<usize>>::new();
        for (i, k) in pairs {
            map.entry(k).or_default().push(i);
        }
        let (keys, members) = map.into_iter().unzip();
        Self { keys, members }
    }
}

/// Encodes a view with `f_Z` (raw output layer).
pub fn encode(f_z: &ModelParams, view: &TrainView) -> Result<Array2<f64>> {
    f_z.predict_logits(view.x.view())
}

/// K-means within each label slice of `view` in `f_Z` space. Labels with
/// fewer than `n_c` examples fall back to a single cluster.
pub fn cluster_by_label(f_z: &ModelParams, view: &TrainView, n_c: usize, seed: u64) -> Result<ClusterAssignment> {
    cluster_points_by_label(encode(f_z, view)?.view(), &view.y, n_c, seed)
}

/// Same as [`cluster_by_label`] on precomputed representations.
pub fn cluster_points_by_label(points: ArrayView2<f64>, labels: &[usize], n_c: usize, seed: u64) -> Result<ClusterAssignment> {
    if n_c == 0 {
        return Err(Error::Config("n_c must be at least 1".into()));
    }
    if points.nrows() != labels.len() {
        return Err(crate::error::shape_err("cluster points", labels.len(), points.nrows()));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_label.entry(y).or_default().push(i);
    }
    let mut per_label = BTreeMap::new();
    for (y, indices) in by_label {
        let k = if indices.len() < n_c {
            warn!("label {y}: {} examples for n_c = {n_c}; using one cluster", indices.len());
            1
        } else {
            n_c
        };
        let sub = points.select(Axis(0), &indices);
        let r = kmeans(sub.view(), k, derive_seed(seed, &[y as u64]))?;
        per_label.insert(
            y,
            LabelClusters {
                indices,
                assignment: r.assignments,
                centroids: r.centroids,
            },
        );
    }
    Ok(ClusterAssignment { n_c, per_label })
}

/// Worst-group training on the target (groups are usually
/// [`ClusterAssignment::groups`]), validated by worst-group accuracy on
/// `val` under `val_groups`.
pub fn group_dro_train(
    train_view: &TrainView,
    groups: &Groups,
    val: &TrainView,
    val_groups: &Groups,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if groups.is_empty() {
        return Err(Error::Config("group DRO needs at least one group".into()));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[0]));
    let init = cfg.init_model(train_view.input_dim(), train_view.num_classes, &mut rng)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    train::train_group_dro(init, train_view, groups, cfg, &[], &mut rng, |p| {
        train::worst_group_accuracy(p, val, val_groups)
    })
}

/// Minimum per-cluster accuracy on `val`, clustering it per label with
/// `f_Z`.
pub fn worst_cluster_val_accuracy(model: &ModelParams, f_z: &ModelParams, val: &TrainView, n_c: usize, seed: u64) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Config("empty validation view".into()));
    }
    let groups = cluster_by_label(f_z, val, n_c, seed)?.groups();
    train::worst_group_accuracy(model, val, &groups)
}
