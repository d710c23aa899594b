use std::collections::HashMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;
use tofu_core::metrics::{cluster_scores, homogeneity_completeness_v};
use tofu_core::numerics::rng_from_seed;
use tofu_core::target::kmeans;

fn sse(points: &Array2<f64>, members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let d = points.ncols();
    let mut mean = vec![0.0; d];
    for &i in members {
        for j in 0..d {
            mean[j] += points[[i, j]] / members.len() as f64;
        }
    }
    members
        .iter()
        .map(|&i| (0..d).map(|j| (points[[i, j]] - mean[j]).powi(2)).sum::<f64>())
        .sum()
}

/// Best 2-partition by enumerating every subset containing point 0.
fn exhaustive_inertia(points: &Array2<f64>) -> f64 {
    let n = points.nrows();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << (n - 1)) {
        let (mut a, mut b) = (vec![0], Vec::new());
        for i in 1..n {
            if mask >> (i - 1) & 1 == 1 {
                a.push(i);
            } else {
                b.push(i);
            }
        }
        if b.is_empty() {
            continue;
        }
        best = best.min(sse(points, &a) + sse(points, &b));
    }
    best
}

/// Instances of 2..=8 points in 1..=3 dimensions drawn from `seed`.
fn small_instance(seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let n = rng.gen_range(2..=8);
    let d = rng.gen_range(1..=3);
    Array2::from_shape_simple_fn((n, d), || rng.gen_range(-3.0..3.0))
}

#[test]
fn kmeans_reaches_exhaustive_optimum_on_small_instances() {
    // restarted Lloyd is a local method: it may settle above the optimum on a
    // handful of instances, but never below it
    let total = 1000;
    let mut exact = 0;
    for seed in 0..total {
        let pts = small_instance(seed);
        let ours = kmeans(pts.view(), 2, seed).unwrap().inertia;
        let oracle = exhaustive_inertia(&pts);
        assert!(ours >= oracle - 1e-9 * oracle.max(1.0), "seed {seed}: below the optimum");
        if (ours - oracle).abs() <= 1e-9 * oracle.max(1.0) {
            exact += 1;
        }
    }
    assert!(exact as f64 >= 0.99 * total as f64, "{exact}/{total} exact");
}

#[test]
fn kmeans_inertia_history_never_increases() {
    for seed in 0..50 {
        let mut rng = rng_from_seed(seed);
        let pts = Array2::from_shape_simple_fn((40, 3), || rng.gen_range(-3.0..3.0));
        let r = kmeans(pts.view(), 3, seed).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", r.history);
        }
    }
}

fn h(counts: &[f64], n: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum()
}

/// V-measure via explicit contingency table and conditional entropies.
fn oracle_scores(k: &[usize], c: &[usize]) -> (f64, f64, f64) {
    let n = k.len() as f64;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut nk: HashMap<usize, f64> = HashMap::new();
    let mut nc: HashMap<usize, f64> = HashMap::new();
    for (&a, &b) in k.iter().zip(c) {
        *table.entry((a, b)).or_default() += 1.0;
        *nk.entry(a).or_default() += 1.0;
        *nc.entry(b).or_default() += 1.0;
    }
    let h_c = h(&nc.values().copied().collect::<Vec<_>>(), n);
    let h_k = h(&nk.values().copied().collect::<Vec<_>>(), n);
    let h_c_given_k: f64 = table.iter().map(|(&(a, _), &v)| -(v / n) * (v / nk[&a]).ln()).sum();
    let h_k_given_c: f64 = table.iter().map(|(&(_, b), &v)| -(v / n) * (v / nc[&b]).ln()).sum();
    let hom = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let com = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v = if hom + com == 0.0 { 0.0 } else { 2.0 * hom * com / (hom + com) };
    (hom, com, v)
}

#[test]
fn cluster_scores_match_entropy_table_oracle() {
    for seed in 0..200u64 {
        let mut rng = rng_from_seed(1000 + seed);
        let n = rng.gen_range(1..60);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let clusters: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let report = cluster_scores(&labels, &clusters, &truth).unwrap();
        let mut sums = (0.0, 0.0, 0.0);
        let mut m = 0.0;
        for y in 0..3 {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == y).collect();
            if idx.is_empty() {
                continue;
            }
            let k: Vec<usize> = idx.iter().map(|&i| clusters[i]).collect();
            let c: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
            let (a, b, v) = oracle_scores(&k, &c);
            let s = report.per_label[&y];
            assert!((s.homogeneity - a).abs() < 1e-12, "seed {seed}");
            assert!((s.completeness - b).abs() < 1e-12, "seed {seed}");
            assert!((s.v_measure - v).abs() < 1e-12, "seed {seed}");
            sums = (sums.0 + a, sums.1 + b, sums.2 + v);
            m += 1.0;
        }
        assert!((report.homogeneity - sums.0 / m).abs() < 1e-12);
        assert!((report.completeness - sums.1 / m).abs() < 1e-12);
        assert!((report.v_measure - sums.2 / m).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn scores_are_invariant_to_relabeling(
        pairs in prop::collection::vec((0usize..4, 0usize..3), 1..80),
        perm in Just([2usize, 0, 3, 1]),
    ) {
        let k: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let c: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let renamed: Vec<usize> = k.iter().map(|&v| perm[v]).collect();
        let a = homogeneity_completeness_v(&k, &c).unwrap();
        let b = homogeneity_completeness_v(&renamed, &c).unwrap();
        prop_assert!((a.v_measure - b.v_measure).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.v_measure));
    }

    #[test]
    fn swapping_roles_swaps_homogeneity_and_completeness(
        pairs in prop::collection::vec((0usize..4, 0usize..3), 1..80),
    ) {
        let k: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let c: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = homogeneity_completeness_v(&k, &c).unwrap();
        let b = homogeneity_completeness_v(&c, &k).unwrap();
        prop_assert!((a.homogeneity - b.completeness).abs() < 1e-12);
        prop_assert!((a.completeness - b.homogeneity).abs() < 1e-12);
    }
}
