use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Two-component principal component projection.
#[derive(Debug, Clone)]
pub struct Pca2 {
    /// `n x 2` projections of the centred points.
    pub projections: Array2<f64>,
    /// Variances along the two components (non-increasing).
    pub explained_variance: [f64; 2],
    /// Unit principal directions.
    pub components: [Array1<f64>; 2],
    /// Set when every point is identical; projections are then zero.
    pub degenerate: bool,
}

const MAX_ITERS: usize = 200_000;
const TOL: f64 = 1e-14;

fn power_iteration(cov: &Array2<f64>) -> (f64, Array1<f64>) {
    let d = cov.nrows();
    // start from the heaviest column, which is never orthogonal to the top
    // eigenvector of a PSD matrix
    let start = (0..d)
        .max_by(|&a, &b| {
            let na = cov.column(a).dot(&cov.column(a));
            let nb = cov.column(b).dot(&cov.column(b));
            na.partial_cmp(&nb).unwrap()
        })
        .unwrap_or(0);
    let mut v = cov.column(start).to_owned();
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return (0.0, unit(d, 0));
    }
    v /= norm;
    for _ in 0..MAX_ITERS {
        let mut w = cov.dot(&v);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return (0.0, v);
        }
        w /= wn;
        let diff = (&w - &v).mapv(f64::abs).sum();
        v = w;
        if diff < TOL {
            break;
        }
    }
    let lambda = v.dot(&cov.dot(&v));
    (lambda, v)
}

fn unit(d: usize, i: usize) -> Array1<f64> {
    let mut e = Array1::zeros(d);
    if d > 0 {
        e[i.min(d - 1)] = 1.0;
    }
    e
}

/// Any unit vector orthogonal to `v`.
fn orthogonal_to(v: &Array1<f64>) -> Array1<f64> {
    let d = v.len();
    for i in 0..d {
        let mut e = unit(d, i);
        let proj = e.dot(v);
        e.scaled_add(-proj, v);
        let n = e.dot(&e).sqrt();
        if n > 1e-6 {
            return e / n;
        }
    }
    Array1::zeros(d)
}

/// Projects mean-centred points onto the top two eigenvectors of their
/// (population) covariance, found by power iteration with deflation.
pub fn pca2(points: ArrayView2<f64>) -> Result<Pca2> {
    let (n, d) = points.dim();
    if n < 3 {
        return Err(Error::Degenerate(format!("pca needs at least 3 points, got {n}")));
    }
    if !points.iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("pca input has non-finite entries".into()));
    }
    let mean = points.mean_axis(Axis(0)).unwrap();
    let centred = &points - &mean;
    let cov = centred.t().dot(&centred) / n as f64;
    let total: f64 = cov.diag().sum();
    if total <= 0.0 {
        return Ok(Pca2 {
            projections: Array2::zeros((n, 2)),
            explained_variance: [0.0, 0.0],
            components: [unit(d, 0), orthogonal_to(&unit(d, 0))],
            degenerate: true,
        });
    }
    let (l1, v1) = power_iteration(&cov);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[[i, j]] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut l2, mut v2) = power_iteration(&deflated);
    // below round-off the deflated matrix carries no direction
    if l2 <= total * 1e-12 {
        l2 = l2.max(0.0);
        v2 = orthogonal_to(&v1);
    }
    let mut projections = Array2::zeros((n, 2));
    projections.column_mut(0).assign(&centred.dot(&v1));
    projections.column_mut(1).assign(&centred.dot(&v2));
    Ok(Pca2 {
        projections,
        explained_variance: [l1, l2.min(l1)],
        components: [v1, v2],
        degenerate: false,
    })
}
