use ndarray::Array2;

use crate::error::{Error, Result};

/// Loss used by [`super::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean softmax cross-entropy.
    CrossEntropy,
    /// `1/(2n) * sum |logits - onehot|^2`; a surrogate used in checks.
    SquaredError,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn check_labels(logits: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(crate::error::shape_err("labels", logits.nrows(), labels.len()));
    }
    let k = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: k,
        });
    }
    Ok(())
}

/// Mean cross-entropy and the softmax probabilities.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(logits, labels)?;
    if labels.is_empty() {
        return Err(Error::Undefined("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    Ok((total / labels.len() as f64, softmax_rows(logits)))
}

/// Squared-error loss against one-hot targets and its logit gradient.
pub fn squared_error(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(logits, labels)?;
    let n = labels.len() as f64;
    let mut diff = logits.clone();
    for (mut row, &y) in diff.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / (2.0 * n);
    diff /= n;
    Ok((loss, diff))
}
