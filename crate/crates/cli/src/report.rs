//! Aggregates over selected records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::Method;
use crate::output::RunRecord;
use crate::runner::{CellRecord, ControlRecord, Representation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub failed: usize,
}

impl Aggregate {
    /// Sample statistics of the `Some` values; `None` values count as failures.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Self> {
        let mut v = Vec::new();
        let mut failed = 0;
        for x in values {
            match x {
                Some(x) => v.push(x),
                None => failed += 1,
            }
        }
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            n: v.len(),
            failed,
        })
    }
}

/// Records of one method, restricted by `keep`.
pub fn of_method<'a>(
    records: &'a [RunRecord],
    method: Method,
    n_c: Option<usize>,
    keep: impl Fn(&CellRecord) -> bool + 'a,
) -> impl Iterator<Item = &'a CellRecord> + 'a {
    records
        .iter()
        .map(|r| &r.record)
        .filter(move |r| r.method == method && (method != Method::Tofu || r.n_c == n_c) && keep(r))
}

pub fn test_accuracy(records: &[RunRecord], method: Method, n_c: Option<usize>, keep: impl Fn(&CellRecord) -> bool) -> Option<Aggregate> {
    Aggregate::of(of_method(records, method, n_c, keep).map(|r| r.test_accuracy))
}

pub fn control_v(controls: &[ControlRecord], rep: Representation, keep: impl Fn(&ControlRecord) -> bool) -> Option<Aggregate> {
    Aggregate::of(
        controls
            .iter()
            .filter(|c| c.representation == rep && keep(c))
            .map(|c| c.clusters.map(|q| q.v_measure)),
    )
}

/// Mean test accuracy (and stdev over seeds) per transfer and method.
pub fn summary_table(records: &[RunRecord], first_n_c: usize) -> String {
    let mut cells: BTreeMap<(String, String), BTreeMap<Method, Vec<Option<f64>>>> = BTreeMap::new();
    for r in records.iter().map(|r| &r.record) {
        if r.method == Method::Tofu && r.n_c != Some(first_n_c) {
            continue;
        }
        cells
            .entry((r.sources.clone(), r.target.clone()))
            .or_default()
            .entry(r.method)
            .or_default()
            .push(r.test_accuracy);
    }
    let methods: Vec<Method> = Method::ALL
        .into_iter()
        .filter(|m| cells.values().any(|c| c.contains_key(m)))
        .collect();
    let mut s = format!("{:<28}", "transfer");
    for m in &methods {
        let _ = write!(s, " {:>14}", m.as_str());
    }
    s.push('\n');
    for ((src, tgt), by) in &cells {
        let _ = write!(s, "{:<28}", format!("{src}->{tgt}"));
        for m in &methods {
            let txt = by
                .get(m)
                .and_then(|v| Aggregate::of(v.iter().copied()))
                .map_or("-".to_string(), |a| format!("{:.3}±{:.3}", a.mean, a.std));
            let _ = write!(s, " {txt:>14}");
        }
        s.push('\n');
    }
    s
}
