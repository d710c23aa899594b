//! Self-contained SVG plots: the encoder's 2-D principal projection of a
//! target task, and accuracy against the number of clusters per label.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use tofu_core::numerics::{derive_seed, pca2, rng_from_seed, ModelParams};
use tofu_core::synthgen::{task_bundle, Role, TrainView};
use tofu_core::target::encode;
use tofu_core::train::{average_accuracy, train_erm, TrainConfig};

use crate::config::{ExperimentConfig, Method};
use crate::error::Result;
use crate::output::{selected_encoders, RunRecord, Selection};
use crate::runner::RunOutput;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const MAX_POINTS: usize = 1000;

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n\
         <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        W / 2.0,
        escape(title),
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN,
        W / 2.0,
        H - 12.0,
        escape(xlabel),
        H / 2.0,
        H / 2.0,
        escape(ylabel),
    );
}

fn sx(x: f64, lo: f64, hi: f64) -> f64 {
    MARGIN + (x - lo) / (hi - lo) * (W - 2.0 * MARGIN)
}

fn sy(y: f64, lo: f64, hi: f64) -> f64 {
    H - MARGIN - (y - lo) / (hi - lo) * (H - 2.0 * MARGIN)
}

/// Scatter of `points` (n x 2) colored by `classes`, legend from `names`.
pub fn scatter_svg(title: &str, points: ArrayView2<f64>, classes: &[usize], names: &[String]) -> String {
    let mut svg = String::new();
    header(&mut svg, title, "PC 1", "PC 2");
    let (x0, x1) = bounds(points.column(0).iter().copied());
    let (y0, y1) = bounds(points.column(1).iter().copied());
    for (row, &c) in points.outer_iter().zip(classes) {
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.6\"/>",
            sx(row[0], x0, x1),
            sy(row[1], y0, y1),
            PALETTE[c % PALETTE.len()]
        );
    }
    let mut present: Vec<usize> = classes.to_vec();
    present.sort_unstable();
    present.dedup();
    for (i, c) in present.iter().enumerate() {
        let y = MARGIN + 12.0 + 14.0 * i as f64;
        let name = names.get(*c).cloned().unwrap_or_else(|| c.to_string());
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{}\"/><text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            W - MARGIN - 70.0,
            PALETTE[c % PALETTE.len()],
            W - MARGIN - 62.0,
            y + 4.0,
            escape(&name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// One named series of `(mean, stdev)` per x value.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line plot with one-stdev error bars.
pub fn line_svg(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], series: &[Series]) -> String {
    let mut svg = String::new();
    header(&mut svg, title, xlabel, ylabel);
    let (x0, x1) = bounds(xs.iter().copied());
    let (y0, y1) = bounds(
        series
            .iter()
            .flat_map(|s| s.points.iter().flat_map(|&(m, d)| [m - d, m + d])),
    );
    for &x in xs {
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{x}</text>",
            sx(x, x0, x1),
            H - MARGIN + 14.0
        );
    }
    for t in 0..=4 {
        let v = y0 + (y1 - y0) * t as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.3}</text>",
            MARGIN - 4.0,
            sy(v, y0, y1) + 4.0
        );
    }
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = xs
            .iter()
            .zip(&s.points)
            .map(|(&x, &(m, _))| format!("{:.2},{:.2}", sx(x, x0, x1), sy(m, y0, y1)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path.join(" ")
        );
        for (&x, &(m, d)) in xs.iter().zip(&s.points) {
            let _ = writeln!(
                svg,
                "<line x1=\"{0:.2}\" x2=\"{0:.2}\" y1=\"{1:.2}\" y2=\"{2:.2}\" stroke=\"{color}\"/><circle cx=\"{0:.2}\" cy=\"{3:.2}\" r=\"3\" fill=\"{color}\"/>",
                sx(x, x0, x1),
                sy(m - d, y0, y1),
                sy(m + d, y0, y1),
                sy(m, y0, y1)
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{color}\">{}</text>",
            MARGIN + 8.0,
            MARGIN + 14.0 + 14.0 * k as f64,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Training accuracy of a linear softmax classifier fit to 2-D points.
pub fn projection_probe_accuracy(points: ArrayView2<f64>, truth: &[usize], seed: u64) -> Result<f64> {
    let k = truth.iter().copied().max().map_or(1, |m| m + 1).max(2);
    let view = TrainView {
        x: points.to_owned(),
        y: truth.to_vec(),
        num_classes: k,
    };
    let cfg = TrainConfig {
        learning_rate: 0.05,
        hidden: Vec::new(),
        max_steps: 2000,
        ..TrainConfig::default()
    };
    let mut rng = rng_from_seed(derive_seed(seed, &[0]));
    let init = cfg.init_model(2, k, &mut rng)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let out = train_erm(init, &view, &view, &cfg, &[], &mut rng)?;
    Ok(average_accuracy(&out.params, &view)?)
}

/// Encoder outputs of a task's first training environment, projected to
/// two principal components, with hidden unstable values and their names.
pub fn encoder_projection(f_z: &ModelParams, target: &str, seed: u64) -> Result<(Array2<f64>, Vec<usize>, Vec<String>)> {
    let bundle = task_bundle(target, seed)?;
    let env = bundle.env(Role::Train1)?;
    let n = env.len().min(MAX_POINTS);
    let idx: Vec<usize> = (0..n).collect();
    let view = env.view().select(&idx);
    let z = encode(f_z, &view)?;
    let p = pca2(z.view())?;
    let truth = env.z_hidden()[..n].to_vec();
    Ok((p.projections, truth, bundle.metadata.unstable_names.clone()))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Plots for a finished run: one projection per transfer at the first seed,
/// and the cluster-count curve when several counts were run.
pub fn emit_plots(
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    encoders: &BTreeMap<(String, u64), ModelParams>,
) -> Result<Vec<(String, String)>> {
    if records.is_empty() {
        log::warn!("no records, no plots");
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let seed0 = cfg.seeds[0];
    for t in &cfg.transfers {
        let Some(f_z) = encoders.get(&(t.source_key(), seed0)) else {
            continue;
        };
        let (proj, truth, names) = encoder_projection(f_z, &t.target, seed0)?;
        let title = format!("encoder PCA, {t}, seed {seed0}");
        out.push((
            format!("fz_pca__{}__{}.svg", t.source_key(), t.target),
            scatter_svg(&title, proj.view(), &truth, &names),
        ));
    }
    if cfg.n_c.len() > 1 {
        let mut xs: Vec<usize> = cfg.n_c.clone();
        xs.sort_unstable();
        xs.dedup();
        let mut by_nc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in records.iter().map(|r| &r.record).filter(|r| r.method == Method::Tofu) {
            if let (Some(n), Some(a)) = (r.n_c, r.test_accuracy) {
                by_nc.entry(n).or_default().push(a);
            }
        }
        let points: Vec<(f64, f64)> = xs.iter().map(|n| by_nc.get(n).map_or((f64::NAN, 0.0), |v| mean_std(v))).collect();
        if points.iter().all(|p| p.0.is_finite()) {
            let xsf: Vec<f64> = xs.iter().map(|&n| n as f64).collect();
            out.push((
                "nc_ablation.svg".into(),
                line_svg(
                    "TOFU test accuracy vs clusters per label",
                    "clusters per label",
                    "test accuracy",
                    &xsf,
                    &[Series {
                        name: "tofu (mean, 1 sd)".into(),
                        points,
                    }],
                ),
            ));
        }
    }
    Ok(out)
}

pub(crate) fn run_plots(cfg: &ExperimentConfig, sel: &Selection, out: &RunOutput) -> Result<Vec<(String, String)>> {
    let encoders = selected_encoders(cfg, sel)
        .into_iter()
        .filter_map(|(s, seed, cell)| out.encoders.get(&(s.clone(), seed, cell)).map(|p| ((s, seed), p.clone())))
        .collect();
    emit_plots(cfg, &sel.records, &encoders)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn empty_records_give_no_plots() {
        let cfg = ExperimentConfig::defaults(crate::config::Suite::BinaryPairwise);
        assert!(emit_plots(&cfg, &[], &BTreeMap::new()).unwrap().is_empty());
    }

    #[test]
    fn scatter_has_one_circle_per_point_plus_legend() {
        let p = array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]];
        let svg = scatter_svg("t", p.view(), &[0, 1, 1], &["a".into(), "b".into()]);
        assert_eq!(svg.matches("<circle").count(), 3 + 2);
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn probe_separates_separable_points() {
        let p = array![[-2.0, 0.1], [-1.5, -0.3], [-1.0, 0.2], [1.0, 0.0], [1.4, 0.3], [2.0, -0.2]];
        let acc = projection_probe_accuracy(p.view(), &[0, 0, 0, 1, 1, 1], 0).unwrap();
        assert_eq!(acc, 1.0);
    }
}
