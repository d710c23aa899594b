//! Grid selection and result files.
//!
//! `results.csv` columns, in order: config_hash, method, sources, target,
//! seed, n_c, cell, learning_rate, dropout, weight_decay, status,
//! val_criterion, test_accuracy, worst_group_test_accuracy,
//! source_test_accuracy, steps, homogeneity, completeness, v_measure,
//! group_test_accuracies. Group accuracies are `;`-separated, label-major
//! over `(label, unstable value)`, empty for an empty group. `grid.csv` has
//! the same columns for every grid cell. Wall-clock timings go to
//! `timings.csv` only, so every other file is reproducible byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Cell, ExperimentConfig, Method, Suite};
use crate::error::{write_file, CliError, Result};
use crate::persist::ModelFile;
use crate::plots;
use crate::runner::{select_best, CellRecord, ClusterQuality, ControlRecord, RunOutput};

/// A selected record: the grid cell with the best validation criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    #[serde(flatten)]
    pub record: CellRecord,
}

#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub records: Vec<RunRecord>,
    pub controls: Vec<ControlRecord>,
}

pub fn select(out: &RunOutput, config_hash: &str) -> Selection {
    let mut groups: BTreeMap<_, Vec<&CellRecord>> = BTreeMap::new();
    for r in &out.records {
        groups.entry(r.selection_key()).or_default().push(r);
    }
    let mut records = Vec::new();
    for cells in groups.values() {
        let best = select_best(cells.iter().map(|r| (&r.cell, r.val_criterion)));
        // with every cell failed, report the first failure
        let chosen = best.map_or(cells[0], |i| cells.iter().find(|r| r.cell.index == i).unwrap());
        records.push(RunRecord {
            config_hash: config_hash.to_string(),
            record: chosen.clone(),
        });
    }
    let mut cgroups: BTreeMap<_, Vec<&ControlRecord>> = BTreeMap::new();
    for c in &out.controls {
        cgroups
            .entry((c.representation, c.sources.clone(), c.target.clone(), c.seed))
            .or_default()
            .push(c);
    }
    let mut controls = Vec::new();
    for cells in cgroups.values() {
        let best = select_best(cells.iter().map(|c| (&c.cell, c.val_criterion.or(c.clusters.map(|_| 0.0)))));
        let chosen = best.map_or(cells[0], |i| cells.iter().find(|c| c.cell.index == i).unwrap());
        controls.push(chosen.clone());
    }
    Selection { records, controls }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    config_hash: String,
    method: Method,
    sources: String,
    target: String,
    seed: u64,
    n_c: Option<usize>,
    cell: usize,
    learning_rate: f64,
    dropout: f64,
    weight_decay: f64,
    status: String,
    val_criterion: Option<f64>,
    test_accuracy: Option<f64>,
    worst_group_test_accuracy: Option<f64>,
    source_test_accuracy: Option<f64>,
    steps: Option<usize>,
    homogeneity: Option<f64>,
    completeness: Option<f64>,
    v_measure: Option<f64>,
    group_test_accuracies: String,
}

impl From<&RunRecord> for CsvRow {
    fn from(r: &RunRecord) -> Self {
        let c = &r.record;
        Self {
            config_hash: r.config_hash.clone(),
            method: c.method,
            sources: c.sources.clone(),
            target: c.target.clone(),
            seed: c.seed,
            n_c: c.n_c,
            cell: c.cell.index,
            learning_rate: c.cell.learning_rate,
            dropout: c.cell.dropout,
            weight_decay: c.cell.weight_decay,
            status: c.failure.clone().map_or("ok".into(), |f| format!("failed: {f}")),
            val_criterion: c.val_criterion,
            test_accuracy: c.test_accuracy,
            worst_group_test_accuracy: c.worst_group_test_accuracy,
            source_test_accuracy: c.source_test_accuracy,
            steps: c.steps,
            homogeneity: c.clusters.map(|q| q.homogeneity),
            completeness: c.clusters.map(|q| q.completeness),
            v_measure: c.clusters.map(|q| q.v_measure),
            group_test_accuracies: c
                .group_test_accuracies
                .iter()
                .map(|a| a.map(|v| v.to_string()).unwrap_or_default())
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

impl TryFrom<CsvRow> for RunRecord {
    type Error = CliError;

    fn try_from(r: CsvRow) -> Result<Self> {
        let bad = |detail: String| CliError::Malformed {
            what: "results row".into(),
            detail,
        };
        let failure = match r.status.as_str() {
            "ok" => None,
            s => Some(s.strip_prefix("failed: ").ok_or_else(|| bad(format!("status {s:?}")))?.to_string()),
        };
        let clusters = match (r.homogeneity, r.completeness, r.v_measure) {
            (Some(homogeneity), Some(completeness), Some(v_measure)) => Some(ClusterQuality {
                homogeneity,
                completeness,
                v_measure,
            }),
            (None, None, None) => None,
            _ => return Err(bad("partial cluster scores".into())),
        };
        let group_test_accuracies = if r.group_test_accuracies.is_empty() {
            Vec::new()
        } else {
            r.group_test_accuracies
                .split(';')
                .map(|s| {
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        s.parse().map(Some).map_err(|_| bad(format!("group accuracy {s:?}")))
                    }
                })
                .collect::<Result<_>>()?
        };
        Ok(RunRecord {
            config_hash: r.config_hash,
            record: CellRecord {
                method: r.method,
                sources: r.sources,
                target: r.target,
                seed: r.seed,
                n_c: r.n_c,
                cell: Cell {
                    index: r.cell,
                    learning_rate: r.learning_rate,
                    dropout: r.dropout,
                    weight_decay: r.weight_decay,
                },
                failure,
                val_criterion: r.val_criterion,
                test_accuracy: r.test_accuracy,
                worst_group_test_accuracy: r.worst_group_test_accuracy,
                group_test_accuracies,
                source_test_accuracy: r.source_test_accuracy,
                steps: r.steps,
                clusters,
            },
        })
    }
}

pub fn records_to_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CsvRow::from(r))?;
    }
    if records.is_empty() {
        return Ok(String::new());
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize::<CsvRow>().map(|row| RunRecord::try_from(row?)).collect()
}

#[derive(Serialize)]
struct ControlRow<'a> {
    representation: &'a str,
    sources: &'a str,
    target: &'a str,
    seed: u64,
    cell: usize,
    status: String,
    val_criterion: Option<f64>,
    homogeneity: Option<f64>,
    completeness: Option<f64>,
    v_measure: Option<f64>,
}

fn controls_to_csv(controls: &[ControlRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in controls {
        w.serialize(ControlRow {
            representation: c.representation.as_str(),
            sources: &c.sources,
            target: &c.target,
            seed: c.seed,
            cell: c.cell.index,
            status: c.failure.clone().map_or("ok".into(), |f| format!("failed: {f}")),
            val_criterion: c.val_criterion,
            homogeneity: c.clusters.map(|q| q.homogeneity),
            completeness: c.clusters.map(|q| q.completeness),
            v_measure: c.clusters.map(|q| q.v_measure),
        })?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

fn timings_to_csv(out: &RunOutput) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in &out.timings {
        w.serialize(t)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    config_hash: &'a str,
    suite: Suite,
    /// SHA-256 of every reproducible output file, by relative path.
    files: BTreeMap<String, String>,
}

/// Collects files in memory, then writes them and a manifest.
pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

impl OutputDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            files: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn add(&mut self, rel: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(rel.into(), bytes.into());
    }

    /// Writes every file, then `manifest.json` listing their digests.
    pub fn finish(self, config_hash: &str, suite: Suite) -> Result<()> {
        let mut digests = BTreeMap::new();
        for (rel, bytes) in &self.files {
            write_file(&self.root.join(rel), bytes)?;
            let d: String = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
            digests.insert(rel.clone(), d);
        }
        let m = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config_hash,
            suite,
            files: digests,
        };
        write_file(&self.root.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")
    }
}

/// Writes results, grid values, controls, models, clusters and plots.
pub fn write_run(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<Selection> {
    let hash = cfg.hash();
    let sel = select(out, &hash);
    let mut d = OutputDir::new(dir);
    d.add("config.toml", cfg.to_toml());
    d.add("results.csv", records_to_csv(&sel.records)?);
    d.add("results.json", serde_json::to_string_pretty(&sel.records)? + "\n");
    let all: Vec<RunRecord> = out
        .records
        .iter()
        .map(|r| RunRecord {
            config_hash: hash.clone(),
            record: r.clone(),
        })
        .collect();
    d.add("grid.csv", records_to_csv(&all)?);
    d.add("controls.csv", controls_to_csv(&sel.controls)?);
    for r in &sel.records {
        let c = &r.record;
        let key = (c.file_stem(), c.cell.index);
        if let Some(p) = out.models.get(&key) {
            d.add(format!("models/{}.json", key.0), serde_json::to_string(&ModelFile::from_params(p))? + "\n");
        }
        if let Some(f) = out.clusters.get(&key) {
            d.add(format!("clusters/{}.json", key.0), serde_json::to_string(f)? + "\n");
        }
    }
    for (sources, seed, cell) in selected_encoders(cfg, &sel) {
        if let Some(p) = out.encoders.get(&(sources.clone(), seed, cell)) {
            d.add(
                format!("models/fz__{sources}__s{seed}.json"),
                serde_json::to_string(&ModelFile::from_params(p))? + "\n",
            );
        }
    }
    for (name, svg) in plots::run_plots(cfg, &sel, out)? {
        d.add(format!("plots/{name}"), svg);
    }
    d.finish(&hash, cfg.suite)?;
    // timings vary run to run and stay out of the manifest
    write_file(&dir.join("timings.csv"), timings_to_csv(out)?)?;
    Ok(sel)
}

/// `(source set, seed, cell)` of the encoder behind each selected TOFU
/// record at the first configured cluster count.
pub fn selected_encoders(cfg: &ExperimentConfig, sel: &Selection) -> Vec<(String, u64, usize)> {
    let n0 = cfg.n_c.first().copied();
    let mut out: Vec<_> = sel
        .records
        .iter()
        .map(|r| &r.record)
        .filter(|c| c.method == Method::Tofu && c.n_c == n0 && c.ok())
        .map(|c| (c.sources.clone(), c.seed, c.cell.index))
        .collect();
    out.sort();
    out.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    out
}
