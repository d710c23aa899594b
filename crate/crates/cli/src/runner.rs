//! Experiment execution.
//!
//! The work unit is one `(seed, grid cell)`. Inside a unit every stage is
//! computed once and shared: bundles, source phases and stable source
//! models per source task, encoders per source set, ERM and oracle fits per
//! target. Units run in parallel and are merged in submission order, so the
//! outcome does not depend on the worker count.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tofu_core::baselines::{
    erm_source_representation, oracle_groups, run_erm, run_finetune, run_multitask, run_oracle, run_reuse,
    train_stable_source, Fit, MultitaskInputs, StableSource,
};
use tofu_core::metrics::{cluster_scores, group_accuracies};
use tofu_core::numerics::{derive_seed, rng_from_seed, ModelParams};
use tofu_core::source::{learn_unstable_representation, run_source_phase, SourcePhase, SourceTask};
use tofu_core::synthgen::{task_bundle, task_hash, Environment, Role, TaskBundle, TrainView};
use tofu_core::target::{cluster_by_label, cluster_points_by_label, group_dro_train, ClusterAssignment};
use tofu_core::train::{average_accuracy, TrainConfig};

use crate::config::{Cell, ExperimentConfig, Method, Transfer};
use crate::error::Result;
use crate::persist::{cluster_file, ClusterFile};

const STAGE_SOURCE: u64 = 1;
const STAGE_FZ: u64 = 2;
const STAGE_STABLE: u64 = 3;
const STAGE_ERM: u64 = 4;
const STAGE_ORACLE: u64 = 5;
const STAGE_TOFU: u64 = 6;
const STAGE_KMEANS: u64 = 7;
const STAGE_REUSE: u64 = 8;
const STAGE_FINETUNE: u64 = 9;
const STAGE_MULTITASK: u64 = 10;
const STAGE_ERM_SOURCE: u64 = 11;
const STAGE_RANDOM_FZ: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

/// One method on one transfer, seed and grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: Method,
    pub sources: String,
    pub target: String,
    pub seed: u64,
    /// Clusters per label, TOFU only.
    pub n_c: Option<usize>,
    pub cell: Cell,
    /// `None` when the run succeeded.
    pub failure: Option<String>,
    pub val_criterion: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub worst_group_test_accuracy: Option<f64>,
    /// Test accuracy per `(label, hidden unstable value)` group, label-major.
    pub group_test_accuracies: Vec<Option<f64>>,
    pub source_test_accuracy: Option<f64>,
    pub steps: Option<usize>,
    /// Target training clusters against the hidden unstable value.
    pub clusters: Option<ClusterQuality>,
}

impl CellRecord {
    /// Identifies the record up to the grid cell.
    pub fn selection_key(&self) -> (String, String, Method, Option<usize>, u64) {
        (self.sources.clone(), self.target.clone(), self.method, self.n_c, self.seed)
    }

    pub fn file_stem(&self) -> String {
        let nc = self.n_c.map(|n| format!("__nc{n}")).unwrap_or_default();
        format!("{}__{}__{}__s{}{}", self.method, self.sources, self.target, self.seed, nc)
    }

    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Which representation a cluster-quality control clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Hidden layer of ERM trained on the pooled source environments.
    ErmSource,
    /// An untrained encoder with the f_Z architecture.
    Random,
}

impl Representation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ErmSource => "erm_source",
            Self::Random => "random",
        }
    }
}

/// Per-label clustering of the target training data in a comparison
/// representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub representation: Representation,
    pub sources: String,
    pub target: String,
    pub seed: u64,
    pub cell: Cell,
    pub failure: Option<String>,
    /// Source validation accuracy of the representation's own model.
    pub val_criterion: Option<f64>,
    pub clusters: Option<ClusterQuality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seed: u64,
    pub cell: usize,
    pub stage: String,
    pub key: String,
    pub seconds: f64,
}

/// Everything produced by a run, before selection.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<CellRecord>,
    pub controls: Vec<ControlRecord>,
    /// Trained target models by `(file stem, cell)`.
    pub models: BTreeMap<(String, usize), ModelParams>,
    /// TOFU training clusters by `(file stem, cell)`.
    pub clusters: BTreeMap<(String, usize), ClusterFile>,
    /// Encoders by `(source set, seed, cell)`.
    pub encoders: BTreeMap<(String, u64, usize), ModelParams>,
    pub timings: Vec<Timing>,
}

type Attempt<T> = std::result::Result<T, String>;

fn attempt<T>(r: tofu_core::Result<T>) -> Attempt<T> {
    r.map_err(|e| e.to_string())
}

fn quality(env: &Environment, view: &TrainView, a: &ClusterAssignment) -> tofu_core::Result<ClusterQuality> {
    let r = cluster_scores(&view.y, &a.cluster_of(view.len()), &env.z_hidden())?;
    Ok(ClusterQuality {
        homogeneity: r.homogeneity,
        completeness: r.completeness,
        v_measure: r.v_measure,
    })
}

struct TestEval {
    accuracy: f64,
    worst_group: Option<f64>,
    groups: Vec<Option<f64>>,
}

/// Accuracy on the test environment overall and per oracle group.
fn evaluate(params: &ModelParams, test: &Environment) -> tofu_core::Result<TestEval> {
    let view = test.view();
    let pred = params.predict(view.x.view())?;
    let groups = oracle_groups(test);
    let per = group_accuracies(&pred, &view.y, &groups.members);
    let worst = per.iter().flatten().copied().fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.min(a))));
    Ok(TestEval {
        accuracy: tofu_core::metrics::accuracy(&pred, &view.y)?,
        worst_group: worst,
        groups: per,
    })
}

struct Unit<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    cell: Cell,
    train: TrainConfig,
    bundles: BTreeMap<String, TaskBundle>,
    phases: BTreeMap<String, Attempt<SourcePhase>>,
    encoders: BTreeMap<String, Attempt<ModelParams>>,
    stable: BTreeMap<String, Attempt<StableSource>>,
    out: RunOutput,
}

impl<'a> Unit<'a> {
    fn timed<T>(&mut self, stage: &str, key: &str, f: impl FnOnce(&Self) -> T) -> T {
        let t = Instant::now();
        let r = f(self);
        self.out.timings.push(Timing {
            seed: self.seed,
            cell: self.cell.index,
            stage: stage.into(),
            key: key.into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        r
    }

    fn bundle(&self, id: &str) -> &TaskBundle {
        &self.bundles[id]
    }

    fn env(&self, id: &str, role: Role) -> &Environment {
        self.bundle(id).env(role).expect("generated bundles carry the roles used here")
    }

    fn phase(&mut self, task: &str) -> Attempt<&SourcePhase> {
        if !self.phases.contains_key(task) {
            let r = self.timed("source_phase", task, |u| {
                let b = u.bundle(task);
                let envs = [Role::Train1, Role::Train2]
                    .into_iter()
                    .filter(|r| b.has(*r))
                    .map(|r| (r, b.env(r).unwrap().view()))
                    .collect::<Vec<_>>();
                attempt(run_source_phase(task, &envs, &u.train, derive_seed(u.seed, &[STAGE_SOURCE, task_hash(task)])))
            });
            self.phases.insert(task.to_string(), r);
        }
        self.phases[task].as_ref().map_err(Clone::clone)
    }

    fn encoder(&mut self, t: &Transfer) -> Attempt<ModelParams> {
        let key = t.source_key();
        if !self.encoders.contains_key(&key) {
            for s in &t.sources {
                self.phase(s)?;
            }
            let r = self.timed("encoder", &key, |u| {
                let tasks: Vec<SourceTask<'_>> =
                    t.sources.iter().map(|s| u.phases[s].as_ref().unwrap().as_task()).collect();
                attempt(learn_unstable_representation(
                    &tasks,
                    &u.cfg.triplet,
                    derive_seed(u.seed, &[STAGE_FZ, task_hash(&key)]),
                ))
                .map(|fit| fit.f_z)
            });
            if let Ok(f) = &r {
                self.out.encoders.insert((key.clone(), self.seed, self.cell.index), f.clone());
            }
            self.encoders.insert(key.clone(), r);
        }
        self.encoders[&key].clone()
    }

    fn stable_source(&mut self, task: &str) -> Attempt<StableSource> {
        if !self.stable.contains_key(task) {
            let r = match self.phase(task) {
                Err(e) => Err(e),
                Ok(_) => self.timed("stable_source", task, |u| {
                    let test = u.env(task, Role::Test).view();
                    attempt(train_stable_source(
                        u.phases[task].as_ref().unwrap(),
                        &test,
                        &u.train,
                        derive_seed(u.seed, &[STAGE_STABLE, task_hash(task)]),
                    ))
                }),
            };
            self.stable.insert(task.to_string(), r);
        }
        self.stable[task].clone()
    }

    fn blank(&self, method: Method, t: &Transfer, n_c: Option<usize>) -> CellRecord {
        CellRecord {
            method,
            sources: t.source_key(),
            target: t.target.clone(),
            seed: self.seed,
            n_c,
            cell: self.cell,
            failure: None,
            val_criterion: None,
            test_accuracy: None,
            worst_group_test_accuracy: None,
            group_test_accuracies: Vec::new(),
            source_test_accuracy: None,
            steps: None,
            clusters: None,
        }
    }

    /// Fills a record from a fit, or marks it failed.
    fn push(&mut self, mut rec: CellRecord, fit: Attempt<(Fit, Option<ClusterQuality>)>) {
        let test = self.env(&rec.target, Role::Test);
        match fit.and_then(|(f, q)| attempt(evaluate(&f.params, test)).map(|e| (f, q, e))) {
            Ok((f, q, e)) => {
                rec.val_criterion = Some(f.val_criterion);
                rec.test_accuracy = Some(e.accuracy);
                rec.worst_group_test_accuracy = e.worst_group;
                rec.group_test_accuracies = e.groups;
                rec.source_test_accuracy = f.source_test_accuracy;
                rec.steps = Some(f.steps);
                rec.clusters = q;
                self.out.models.insert((rec.file_stem(), self.cell.index), f.params);
            }
            Err(msg) => {
                log::warn!("{} failed: {msg}", rec.file_stem());
                rec.failure = Some(msg);
            }
        }
        self.out.records.push(rec);
    }

    fn run_tofu(&mut self, t: &Transfer) {
        let f_z = self.encoder(t);
        let th = task_hash(&t.to_string());
        for &n_c in &self.cfg.n_c.clone() {
            let rec = self.blank(Method::Tofu, t, Some(n_c));
            let stem = rec.file_stem();
            let r = f_z.clone().and_then(|f_z| {
                self.timed("tofu", &stem, |u| {
                    let train_env = u.env(&t.target, Role::Train1);
                    let (train, val) = (train_env.view(), u.env(&t.target, Role::Val).view());
                    let ks = |k| derive_seed(u.seed, &[STAGE_KMEANS, th, n_c as u64, k]);
                    let clusters = attempt(cluster_by_label(&f_z, &train, n_c, ks(0)))?;
                    let val_groups = attempt(cluster_by_label(&f_z, &val, n_c, ks(1)))?.groups();
                    let out = attempt(group_dro_train(
                        &train,
                        &clusters.groups(),
                        &val,
                        &val_groups,
                        &u.train,
                        derive_seed(u.seed, &[STAGE_TOFU, th, n_c as u64]),
                    ))?;
                    let q = attempt(quality(train_env, &train, &clusters))?;
                    Ok((out, q, cluster_file(&clusters)))
                })
            });
            let r = r.map(|(out, q, file)| {
                self.out.clusters.insert((stem.clone(), self.cell.index), file);
                (
                    Fit {
                        params: out.params,
                        val_criterion: out.best_metric,
                        steps: out.steps,
                        source_test_accuracy: None,
                    },
                    Some(q),
                )
            });
            self.push(rec, r);
        }
    }

    fn run_target_only(&mut self, method: Method, t: &Transfer, cache: &mut BTreeMap<(Method, String), Attempt<Fit>>) {
        let key = (method, t.target.clone());
        if !cache.contains_key(&key) {
            let th = task_hash(&t.target);
            let r = self.timed(method.as_str(), &t.target, |u| {
                let train_env = u.env(&t.target, Role::Train1);
                let val_env = u.env(&t.target, Role::Val);
                match method {
                    Method::Erm => attempt(run_erm(
                        &train_env.view(),
                        &val_env.view(),
                        &u.train,
                        derive_seed(u.seed, &[STAGE_ERM, th]),
                    )),
                    Method::Oracle => {
                        attempt(run_oracle(train_env, val_env, &u.train, derive_seed(u.seed, &[STAGE_ORACLE, th])))
                    }
                    _ => unreachable!("only target-only methods are cached here"),
                }
            });
            cache.insert(key.clone(), r);
        }
        let rec = self.blank(method, t, None);
        let fit = cache[&key].clone().map(|f| (f, None));
        self.push(rec, fit);
    }

    fn run_source_baseline(&mut self, method: Method, t: &Transfer) {
        let rec = self.blank(method, t, None);
        let src = t.sources[0].clone();
        let th = task_hash(&t.to_string());
        let stem = rec.file_stem();
        let r = match method {
            Method::Reuse | Method::Finetune => self.stable_source(&src).and_then(|stable| {
                self.timed(method.as_str(), &stem, |u| {
                    let train = u.env(&t.target, Role::Train1).view();
                    let val = u.env(&t.target, Role::Val).view();
                    if method == Method::Reuse {
                        attempt(run_reuse(&stable, &train, &val, &u.train, derive_seed(u.seed, &[STAGE_REUSE, th])))
                    } else {
                        attempt(run_finetune(&stable, &train, &val, &u.train, derive_seed(u.seed, &[STAGE_FINETUNE, th])))
                    }
                })
            }),
            Method::Multitask => self.phase(&src).map(|_| ()).and_then(|_| {
                self.timed(method.as_str(), &stem, |u| {
                    let inputs = MultitaskInputs {
                        source: u.phases[&src].as_ref().unwrap(),
                        source_test: &u.env(&src, Role::Test).view(),
                        train: &u.env(&t.target, Role::Train1).view(),
                        val: &u.env(&t.target, Role::Val).view(),
                        source_objective: true,
                    };
                    attempt(run_multitask(&inputs, &u.train, derive_seed(u.seed, &[STAGE_MULTITASK, th])))
                })
            }),
            _ => unreachable!("source baselines only"),
        };
        self.push(rec, r.map(|f| (f, None)));
    }

    /// ERM-on-source and untrained-encoder clusterings of the target data.
    fn run_controls(&mut self, t: &Transfer, erm_cache: &mut BTreeMap<String, Attempt<(ModelParams, f64)>>) {
        let key = t.source_key();
        if !erm_cache.contains_key(&key) {
            let r = self.timed("erm_source", &key, |u| {
                let train: Vec<TrainView> = t
                    .sources
                    .iter()
                    .flat_map(|s| [Role::Train1, Role::Train2].map(|r| (s, r)))
                    .filter(|(s, r)| u.bundle(s).has(*r))
                    .map(|(s, r)| u.env(s, r).view())
                    .collect();
                let vals: Vec<TrainView> = t.sources.iter().map(|s| u.env(s, Role::Val).view()).collect();
                let val = attempt(TrainView::concat(&vals.iter().collect::<Vec<_>>()))?;
                let p = attempt(erm_source_representation(
                    &train.iter().collect::<Vec<_>>(),
                    &val,
                    &u.train,
                    derive_seed(u.seed, &[STAGE_ERM_SOURCE, task_hash(&key)]),
                ))?;
                let acc = attempt(average_accuracy(&p, &val))?;
                Ok((p, acc))
            });
            erm_cache.insert(key.clone(), r);
        }
        let th = task_hash(&t.to_string());
        let train_env = self.env(&t.target, Role::Train1);
        let train = train_env.view();
        let cluster_hidden = |p: &ModelParams, k: u64| -> Attempt<ClusterQuality> {
            let h = attempt(p.hidden_representation(train.x.view(), p.layers.len() - 1))?;
            let a = attempt(cluster_points_by_label(h.view(), &train.y, 2, derive_seed(self.seed, &[STAGE_KMEANS, th, k])))?;
            attempt(quality(train_env, &train, &a))
        };
        let erm = erm_cache[&key].clone().and_then(|(p, acc)| cluster_hidden(&p, 100).map(|q| (acc, q)));
        let mut controls = vec![(Representation::ErmSource, erm.clone().map(|(a, q)| (Some(a), q)))];
        if self.cell.index == 0 {
            let mut rng = rng_from_seed(derive_seed(self.seed, &[STAGE_RANDOM_FZ, th]));
            let tc = &self.cfg.triplet;
            let widths: Vec<usize> = std::iter::once(train.input_dim())
                .chain(tc.hidden.iter().copied())
                .chain(std::iter::once(tc.output_dim))
                .collect();
            let random = attempt(ModelParams::new(&widths, tofu_core::numerics::Activation::Relu, &mut rng))
                .and_then(|p| {
                    let z = attempt(p.predict_logits(train.x.view()))?;
                    let a = attempt(cluster_points_by_label(
                        z.view(),
                        &train.y,
                        2,
                        derive_seed(self.seed, &[STAGE_KMEANS, th, 101]),
                    ))?;
                    attempt(quality(train_env, &train, &a))
                });
            controls.push((Representation::Random, random.map(|q| (None, q))));
        }
        for (representation, r) in controls {
            let (val_criterion, clusters, failure) = match r {
                Ok((v, q)) => (v, Some(q), None),
                Err(e) => (None, None, Some(e)),
            };
            self.out.controls.push(ControlRecord {
                representation,
                sources: key.clone(),
                target: t.target.clone(),
                seed: self.seed,
                cell: self.cell,
                failure,
                val_criterion,
                clusters,
            });
        }
    }
}

/// Edits applied to freshly generated bundles before a unit runs.
pub type BundleHook = dyn Fn(&mut TaskBundle) + Sync;

fn run_unit(cfg: &ExperimentConfig, seed: u64, cell: Cell, hook: &BundleHook) -> Result<RunOutput> {
    let mut ids: Vec<&str> = Vec::new();
    for t in &cfg.transfers {
        for id in t.sources.iter().chain(std::iter::once(&t.target)) {
            if !ids.contains(&id.as_str()) {
                ids.push(id);
            }
        }
    }
    let mut bundles = BTreeMap::new();
    for id in ids {
        let mut b = task_bundle(id, seed)?;
        hook(&mut b);
        bundles.insert(id.to_string(), b);
    }
    let mut u = Unit {
        cfg,
        seed,
        cell,
        train: cfg.train.for_cell(&cell),
        bundles,
        phases: BTreeMap::new(),
        encoders: BTreeMap::new(),
        stable: BTreeMap::new(),
        out: RunOutput::default(),
    };
    let mut target_cache = BTreeMap::new();
    let mut erm_cache = BTreeMap::new();
    for t in &cfg.transfers {
        for &m in &cfg.methods {
            match m {
                Method::Erm | Method::Oracle => u.run_target_only(m, t, &mut target_cache),
                Method::Tofu => u.run_tofu(t),
                Method::Reuse | Method::Finetune | Method::Multitask => u.run_source_baseline(m, t),
            }
        }
        if cfg.methods.contains(&Method::Tofu) {
            u.run_controls(t, &mut erm_cache);
        }
    }
    Ok(u.out)
}

/// Runs every `(seed, cell)` unit on `jobs` worker threads.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<RunOutput> {
    run_experiment_with(cfg, jobs, &|_| {})
}

/// [`run_experiment`] with `hook` applied to every generated bundle.
pub fn run_experiment_with(cfg: &ExperimentConfig, jobs: usize, hook: &BundleHook) -> Result<RunOutput> {
    let units: Vec<(u64, Cell)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.cells().into_iter().map(move |c| (s, c)))
        .collect();
    let total = units.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let parts: Vec<Result<RunOutput>> = pool.install(|| {
        units
            .par_iter()
            .map(|&(seed, cell)| {
                let r = run_unit(cfg, seed, cell, hook);
                let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                log::info!("unit seed {seed} cell {} finished ({n}/{total})", cell.index);
                r
            })
            .collect()
    });
    let mut out = RunOutput::default();
    for p in parts {
        let p = p?;
        out.records.extend(p.records);
        out.controls.extend(p.controls);
        out.models.extend(p.models);
        out.clusters.extend(p.clusters);
        out.encoders.extend(p.encoders);
        out.timings.extend(p.timings);
    }
    out.records.sort_by(|a, b| {
        (a.selection_key(), a.cell.index)
            .partial_cmp(&(b.selection_key(), b.cell.index))
            .expect("keys are totally ordered")
    });
    out.controls.sort_by(|a, b| {
        (&a.sources, &a.target, a.representation, a.seed, a.cell.index).cmp(&(
            &b.sources,
            &b.target,
            b.representation,
            b.seed,
            b.cell.index,
        ))
    });
    Ok(out)
}

/// Index of the best record among `cells` by validation criterion; failed
/// cells lose, ties go to the lowest cell index.
pub fn select_best<'r>(cells: impl IntoIterator<Item = (&'r Cell, Option<f64>)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, v) in cells {
        if let Some(v) = v {
            if best.is_none_or(|(i, b)| v > b || (v == b && c.index < i)) {
                best = Some((c.index, v));
            }
        }
    }
    best.map(|(i, _)| i)
}
