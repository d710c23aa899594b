//! Experiment configuration: a strict TOML schema resolved against
//! per-suite defaults.
//!
//! Every key is optional except `suite`. Unknown keys are rejected and all
//! problems in a file are reported together.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tofu_core::source::TripletConfig;
use tofu_core::synthgen::{BINARY_TASKS, COLORED_TASKS, MULTISOURCE_TASKS};
use tofu_core::train::TrainConfig;

use crate::error::{read_file, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    BinaryPairwise,
    MulticlassColored,
    Multisource,
    Theory,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BinaryPairwise => "binary_pairwise",
            Self::MulticlassColored => "multiclass_colored",
            Self::Multisource => "multisource",
            Self::Theory => "theory",
        }
    }

    fn tasks(self) -> &'static [&'static str] {
        match self {
            Self::BinaryPairwise => &BINARY_TASKS,
            Self::MulticlassColored => &COLORED_TASKS,
            Self::Multisource => &MULTISOURCE_TASKS,
            Self::Theory => &[],
        }
    }

    /// Every ordered pair for the single-source suites; for the
    /// multi-source suite the triple plus each single source.
    pub fn default_transfers(self) -> Vec<Transfer> {
        match self {
            Self::BinaryPairwise | Self::MulticlassColored => {
                let t = self.tasks();
                let mut out = Vec::new();
                for s in t {
                    for g in t {
                        if s != g {
                            out.push(Transfer::new(&[s], g));
                        }
                    }
                }
                out
            }
            Self::Multisource => vec![
                Transfer::new(&["ms_s1", "ms_s2", "ms_s3"], "ms_t"),
                Transfer::new(&["ms_s1"], "ms_t"),
                Transfer::new(&["ms_s2"], "ms_t"),
                Transfer::new(&["ms_s3"], "ms_t"),
            ],
            Self::Theory => Vec::new(),
        }
    }

    pub fn default_methods(self) -> Vec<Method> {
        match self {
            Self::Multisource => vec![Method::Erm, Method::Tofu, Method::Oracle],
            Self::Theory => Vec::new(),
            _ => Method::ALL.to_vec(),
        }
    }

    pub fn default_grid(self) -> Grid {
        match self {
            Self::BinaryPairwise => Grid {
                learning_rate: vec![1e-3, 1e-4],
                dropout: vec![0.1, 0.3, 0.5],
                weight_decay: vec![0.0],
            },
            _ => Grid {
                learning_rate: vec![1e-3, 1e-4],
                dropout: vec![0.0],
                weight_decay: vec![1e-1, 1e-2, 1e-3],
            },
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Self::BinaryPairwise, Self::MulticlassColored, Self::Multisource, Self::Theory]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown suite {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Reuse,
    Finetune,
    Multitask,
    Tofu,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [Self::Erm, Self::Reuse, Self::Finetune, Self::Multitask, Self::Tofu, Self::Oracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Erm => "erm",
            Self::Reuse => "reuse",
            Self::Finetune => "finetune",
            Self::Multitask => "multitask",
            Self::Tofu => "tofu",
            Self::Oracle => "oracle",
        }
    }

    /// Baselines built on one source model; they accept a single source task.
    pub fn single_source_only(self) -> bool {
        matches!(self, Self::Reuse | Self::Finetune | Self::Multitask)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transfer {
    pub sources: Vec<String>,
    pub target: String,
}

impl Transfer {
    pub fn new(sources: &[&str], target: &str) -> Self {
        Self {
            sources: sources.iter().map(|s| s.to_string()).collect(),
            target: target.to_string(),
        }
    }

    /// `a+b` for the source set.
    pub fn source_key(&self) -> String {
        self.sources.join("+")
    }
}

impl fmt::Display for Transfer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source_key(), self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
    pub weight_decay: Vec<f64>,
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub weight_decay: f64,
}

impl Grid {
    /// Cells in learning-rate-major order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &dropout in &self.dropout {
                for &weight_decay in &self.weight_decay {
                    out.push(Cell {
                        index: out.len(),
                        learning_rate,
                        dropout,
                        weight_decay,
                    });
                }
            }
        }
        out
    }
}

/// Shared training-loop settings for every classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub max_steps: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            eval_every: d.eval_every,
            patience: d.patience,
            max_steps: d.max_steps,
            hidden: d.hidden,
        }
    }
}

impl TrainSettings {
    pub fn for_cell(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            learning_rate: cell.learning_rate,
            dropout: cell.dropout,
            weight_decay: cell.weight_decay,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            patience: self.patience,
            max_steps: self.max_steps,
            hidden: self.hidden.clone(),
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub suite: Suite,
    pub transfers: Vec<Transfer>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub grid: Grid,
    pub n_c: Vec<usize>,
    pub train: TrainSettings,
    pub triplet: TripletConfig,
    pub theory_trials: usize,
    pub output_dir: String,
}

impl ExperimentConfig {
    /// Defaults for `suite` with nothing overridden.
    pub fn defaults(suite: Suite) -> Self {
        Self {
            suite,
            transfers: suite.default_transfers(),
            methods: suite.default_methods(),
            seeds: (0..5).collect(),
            grid: suite.default_grid(),
            n_c: vec![2],
            train: TrainSettings::default(),
            triplet: TripletConfig::default(),
            theory_trials: 2000,
            output_dir: "out".into(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.grid.cells()
    }

    /// All semantic problems, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.suite != Suite::Theory {
            if self.methods.is_empty() {
                out.push("methods must be nonempty".into());
            }
            if self.transfers.is_empty() {
                out.push("transfers must be nonempty".into());
            }
        }
        if self.seeds.is_empty() {
            out.push("seeds must be nonempty".into());
        }
        let known = self.suite.tasks();
        for t in &self.transfers {
            for id in t.sources.iter().chain(std::iter::once(&t.target)) {
                if !known.contains(&id.as_str()) {
                    out.push(format!("task {id:?} is not part of suite {}", self.suite.as_str()));
                }
            }
            if t.sources.is_empty() {
                out.push(format!("transfer to {} has no sources", t.target));
            }
            if t.sources.contains(&t.target) {
                out.push(format!("transfer {t} uses its target as a source"));
            }
            if t.sources.len() > 1 {
                for m in self.methods.iter().filter(|m| m.single_source_only()) {
                    out.push(format!("method {m} takes a single source task, transfer {t} has several"));
                }
            }
        }
        for (name, v) in [
            ("grid.learning_rate", &self.grid.learning_rate),
            ("grid.dropout", &self.grid.dropout),
            ("grid.weight_decay", &self.grid.weight_decay),
        ] {
            if v.is_empty() {
                out.push(format!("{name} must be nonempty"));
            }
        }
        if self.grid.learning_rate.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            out.push("grid.learning_rate entries must be positive".into());
        }
        if self.grid.dropout.iter().any(|&x| !(0.0..1.0).contains(&x)) {
            out.push("grid.dropout entries must lie in [0, 1)".into());
        }
        if self.grid.weight_decay.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            out.push("grid.weight_decay entries must be non-negative".into());
        }
        if self.n_c.is_empty() || self.n_c.contains(&0) {
            out.push("n_c must be a nonempty list of positive integers".into());
        }
        let probe = Cell {
            index: 0,
            learning_rate: 1e-3,
            dropout: 0.0,
            weight_decay: 0.0,
        };
        if let Err(e) = self.train.for_cell(&probe).validate() {
            out.push(format!("train: {e}"));
        }
        if let Err(e) = self.triplet.validate() {
            out.push(format!("triplet: {e}"));
        }
        if self.suite == Suite::Theory && self.theory_trials == 0 {
            out.push("theory_trials must be positive".into());
        }
        out
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text.parse().map_err(|e: toml::de::Error| CliError::InvalidConfig(vec![e.to_string()]))?;
        let mut value = value;
        let mut problems = Vec::new();
        strip_unknown_keys(&mut value, SCHEMA, "", &mut problems);
        // keep going past unknown keys so every problem is listed at once
        match value.try_into::<RawConfig>() {
            Err(e) => problems.push(e.to_string()),
            Ok(raw) => match raw.resolve() {
                Err(CliError::InvalidConfig(p)) => problems.extend(p),
                Err(e) => return Err(e),
                Ok(cfg) => {
                    problems.extend(cfg.problems());
                    if problems.is_empty() {
                        return Ok(cfg);
                    }
                }
            },
        }
        Err(CliError::InvalidConfig(problems))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_file(path)?)
    }

    /// The resolved config as TOML, suitable for reloading.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

struct Key {
    name: &'static str,
    children: Option<&'static [Key]>,
}

const fn leaf(name: &'static str) -> Key {
    Key { name, children: None }
}

const GRID_KEYS: &[Key] = &[leaf("learning_rate"), leaf("dropout"), leaf("weight_decay")];
const TRAIN_KEYS: &[Key] = &[
    leaf("batch_size"),
    leaf("eval_every"),
    leaf("patience"),
    leaf("max_steps"),
    leaf("hidden"),
];
const TRIPLET_KEYS: &[Key] = &[
    leaf("margin"),
    leaf("batch_size"),
    leaf("max_steps"),
    leaf("eval_every"),
    leaf("patience"),
    leaf("learning_rate"),
    leaf("weight_decay"),
    leaf("hidden"),
    leaf("output_dim"),
    leaf("eval_triples"),
];
const TRANSFER_KEYS: &[Key] = &[leaf("sources"), leaf("target")];
const SCHEMA: &[Key] = &[
    leaf("suite"),
    Key {
        name: "transfers",
        children: Some(TRANSFER_KEYS),
    },
    leaf("methods"),
    leaf("seeds"),
    Key {
        name: "grid",
        children: Some(GRID_KEYS),
    },
    leaf("n_c"),
    Key {
        name: "train",
        children: Some(TRAIN_KEYS),
    },
    Key {
        name: "triplet",
        children: Some(TRIPLET_KEYS),
    },
    leaf("theory_trials"),
    leaf("output_dir"),
];

/// Reports and removes every key not in `schema`.
fn strip_unknown_keys(value: &mut toml::Value, schema: &[Key], path: &str, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            t.retain(|k, _| {
                let known = schema.iter().any(|s| s.name == k);
                if !known {
                    let full = if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
                    out.push(format!("unknown key {full:?}"));
                }
                known
            });
            for (k, v) in t.iter_mut() {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                if let Some(Key {
                    children: Some(c), ..
                }) = schema.iter().find(|s| s.name == k)
                {
                    strip_unknown_keys(v, c, &full, out);
                }
            }
        }
        toml::Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                strip_unknown_keys(v, schema, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

#[derive(Debug, Deserialize)]
struct RawGrid {
    learning_rate: Option<Vec<f64>>,
    dropout: Option<Vec<f64>>,
    weight_decay: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct RawTrain {
    batch_size: Option<usize>,
    eval_every: Option<usize>,
    patience: Option<usize>,
    max_steps: Option<usize>,
    hidden: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
struct RawTriplet {
    margin: Option<f64>,
    batch_size: Option<usize>,
    max_steps: Option<usize>,
    eval_every: Option<usize>,
    patience: Option<usize>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    hidden: Option<Vec<usize>>,
    output_dim: Option<usize>,
    eval_triples: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RawConfig {
    suite: Suite,
    transfers: Option<Vec<Transfer>>,
    methods: Option<Vec<Method>>,
    seeds: Option<Vec<u64>>,
    grid: Option<RawGrid>,
    n_c: Option<Vec<usize>>,
    train: Option<RawTrain>,
    triplet: Option<RawTriplet>,
    theory_trials: Option<usize>,
    output_dir: Option<String>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $(if let Some(v) = $src.$f { $dst.$f = v; })+
    };
}

impl RawConfig {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::defaults(self.suite);
        overlay!(c, self, transfers, methods, seeds, n_c, theory_trials, output_dir);
        if let Some(g) = self.grid {
            overlay!(c.grid, g, learning_rate, dropout, weight_decay);
        }
        if let Some(t) = self.train {
            overlay!(c.train, t, batch_size, eval_every, patience, max_steps, hidden);
        }
        if let Some(t) = self.triplet {
            overlay!(
                c.triplet,
                t,
                margin,
                batch_size,
                max_steps,
                eval_every,
                patience,
                learning_rate,
                weight_decay,
                hidden,
                output_dim,
                eval_triples
            );
        }
        let mut seen = std::collections::BTreeSet::new();
        c.methods.retain(|m| seen.insert(*m));
        c.methods.sort();
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let c = ExperimentConfig::from_toml_str("suite = \"binary_pairwise\"").unwrap();
        assert_eq!(c.n_c, vec![2]);
        assert_eq!(c.triplet.margin, 0.3);
        assert_eq!(c.train.batch_size, 50);
        assert_eq!(c.triplet.batch_size, 50);
        assert_eq!(c.seeds.len(), 5);
        assert_eq!(c.transfers.len(), 6);
        assert_eq!(c.cells().len(), 6);
    }

    #[test]
    fn unknown_keys_are_all_named() {
        let err = ExperimentConfig::from_toml_str("suite = \"binary_pairwise\"\nlearning_rte = 1\n[grid]\nlr = [1]\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("\"learning_rte\""), "{msg}");
        assert!(msg.contains("\"grid.lr\""), "{msg}");
    }

    #[test]
    fn empty_seeds_rejected() {
        let err = ExperimentConfig::from_toml_str("suite = \"binary_pairwise\"\nseeds = []\n").unwrap_err();
        assert!(err.to_string().contains("seeds must be nonempty"));
    }

    #[test]
    fn foreign_task_rejected() {
        let text = "suite = \"binary_pairwise\"\n[[transfers]]\nsources = [\"colored_odd\"]\ntarget = \"token_a\"\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("colored_odd"));
    }

    #[test]
    fn multi_source_baselines_rejected() {
        let text = "suite = \"multisource\"\nmethods = [\"reuse\", \"tofu\"]\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("reuse"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::defaults(Suite::BinaryPairwise);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![1];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn toml_round_trip() {
        let a = ExperimentConfig::defaults(Suite::Multisource);
        let b = ExperimentConfig::from_toml_str(&a.to_toml()).unwrap();
        assert_eq!(a, b);
    }
}
