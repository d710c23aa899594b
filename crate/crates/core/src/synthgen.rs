//! Deterministic generators for environments with a known stable feature
//! (class prototype plus Gaussian noise), an unstable one-hot feature whose
//! agreement with the observed label is `eta`, and optional label noise.
//!
//! Every example is laid out as `x = stable block ++ one-hot(z)`.
//! Training code only ever sees a [`TrainView`] (inputs and observed labels);
//! the hidden stable class and unstable value are reachable through
//! [`Environment::z_hidden`] / [`Environment::c_hidden`], which are meant for
//! evaluation and the oracle baseline.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng_from_seed};
use crate::theory::DiscreteJoint;

/// Scale of the orthogonal class prototypes in the binary token tasks.
pub const BINARY_PROTOTYPE_SCALE: f64 = 0.4;
/// Scale of the class prototypes in the colored (digit) tasks.
pub const COLORED_PROTOTYPE_SCALE: f64 = 1.25;
pub const STABLE_DIM: usize = 20;
pub const STABLE_NOISE_SIGMA: f64 = 0.5;

/// One generated data point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
    pub z_hidden: usize,
    pub c_hidden: usize,
}

/// Parameters of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub task_id: String,
    pub num_classes: usize,
    pub num_unstable_values: usize,
    /// Probability that the unstable value is the label's own palette entry.
    pub eta: f64,
    /// Probability that the observed label equals the stable class.
    pub label_noise_keep: f64,
    pub n: usize,
    pub stable_dim: usize,
    pub unstable_dim: usize,
    pub stable_noise_sigma: f64,
    pub seed: u64,
    pub prototype_scale: f64,
    /// Basis direction of each class prototype inside the stable block.
    pub prototype_dims: Vec<usize>,
    /// Unstable value associated with each label; other values are drawn
    /// uniformly from the rest of the palette.
    pub palette: Vec<usize>,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        let m = self.num_unstable_values;
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.task_id)));
        if k < 2 {
            return fail(format!("num_classes {k} < 2"));
        }
        if m < 2 {
            return fail(format!("num_unstable_values {m} < 2"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return fail(format!("eta {} outside [0,1]", self.eta));
        }
        if !(self.label_noise_keep > 0.0 && self.label_noise_keep <= 1.0) {
            return fail(format!("label_noise_keep {} outside (0,1]", self.label_noise_keep));
        }
        if self.unstable_dim != m {
            return fail(format!("unstable_dim {} != num_unstable_values {m}", self.unstable_dim));
        }
        if !(self.stable_noise_sigma >= 0.0) {
            return fail("negative stable noise".into());
        }
        if self.palette.len() != k {
            return fail(format!("palette has {} entries for {k} classes", self.palette.len()));
        }
        let mut seen = vec![false; m];
        for &p in &self.palette {
            if p >= m || seen[p] {
                return fail(format!("palette {:?} invalid", self.palette));
            }
            seen[p] = true;
        }
        if self.prototype_dims.len() != k || self.prototype_dims.iter().any(|&d| d >= self.stable_dim) {
            return fail(format!("prototype dims {:?} invalid", self.prototype_dims));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.stable_dim + self.unstable_dim
    }

    fn with(&self, eta: f64, n: usize, seed: u64) -> Self {
        Self {
            eta,
            n,
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train1,
    Train2,
    Val,
    Test,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Train1, Role::Train2, Role::Val, Role::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train1 => "train1",
            Role::Train2 => "train2",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown role {s:?}")))
    }
}

/// Inputs and observed labels only: what model-training code receives.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl TrainView {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` as a new view.
    pub fn select(&self, idx: &[usize]) -> TrainView {
        TrainView {
            x: self.x.select(ndarray::Axis(0), idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of every example carrying label `y`.
    pub fn indices_of_label(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] == y).collect()
    }

    /// Stacks several views (same input width and class count).
    pub fn concat(views: &[&TrainView]) -> Result<TrainView> {
        let first = views
            .first()
            .ok_or_else(|| Error::Config("concat of no views".into()))?;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for v in views {
            if v.input_dim() != first.input_dim() || v.num_classes != first.num_classes {
                return Err(crate::error::shape_err("concat views", first.input_dim(), v.input_dim()));
            }
            rows.push(v.x.view());
            y.extend_from_slice(&v.y);
        }
        let x = ndarray::concatenate(ndarray::Axis(0), &rows)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(TrainView {
            x,
            y,
            num_classes: first.num_classes,
        })
    }
}

/// A generated environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub spec: EnvironmentSpec,
    pub role: Role,
    pub examples: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    x: std::borrow::Cow<'a, [f64]>,
    y: usize,
    z: usize,
    c: usize,
    role: Role,
}

impl Environment {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Training-facing view: inputs and observed labels.
    pub fn view(&self) -> TrainView {
        let d = self.spec.input_dim();
        let mut x = Array2::zeros((self.examples.len(), d));
        for (mut row, e) in x.rows_mut().into_iter().zip(&self.examples) {
            row.assign(&ndarray::ArrayView1::from(&e.x[..]));
        }
        TrainView {
            x,
            y: self.examples.iter().map(|e| e.y).collect(),
            num_classes: self.spec.num_classes,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.y).collect()
    }

    /// Hidden unstable values; evaluation and oracle use only.
    pub fn z_hidden(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.z_hidden).collect()
    }

    /// Hidden stable classes; evaluation use only.
    pub fn c_hidden(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.c_hidden).collect()
    }

    /// Newline-delimited JSON, one `{x, y, z, c, role}` record per example.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let rec = Record {
                x: std::borrow::Cow::Borrowed(&e.x),
                y: e.y,
                z: e.z_hidden,
                c: e.c_hidden,
                role: self.role,
            };
            out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(spec: EnvironmentSpec, role: Role, text: &str) -> Result<Self> {
        let mut examples = Vec::new();
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            if rec.role != role {
                return Err(Error::Config(format!(
                    "line {}: role {:?} in a {:?} file",
                    lineno + 1,
                    rec.role,
                    role
                )));
            }
            examples.push(Example {
                x: rec.x.into_owned(),
                y: rec.y,
                z_hidden: rec.z,
                c_hidden: rec.c,
            });
        }
        Ok(Self {
            spec,
            role,
            examples,
        })
    }
}

/// Draws `n` examples from `spec` with role `role`.
pub fn generate(spec: &EnvironmentSpec, role: Role) -> Result<Environment> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let k = spec.num_classes;
    let m = spec.num_unstable_values;
    let mut examples = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let c = rng.gen_range(0..k);
        let y = if rng.gen::<f64>() < spec.label_noise_keep {
            c
        } else {
            // uniform over the other labels
            let r = rng.gen_range(0..k - 1);
            if r >= c {
                r + 1
            } else {
                r
            }
        };
        let own = spec.palette[y];
        let z = if rng.gen::<f64>() < spec.eta {
            own
        } else {
            let others: Vec<usize> = spec.palette.iter().copied().filter(|&p| p != own).collect();
            others[rng.gen_range(0..others.len())]
        };
        let mut x = Vec::with_capacity(spec.input_dim());
        for d in 0..spec.stable_dim {
            let proto = if spec.prototype_dims[c] == d {
                spec.prototype_scale
            } else {
                0.0
            };
            let noise: f64 = rng.sample(StandardNormal);
            x.push(proto + spec.stable_noise_sigma * noise);
        }
        x.extend((0..m).map(|v| if v == z { 1.0 } else { 0.0 }));
        examples.push(Example {
            x,
            y,
            z_hidden: z,
            c_hidden: c,
        });
    }
    Ok(Environment {
        spec: spec.clone(),
        role,
        examples,
    })
}

/// Binary task with an appended pseudo token: no label noise, two unstable
/// values.
pub fn gen_binary_token_task(spec: &EnvironmentSpec, role: Role) -> Result<Environment> {
    if spec.num_classes != 2 || spec.num_unstable_values != 2 {
        return Err(Error::Config("binary token task needs K = M = 2".into()));
    }
    if spec.label_noise_keep != 1.0 {
        return Err(Error::Config("binary token task has no label noise".into()));
    }
    generate(spec, role)
}

/// Multiclass colored task: noisy labels, one color per label.
pub fn gen_multiclass_colored_task(spec: &EnvironmentSpec, role: Role) -> Result<Environment> {
    generate(spec, role)
}

/// Bundle of environments for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBundle {
    pub task_id: String,
    pub environments: Vec<Environment>,
    pub metadata: BundleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub generator: String,
    pub seed: u64,
    /// Display names of the unstable values (legend for plots).
    pub unstable_names: Vec<String>,
}

impl TaskBundle {
    pub fn env(&self, role: Role) -> Result<&Environment> {
        self.environments
            .iter()
            .find(|e| e.role == role)
            .ok_or_else(|| Error::Config(format!("task {} has no {} environment", self.task_id, role.as_str())))
    }

    pub fn has(&self, role: Role) -> bool {
        self.environments.iter().any(|e| e.role == role)
    }

    pub fn num_classes(&self) -> usize {
        self.environments[0].spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.environments[0].spec.input_dim()
    }
}

/// Stable 64-bit hash of a task id (FNV-1a).
pub fn task_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn bundle(
    base: EnvironmentSpec,
    etas: &[(Role, f64, usize)],
    generator: &str,
    seed: u64,
    unstable_names: Vec<String>,
) -> Result<TaskBundle> {
    let mut environments = Vec::new();
    for &(role, eta, n) in etas {
        let env_seed = derive_seed(seed, &[task_hash(&base.task_id), role.index()]);
        environments.push(generate(&base.with(eta, n, env_seed), role)?);
    }
    Ok(TaskBundle {
        task_id: base.task_id.clone(),
        environments,
        metadata: BundleMeta {
            generator: generator.into(),
            seed,
            unstable_names,
        },
    })
}

/// Ids of the binary token tasks.
pub const BINARY_TASKS: [&str; 3] = ["token_a", "token_b", "token_c"];
/// Ids of the five-class colored tasks.
pub const COLORED_TASKS: [&str; 2] = ["colored_odd", "colored_even"];
/// Ids of the multi-source suite (three binary sources, one 3-way target).
pub const MULTISOURCE_TASKS: [&str; 4] = ["ms_s1", "ms_s2", "ms_s3", "ms_t"];

/// Binary token task: train1 eta 0.8, train2 0.9, val as train1, test 0.1;
/// 5000 examples each. Each task uses its own pair of prototype directions.
pub fn binary_bundle(task_id: &str, seed: u64) -> Result<TaskBundle> {
    let idx = BINARY_TASKS
        .iter()
        .position(|t| *t == task_id)
        .ok_or_else(|| Error::Config(format!("unknown binary task {task_id:?}")))?;
    let base = EnvironmentSpec {
        task_id: task_id.into(),
        num_classes: 2,
        num_unstable_values: 2,
        eta: 0.8,
        label_noise_keep: 1.0,
        n: 5000,
        stable_dim: STABLE_DIM,
        unstable_dim: 2,
        stable_noise_sigma: STABLE_NOISE_SIGMA,
        seed,
        prototype_scale: BINARY_PROTOTYPE_SCALE,
        prototype_dims: vec![2 * idx, 2 * idx + 1],
        palette: vec![0, 1],
    };
    let envs = [
        (Role::Train1, 0.8, 5000),
        (Role::Train2, 0.9, 5000),
        (Role::Val, 0.8, 5000),
        (Role::Test, 0.1, 5000),
    ];
    bundle(base, &envs, "binary_token", seed, vec!["token_neg".into(), "token_pos".into()])
}

/// Five-class colored task over odd or even digits; 75% label keep rate.
pub fn colored_bundle(task_id: &str, seed: u64) -> Result<TaskBundle> {
    let digits: Vec<usize> = match task_id {
        "colored_odd" => vec![1, 3, 5, 7, 9],
        "colored_even" => vec![0, 2, 4, 6, 8],
        _ => return Err(Error::Config(format!("unknown colored task {task_id:?}"))),
    };
    let base = EnvironmentSpec {
        task_id: task_id.into(),
        num_classes: 5,
        num_unstable_values: 5,
        eta: 0.8,
        label_noise_keep: 0.75,
        n: 5000,
        stable_dim: STABLE_DIM,
        unstable_dim: 5,
        stable_noise_sigma: STABLE_NOISE_SIGMA,
        seed,
        prototype_scale: COLORED_PROTOTYPE_SCALE,
        prototype_dims: digits,
        palette: (0..5).collect(),
    };
    let envs = [
        (Role::Train1, 0.8, 5000),
        (Role::Train2, 0.9, 5000),
        (Role::Val, 0.8, 1250),
        (Role::Test, 0.1, 1250),
    ];
    let names = ["color0", "color1", "color2", "color3", "color4"];
    bundle(base, &envs, "multiclass_colored", seed, names.iter().map(|s| s.to_string()).collect())
}

const RED: usize = 0;
const BLUE: usize = 1;
const GREEN: usize = 2;

/// Three binary sources (red/blue, red/green, blue/green) and a 3-way
/// target with red/blue/green and no second training environment.
pub fn gen_multisource_suite(seed: u64) -> Result<Vec<TaskBundle>> {
    let colors = vec!["red".to_string(), "blue".to_string(), "green".to_string()];
    let base = |task_id: &str, digits: Vec<usize>, palette: Vec<usize>| EnvironmentSpec {
        task_id: task_id.into(),
        num_classes: digits.len(),
        num_unstable_values: 3,
        eta: 0.9,
        label_noise_keep: 0.75,
        n: 5000,
        stable_dim: STABLE_DIM,
        unstable_dim: 3,
        stable_noise_sigma: STABLE_NOISE_SIGMA,
        seed,
        prototype_scale: COLORED_PROTOTYPE_SCALE,
        prototype_dims: digits,
        palette,
    };
    let source_envs = [
        (Role::Train1, 0.9, 5000),
        (Role::Train2, 0.8, 5000),
        (Role::Val, 0.9, 1250),
        (Role::Test, 0.1, 1250),
    ];
    let target_envs = [(Role::Train1, 0.8, 5000), (Role::Val, 0.8, 1250), (Role::Test, 0.2, 1250)];
    Ok(vec![
        bundle(base("ms_s1", vec![0, 1], vec![RED, BLUE]), &source_envs, "multisource", seed, colors.clone())?,
        bundle(base("ms_s2", vec![2, 3], vec![RED, GREEN]), &source_envs, "multisource", seed, colors.clone())?,
        bundle(base("ms_s3", vec![4, 5], vec![BLUE, GREEN]), &source_envs, "multisource", seed, colors.clone())?,
        bundle(base("ms_t", vec![6, 7, 8], vec![RED, BLUE, GREEN]), &target_envs, "multisource", seed, colors)?,
    ])
}

/// Looks up any known task by id.
pub fn task_bundle(task_id: &str, seed: u64) -> Result<TaskBundle> {
    if BINARY_TASKS.contains(&task_id) {
        binary_bundle(task_id, seed)
    } else if COLORED_TASKS.contains(&task_id) {
        colored_bundle(task_id, seed)
    } else if MULTISOURCE_TASKS.contains(&task_id) {
        gen_multisource_suite(seed)?
            .into_iter()
            .find(|b| b.task_id == task_id)
            .ok_or_else(|| Error::Config(format!("unknown task {task_id:?}")))
    } else {
        Err(Error::Config(format!("unknown task {task_id:?}")))
    }
}

/// Empirical joint frequency table over `(c_hidden, z_hidden, y)`.
pub fn environment_to_discrete(env: &Environment) -> Result<DiscreteJoint> {
    if env.is_empty() {
        return Err(Error::Undefined("empty environment".into()));
    }
    let k = env.spec.num_classes;
    let m = env.spec.num_unstable_values;
    let mut counts = vec![0usize; k * m * k];
    for e in &env.examples {
        counts[(e.c_hidden * m + e.z_hidden) * k + e.y] += 1;
    }
    let n = env.len() as f64;
    DiscreteJoint::new([k, m, k], counts.into_iter().map(|c| c as f64 / n).collect())
}
