//! Reference systems: ERM, reuse, finetune, multitask and the oracle.
//!
//! Only [`run_oracle`] takes [`Environment`]s; every other entry point
//! receives [`TrainView`]s, which carry no hidden fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, derive_seed, rng_from_seed, AdamState, Dense, ModelParams};
use crate::source::SourcePhase;
use crate::synthgen::{Environment, TrainView};
use crate::train::{
    self, erm_step, group_dro_step, holdout_split, EarlyStopping, GroupKey, Groups, TrainConfig, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Erm,
    Reuse,
    Finetune,
    Multitask,
    Oracle,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [Self::Erm, Self::Reuse, Self::Finetune, Self::Multitask, Self::Oracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Erm => "erm",
            Self::Reuse => "reuse",
            Self::Finetune => "finetune",
            Self::Multitask => "multitask",
            Self::Oracle => "oracle",
        }
    }

    pub fn needs_source(self) -> bool {
        matches!(self, Self::Reuse | Self::Finetune | Self::Multitask)
    }
}

/// A trained target model and its selection score.
#[derive(Debug, Clone)]
pub struct Fit {
    pub params: ModelParams,
    pub val_criterion: f64,
    pub steps: usize,
    pub source_test_accuracy: Option<f64>,
}

impl Fit {
    fn from_outcome(o: TrainOutcome, source_test_accuracy: Option<f64>) -> Self {
        Self {
            params: o.params,
            val_criterion: o.best_metric,
            steps: o.steps,
            source_test_accuracy,
        }
    }
}

/// Average-loss training on the target, average validation accuracy.
pub fn run_erm(train_view: &TrainView, val: &TrainView, cfg: &TrainConfig, seed: u64) -> Result<Fit> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0]));
    let init = cfg.init_model(train_view.input_dim(), train_view.num_classes, &mut rng)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    Ok(Fit::from_outcome(train::train_erm(init, train_view, val, cfg, &[], &mut rng)?, None))
}

/// The four cross-partition subsets of a source task pooled into one view.
#[derive(Debug, Clone)]
pub struct SourceSubsets {
    pub pooled: TrainView,
    pub groups: Groups,
}

impl SourceSubsets {
    /// Pools every partitioned environment; groups are `(pair, side)`.
    pub fn from_phase(phase: &SourcePhase) -> Result<Self> {
        let views: Vec<&TrainView> = phase.pairs.iter().map(|(_, v)| v).collect();
        let pooled = TrainView::concat(&views)?;
        let mut keyed = Vec::new();
        let mut offset = 0;
        for (p, (part, view)) in phase.pairs.iter().enumerate() {
            for i in part.all_correct() {
                keyed.push((offset + i, GroupKey { label: p, part: 0 }));
            }
            for i in part.all_incorrect() {
                keyed.push((offset + i, GroupKey { label: p, part: 1 }));
            }
            offset += view.len();
        }
        Ok(Self {
            pooled,
            groups: Groups::from_keys_indexed(keyed),
        })
    }

    /// Splits every subset into a training part and a 10% held-out part.
    fn split(&self, seed: u64) -> (Groups, Groups) {
        let mut rng = rng_from_seed(seed);
        let mut fit = Groups {
            keys: Vec::new(),
            members: Vec::new(),
        };
        let mut held = fit.clone();
        for (k, m) in self.groups.keys.iter().zip(&self.groups.members) {
            let (a, b) = holdout_split(m.len(), 0.1, &mut rng);
            fit.keys.push(*k);
            fit.members.push(a.iter().map(|&i| m[i]).collect());
            if !b.is_empty() {
                held.keys.push(*k);
                held.members.push(b.iter().map(|&i| m[i]).collect());
            }
        }
        if held.is_empty() {
            held = fit.clone();
        }
        (fit, held)
    }
}

/// Source model trained for the worst case over the partition subsets.
#[derive(Debug, Clone)]
pub struct StableSource {
    pub params: ModelParams,
    pub heldout_worst_subset_accuracy: f64,
    pub source_test_accuracy: f64,
}

/// Worst-subset training on the source task; selection by worst-subset
/// accuracy on a held-out tenth of every subset.
pub fn train_stable_source(phase: &SourcePhase, source_test: &TrainView, cfg: &TrainConfig, seed: u64) -> Result<StableSource> {
    let subsets = SourceSubsets::from_phase(phase)?;
    let (fit, held) = subsets.split(derive_seed(seed, &[9]));
    let mut rng = rng_from_seed(derive_seed(seed, &[0]));
    let init = cfg.init_model(subsets.pooled.input_dim(), subsets.pooled.num_classes, &mut rng)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let out = train::train_group_dro(init, &subsets.pooled, &fit, cfg, &[], &mut rng, |p| {
        train::worst_group_accuracy(p, &subsets.pooled, &held)
    })?;
    Ok(StableSource {
        source_test_accuracy: train::average_accuracy(&out.params, source_test)?,
        heldout_worst_subset_accuracy: out.best_metric,
        params: out.params,
    })
}

/// Source model with its output layer replaced by a fresh one sized for the
/// target.
fn transplant(source: &ModelParams, target: &TrainView, cfg: &TrainConfig, seed: u64) -> Result<ModelParams> {
    if source.input_dim() != target.input_dim() {
        return Err(Error::Config(format!(
            "extractor expects {} inputs, target has {}",
            source.input_dim(),
            target.input_dim()
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[0]));
    let mut p = source.clone().with_regularization(cfg.dropout, cfg.weight_decay);
    let last = p.layers.len() - 1;
    let width = p.layers[last].input_dim();
    p.layers[last] = Dense::glorot(width, target.num_classes, &mut rng);
    Ok(p)
}

/// Indices of every layer but the output layer.
pub fn extractor_layers(p: &ModelParams) -> std::ops::Range<usize> {
    0..p.layers.len() - 1
}

/// Hash of the extractor layers.
pub fn extractor_hash(p: &ModelParams) -> u64 {
    train::layers_hash(p, extractor_layers(p))
}

/// Frozen source extractor with a new linear head trained on the target.
pub fn run_reuse(stable: &StableSource, train_view: &TrainView, val: &TrainView, cfg: &TrainConfig, seed: u64) -> Result<Fit> {
    let init = transplant(&stable.params, train_view, cfg, seed)?;
    let frozen: Vec<usize> = extractor_layers(&init).collect();
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let out = train::train_erm(init, train_view, val, cfg, &frozen, &mut rng)?;
    Ok(Fit::from_outcome(out, Some(stable.source_test_accuracy)))
}

/// Source extractor with a new head, everything trained on the target.
pub fn run_finetune(stable: &StableSource, train_view: &TrainView, val: &TrainView, cfg: &TrainConfig, seed: u64) -> Result<Fit> {
    let init = transplant(&stable.params, train_view, cfg, seed)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let out = train::train_erm(init, train_view, val, cfg, &[], &mut rng)?;
    Ok(Fit::from_outcome(out, Some(stable.source_test_accuracy)))
}

/// Inputs of the multitask baseline.
pub struct MultitaskInputs<'a> {
    pub source: &'a SourcePhase,
    pub source_test: &'a TrainView,
    pub train: &'a TrainView,
    pub val: &'a TrainView,
    /// When false, only target steps run (the ERM trajectory).
    pub source_objective: bool,
}

/// Shared extractor with two heads, alternating one worst-subset source
/// step with one average-loss target step. Evaluation and early stopping
/// count target steps.
pub fn run_multitask(inp: &MultitaskInputs<'_>, cfg: &TrainConfig, seed: u64) -> Result<Fit> {
    cfg.validate()?;
    let subsets = SourceSubsets::from_phase(inp.source)?;
    if subsets.pooled.input_dim() != inp.train.input_dim() {
        return Err(Error::Config("source and target input widths differ".into()));
    }
    let mut rng_init = rng_from_seed(derive_seed(seed, &[0]));
    let mut target = cfg.init_model(inp.train.input_dim(), inp.train.num_classes, &mut rng_init)?;
    let mut rng_t = rng_from_seed(derive_seed(seed, &[1]));
    let mut rng_s = rng_from_seed(derive_seed(seed, &[2]));
    let mut source = target.clone();
    let last = source.layers.len() - 1;
    let width = source.layers[last].input_dim();
    source.layers[last] = Dense::glorot(width, subsets.pooled.num_classes, &mut rng_s);
    let extractor = extractor_layers(&target);

    let mut adam_t = AdamState::new(&target, cfg.learning_rate);
    let mut adam_s = AdamState::new(&source, cfg.learning_rate);
    let pool: Vec<usize> = (0..inp.train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    stopper.observe(0, train::average_accuracy(&target, inp.val)?);
    let mut best_t = target.clone();
    let mut best_s = source.clone();
    let mut t = 0;
    while t < cfg.max_steps {
        if inp.source_objective {
            let (loss, g, _) = group_dro_step(&source, &subsets.pooled, &subsets.groups, cfg.batch_size, &mut rng_s)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: t, loss });
            }
            adam_step(&mut adam_s, &mut source, &g)?;
            for k in extractor.clone() {
                target.layers[k].clone_from(&source.layers[k]);
            }
        }
        let (loss, g) = erm_step(&target, inp.train, &pool, cfg.batch_size, &mut rng_t)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t, loss });
        }
        adam_step(&mut adam_t, &mut target, &g)?;
        for k in extractor.clone() {
            source.layers[k].clone_from(&target.layers[k]);
        }
        t += 1;
        if t % cfg.eval_every == 0 || t == cfg.max_steps {
            if stopper.observe(t, train::average_accuracy(&target, inp.val)?) {
                best_t.clone_from(&target);
                best_s.clone_from(&source);
            }
            if stopper.should_stop() {
                break;
            }
        }
    }
    Ok(Fit {
        source_test_accuracy: Some(train::average_accuracy(&best_s, inp.source_test)?),
        params: best_t,
        val_criterion: stopper.best,
        steps: t,
    })
}

/// Groups from observed label and the hidden unstable value.
pub fn oracle_groups(env: &Environment) -> Groups {
    Groups::from_keys(env.examples.iter().map(|e| GroupKey {
        label: e.y,
        part: e.z_hidden,
    }))
}

/// Worst-group training over `(label, hidden unstable value)` groups,
/// selected by worst oracle-group validation accuracy.
pub fn run_oracle(train_env: &Environment, val_env: &Environment, cfg: &TrainConfig, seed: u64) -> Result<Fit> {
    let train_view = train_env.view();
    let val = val_env.view();
    let groups = oracle_groups(train_env);
    let val_groups = oracle_groups(val_env);
    let out = crate::target::group_dro_train(&train_view, &groups, &val, &val_groups, cfg, seed)?;
    Ok(Fit::from_outcome(out, None))
}

/// ERM on pooled source environments; its hidden layer is the comparison
/// representation for cluster quality.
pub fn erm_source_representation(source_views: &[&TrainView], val: &TrainView, cfg: &TrainConfig, seed: u64) -> Result<ModelParams> {
    let pooled = TrainView::concat(source_views)?;
    Ok(run_erm(&pooled, val, cfg, seed)?.params)
}
