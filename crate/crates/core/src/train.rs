//! Minibatch training shared by every pipeline stage: Adam updates,
//! periodic validation, patience-based early stopping, and the hard
//! worst-group step.

use ndarray::{Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::numerics::{
    adam_step, backprop, cross_entropy, forward_trace, Activation, AdamState, Gradients, Mode,
    ModelParams, Rng, Trace,
};
use crate::synthgen::TrainView;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub max_steps: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            dropout: 0.0,
            weight_decay: 0.0,
            batch_size: 50,
            eval_every: 100,
            patience: 20,
            max_steps: 5000,
            hidden: vec![64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {}", self.dropout)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, eval_every and patience must be positive".into()));
        }
        Ok(())
    }

    /// Fresh network `input -> hidden... -> output` with this config's
    /// regularization.
    pub fn init_model(&self, input: usize, output: usize, rng: &mut Rng) -> Result<ModelParams> {
        let mut widths = vec![input];
        widths.extend(&self.hidden);
        widths.push(output);
        Ok(ModelParams::new(&widths, Activation::Relu, rng)?.with_regularization(self.dropout, self.weight_decay))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training objective since the previous evaluation.
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation point.
    pub params: ModelParams,
    pub best_metric: f64,
    pub best_step: usize,
    pub steps: usize,
    pub curve: Vec<CurvePoint>,
}

/// Tracks the best validation metric (higher is better; ties keep the
/// earlier point).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_step: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_step: 0,
            since_best: 0,
        }
    }

    /// Records a metric; returns true when it is a new best.
    pub fn observe(&mut self, step: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_step = step;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

/// Runs Adam on `step` until `max_steps` or patience runs out, evaluating
/// with `validate` at step 0 and every `eval_every` steps. Gradients of the
/// layers listed in `frozen` are zeroed, which leaves them bitwise fixed.
pub fn run_loop(
    init: ModelParams,
    cfg: &TrainConfig,
    frozen: &[usize],
    rng: &mut Rng,
    mut step: impl FnMut(&ModelParams, &mut Rng) -> Result<(f64, Gradients)>,
    mut validate: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init;
    let mut adam = AdamState::new(&params, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let first = validate(&params)?;
    stopper.observe(0, first);
    let mut curve = vec![CurvePoint {
        step: 0,
        train_loss: f64::NAN,
        val_metric: first,
    }];
    let mut loss_sum = 0.0;
    let mut t = 0;
    while t < cfg.max_steps {
        let (loss, mut grads) = step(&params, rng)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t, loss });
        }
        for &k in frozen {
            grads.zero_layer(k);
        }
        adam_step(&mut adam, &mut params, &grads)?;
        loss_sum += loss;
        t += 1;
        if t % cfg.eval_every == 0 || t == cfg.max_steps {
            let metric = validate(&params)?;
            let since = (t - 1) % cfg.eval_every + 1;
            curve.push(CurvePoint {
                step: t,
                train_loss: loss_sum / since as f64,
                val_metric: metric,
            });
            loss_sum = 0.0;
            if stopper.observe(t, metric) {
                best.clone_from(&params);
            }
            if stopper.should_stop() {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_metric: stopper.best,
        best_step: stopper.best_step,
        steps: t,
        curve,
    })
}

/// `n` draws with replacement from `pool`.
pub fn sample_indices(rng: &mut Rng, pool: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// Forward pass and mean cross-entropy on selected rows.
pub struct LossTrace {
    pub loss: f64,
    trace: Trace,
    probs: Array2<f64>,
    labels: Vec<usize>,
}

impl LossTrace {
    pub fn compute(params: &ModelParams, view: &TrainView, idx: &[usize], rng: &mut Rng) -> Result<Self> {
        let x = view.x.select(Axis(0), idx);
        let labels: Vec<usize> = idx.iter().map(|&i| view.y[i]).collect();
        let trace = forward_trace(params, x.view(), Mode::Train, Some(rng))?;
        let (loss, probs) = cross_entropy(&trace.logits, &labels)?;
        Ok(Self {
            loss,
            trace,
            probs,
            labels,
        })
    }

    /// Gradient of this batch's loss plus weight decay.
    pub fn gradients(mut self, params: &ModelParams) -> Result<Gradients> {
        let n = self.labels.len() as f64;
        for (mut row, &y) in self.probs.rows_mut().into_iter().zip(&self.labels) {
            row[y] -= 1.0;
            row /= n;
        }
        backprop(params, &self.trace, &self.probs)
    }
}

/// One average-loss step on a uniform batch.
pub fn erm_step(params: &ModelParams, view: &TrainView, pool: &[usize], batch: usize, rng: &mut Rng) -> Result<(f64, Gradients)> {
    let idx = sample_indices(rng, pool, batch);
    let lt = LossTrace::compute(params, view, &idx, rng)?;
    let loss = lt.loss + params.decay_penalty();
    Ok((loss, lt.gradients(params)?))
}

/// Key of a training group. For target groups this is the observed label
/// and a within-label id (cluster id, or the hidden unstable value for the
/// oracle); for source partition subsets it is the pair index and the side
/// (0 correct, 1 incorrect).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub label: usize,
    pub part: usize,
}

/// Disjoint index sets over one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Groups {
    pub keys: Vec<GroupKey>,
    pub members: Vec<Vec<usize>>,
}

impl Groups {
    /// Groups from a per-example key; empty groups never appear. Keys are
    /// sorted so group ids are deterministic.
    pub fn from_keys(keys: impl IntoIterator<Item = GroupKey>) -> Self {
        let mut map = std::collections::BTreeMap::<GroupKey, Vec<usize>>::new();
        for (i, k) in keys.into_iter().enumerate() {
            map.entry(k).or_default().push(i);
        }
        let (keys, members) = map.into_iter().unzip();
        Self { keys, members }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Groups keyed by label only.
    pub fn by_label(labels: &[usize]) -> Self {
        Self::from_keys(labels.iter().map(|&label| GroupKey { label, part: 0 }))
    }

    fn check(&self) -> Result<()> {
        if self.is_empty() || self.members.iter().any(|m| m.is_empty()) {
            return Err(Error::Config("group DRO needs non-empty groups".into()));
        }
        Ok(())
    }
}

/// Outcome of one worst-group step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLossReport {
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub counts: Vec<usize>,
    /// Index of the group whose batch was backpropagated.
    pub worst_group: usize,
}

/// Samples a batch from every group, and returns the gradient of the
/// largest group loss (ties: lowest group id).
pub fn group_dro_step(
    params: &ModelParams,
    view: &TrainView,
    groups: &Groups,
    batch: usize,
    rng: &mut Rng,
) -> Result<(f64, Gradients, GroupLossReport)> {
    groups.check()?;
    let mut traces = Vec::with_capacity(groups.len());
    for members in &groups.members {
        let idx = sample_indices(rng, members, batch);
        traces.push(LossTrace::compute(params, view, &idx, rng)?);
    }
    let mut worst = 0;
    for (g, t) in traces.iter().enumerate() {
        if t.loss > traces[worst].loss {
            worst = g;
        }
    }
    let report = GroupLossReport {
        losses: traces.iter().map(|t| t.loss).collect(),
        accuracies: traces
            .iter()
            .map(|t| {
                let pred = crate::numerics::argmax_rows(&t.probs);
                accuracy(&pred, &t.labels).unwrap_or(0.0)
            })
            .collect(),
        counts: groups.members.iter().map(Vec::len).collect(),
        worst_group: worst,
    };
    let chosen = traces.swap_remove(worst);
    let loss = chosen.loss + params.decay_penalty();
    Ok((loss, chosen.gradients(params)?, report))
}

/// Average accuracy on a view.
pub fn average_accuracy(params: &ModelParams, view: &TrainView) -> Result<f64> {
    accuracy(&params.predict(view.x.view())?, &view.y)
}

/// Minimum accuracy over non-empty groups of a view.
pub fn worst_group_accuracy(params: &ModelParams, view: &TrainView, groups: &Groups) -> Result<f64> {
    let pred = params.predict(view.x.view())?;
    crate::metrics::group_accuracies(&pred, &view.y, &groups.members)
        .into_iter()
        .flatten()
        .reduce(f64::min)
        .ok_or_else(|| Error::Undefined("no non-empty validation group".into()))
}

/// Average-loss training with average validation accuracy.
pub fn train_erm(
    init: ModelParams,
    train: &TrainView,
    val: &TrainView,
    cfg: &TrainConfig,
    frozen: &[usize],
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    let pool: Vec<usize> = (0..train.len()).collect();
    run_loop(
        init,
        cfg,
        frozen,
        rng,
        |p, r| erm_step(p, train, &pool, cfg.batch_size, r),
        |p| average_accuracy(p, val),
    )
}

/// Worst-group training with a caller-supplied validation criterion.
pub fn train_group_dro(
    init: ModelParams,
    train: &TrainView,
    groups: &Groups,
    cfg: &TrainConfig,
    frozen: &[usize],
    rng: &mut Rng,
    validate: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<TrainOutcome> {
    groups.check()?;
    run_loop(
        init,
        cfg,
        frozen,
        rng,
        |p, r| group_dro_step(p, train, groups, cfg.batch_size, r).map(|(l, g, _)| (l, g)),
        validate,
    )
}

/// Deterministic split of `0..n` into (train, held-out) with roughly
/// `frac` held out; never leaves the training side empty.
pub fn holdout_split(n: usize, frac: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let k = ((n as f64 * frac).floor() as usize).min(n.saturating_sub(1));
    let held = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    train.sort_unstable();
    let mut held = held;
    held.sort_unstable();
    (train, held)
}

/// Stable 64-bit fingerprint of a set of layers (FNV-1a over the IEEE bits).
pub fn layers_hash(params: &ModelParams, layers: std::ops::Range<usize>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for layer in &params.layers[layers] {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;
    use ndarray::array;

    fn toy() -> TrainView {
        TrainView {
            x: array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.1], [0.1, 1.0]],
            y: vec![0, 1, 0, 1],
            num_classes: 2,
        }
    }

    #[test]
    fn single_group_matches_erm_trajectory() {
        let view = toy();
        let cfg = TrainConfig {
            max_steps: 30,
            eval_every: 10,
            hidden: vec![4],
            batch_size: 3,
            ..Default::default()
        };
        let init = cfg.init_model(2, 2, &mut rng_from_seed(0)).unwrap();
        let groups = Groups::from_keys((0..4).map(|_| GroupKey { label: 0, part: 0 }));
        let mut r1 = rng_from_seed(5);
        let mut r2 = rng_from_seed(5);
        let mut a = init.clone();
        let mut b = init;
        let pool: Vec<usize> = (0..4).collect();
        let mut sa = AdamState::new(&a, 1e-3);
        let mut sb = AdamState::new(&b, 1e-3);
        for _ in 0..30 {
            let (_, ga) = erm_step(&a, &view, &pool, 3, &mut r1).unwrap();
            let (_, gb, _) = group_dro_step(&b, &view, &groups, 3, &mut r2).unwrap();
            adam_step(&mut sa, &mut a, &ga).unwrap();
            adam_step(&mut sb, &mut b, &gb).unwrap();
            assert_eq!(a.flatten(), b.flatten());
        }
    }

    #[test]
    fn worst_group_has_max_loss() {
        let view = toy();
        let cfg = TrainConfig {
            hidden: vec![3],
            ..Default::default()
        };
        let p = cfg.init_model(2, 2, &mut rng_from_seed(1)).unwrap();
        let groups = Groups::by_label(&view.y);
        let mut rng = rng_from_seed(2);
        for _ in 0..20 {
            let (_, _, r) = group_dro_step(&p, &view, &groups, 2, &mut rng).unwrap();
            assert!(r.losses.iter().all(|&l| l <= r.losses[r.worst_group]));
        }
    }

    #[test]
    fn frozen_layer_is_bitwise_fixed() {
        let view = toy();
        let cfg = TrainConfig {
            max_steps: 50,
            eval_every: 10,
            hidden: vec![4],
            ..Default::default()
        };
        let init = cfg.init_model(2, 2, &mut rng_from_seed(0)).unwrap();
        let h0 = layers_hash(&init, 0..1);
        let mut rng = rng_from_seed(1);
        let pool: Vec<usize> = (0..4).collect();
        let out = run_loop(
            init.clone(),
            &cfg,
            &[0],
            &mut rng,
            |p, r| erm_step(p, &view, &pool, 4, r),
            |_| Ok(0.0),
        )
        .unwrap();
        assert_eq!(layers_hash(&out.params, 0..1), h0);
        // best is step 0 since the metric never improves
        assert_eq!(out.best_step, 0);
    }

    #[test]
    fn early_stopping_counts_patience() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(0, 0.5));
        assert!(!s.observe(1, 0.5));
        assert!(!s.should_stop());
        assert!(!s.observe(2, 0.4));
        assert!(s.should_stop());
    }

    #[test]
    fn divergence_is_reported() {
        let view = toy();
        let cfg = TrainConfig {
            hidden: vec![2],
            ..Default::default()
        };
        let init = cfg.init_model(2, 2, &mut rng_from_seed(0)).unwrap();
        let g = Gradients::zeros_like(&init);
        let err = run_loop(init, &cfg, &[], &mut rng_from_seed(0), |_, _| Ok((f64::NAN, g.clone())), |_| Ok(0.0));
        assert!(matches!(err, Err(Error::Diverged { step: 0, .. })));
        let _ = view;
    }

    #[test]
    fn holdout_never_empties_train() {
        let mut rng = rng_from_seed(0);
        let (t, h) = holdout_split(1, 0.5, &mut rng);
        assert_eq!((t.len(), h.len()), (1, 0));
        let (t, h) = holdout_split(100, 0.1, &mut rng);
        assert_eq!((t.len(), h.len()), (90, 10));
    }
}
