//! Source phase: per-environment classifiers, correctness partitions of the
//! other environments, and the triplet-trained unstable-feature encoder.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, backprop, derive_seed, forward_trace, rng_from_seed, AdamState, Mode, ModelParams, Rng,
};
use crate::synthgen::{Role, TrainView};
use crate::train::{self, holdout_split, sample_indices, EarlyStopping, TrainConfig, TrainOutcome};

/// Names one environment of one task.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EnvId {
    pub task: String,
    pub role: Role,
}

impl EnvId {
    pub fn new(task: &str, role: Role) -> Self {
        Self {
            task: task.into(),
            role,
        }
    }
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.task, self.role.as_str())
    }
}

/// Per-environment classifier with its training diagnostics.
#[derive(Debug, Clone)]
pub struct EnvClassifier {
    pub params: ModelParams,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub outcome_steps: usize,
}

/// Trains `f_i` on one environment, early-stopping on a 10% held-out slice
/// (all data when the environment has fewer than ten examples).
pub fn train_env_classifier(view: &TrainView, cfg: &TrainConfig, seed: u64) -> Result<EnvClassifier> {
    if view.is_empty() {
        return Err(Error::Config("empty environment".into()));
    }
    let mut rng = rng_from_seed(seed);
    let (fit_idx, held_idx) = if view.len() < 10 {
        ((0..view.len()).collect(), (0..view.len()).collect())
    } else {
        holdout_split(view.len(), 0.1, &mut rng)
    };
    let fit = view.select(&fit_idx);
    let held = view.select(&held_idx);
    let init = cfg.init_model(view.input_dim(), view.num_classes, &mut rng)?;
    let TrainOutcome { params, steps, .. } = train::train_erm(init, &fit, &held, cfg, &[], &mut rng)?;
    Ok(EnvClassifier {
        train_accuracy: train::average_accuracy(&params, &fit)?,
        holdout_accuracy: train::average_accuracy(&params, &held)?,
        params,
        outcome_steps: steps,
    })
}

/// Correct / incorrect index lists for one label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSlices {
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
}

impl LabelSlices {
    pub fn degenerate(&self) -> bool {
        self.correct.is_empty() || self.incorrect.is_empty()
    }
}

/// `E_j` split by the predictions of the classifier trained on `E_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub source_env: EnvId,
    pub eval_env: EnvId,
    pub per_label: BTreeMap<usize, LabelSlices>,
    pub alpha_empirical: f64,
}

impl Partition {
    pub fn degenerate(&self) -> bool {
        self.per_label.values().all(LabelSlices::degenerate)
    }

    pub fn all_correct(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.per_label.values().flat_map(|s| s.correct.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    pub fn all_incorrect(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.per_label.values().flat_map(|s| s.incorrect.iter().copied()).collect();
        v.sort_unstable();
        v
    }
}

/// Splits every label slice of `view_j` by whether `f_i` predicts it
/// correctly.
pub fn partition_environment(f_i: &ModelParams, source: &EnvId, view_j: &TrainView, eval: &EnvId) -> Result<Partition> {
    if source == eval {
        return Err(Error::Config(format!("partition of {eval} by its own classifier")));
    }
    if view_j.is_empty() {
        return Err(Error::Config(format!("{eval} is empty")));
    }
    let pred = f_i.predict(view_j.x.view())?;
    let mut per_label: BTreeMap<usize, LabelSlices> = BTreeMap::new();
    for (i, (&p, &y)) in pred.iter().zip(&view_j.y).enumerate() {
        let s = per_label.entry(y).or_insert_with(|| LabelSlices {
            correct: Vec::new(),
            incorrect: Vec::new(),
        });
        if p == y {
            s.correct.push(i);
        } else {
            s.incorrect.push(i);
        }
    }
    let right: usize = per_label.values().map(|s| s.correct.len()).sum();
    for (y, s) in &per_label {
        if s.degenerate() {
            warn!("partition of {eval} by {source}: label {y} has an empty side; skipped");
        }
    }
    Ok(Partition {
        source_env: source.clone(),
        eval_env: eval.clone(),
        per_label,
        alpha_empirical: right as f64 / view_j.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Triples drawn once from the held-out split for the stopping signal.
    pub eval_triples: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            batch_size: 50,
            max_steps: 6000,
            eval_every: 100,
            patience: 20,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            hidden: vec![64],
            output_dim: 16,
            eval_triples: 64,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("triplet batch size {} < 2", self.batch_size)));
        }
        if self.eval_every == 0 || self.patience == 0 || self.output_dim == 0 {
            return Err(Error::Config("eval_every, patience and output_dim must be positive".into()));
        }
        Ok(())
    }
}

fn check_dims(m1: &[f64], m2: &[f64], m3: &[f64]) -> Result<()> {
    if m1.len() != m2.len() || m1.len() != m3.len() {
        return Err(crate::error::shape_err(
            "triplet means",
            m1.len(),
            format!("{}/{}", m2.len(), m3.len()),
        ));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// `max(0, |m1 - m2|^2 - |m1 - m3|^2 + margin)`.
pub fn triplet_loss(m1: &[f64], m2: &[f64], m3: &[f64], margin: f64) -> Result<f64> {
    check_dims(m1, m2, m3)?;
    Ok((sq_dist(m1, m2) - sq_dist(m1, m3) + margin).max(0.0))
}

/// Loss and its gradient with respect to the three means. The gradient is
/// zero whenever the hinge is not strictly active.
pub fn triplet_loss_grad(m1: &[f64], m2: &[f64], m3: &[f64], margin: f64) -> Result<(f64, [Vec<f64>; 3])> {
    check_dims(m1, m2, m3)?;
    let raw = sq_dist(m1, m2) - sq_dist(m1, m3) + margin;
    let d = m1.len();
    if raw <= 0.0 {
        return Ok((0.0, [vec![0.0; d], vec![0.0; d], vec![0.0; d]]));
    }
    let g1 = (0..d).map(|k| 2.0 * (m3[k] - m2[k])).collect();
    let g2 = (0..d).map(|k| -2.0 * (m1[k] - m2[k])).collect();
    let g3 = (0..d).map(|k| 2.0 * (m1[k] - m3[k])).collect();
    Ok((raw, [g1, g2, g3]))
}

/// One task's partitions, each paired with the view of the environment it
/// partitions.
#[derive(Debug, Clone, Copy)]
pub struct SourceTask<'a> {
    pub task_id: &'a str,
    pub pairs: &'a [(Partition, TrainView)],
}

/// One sampled triple: three index batches from `slice (task, pair, label)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletDraw {
    pub task: usize,
    pub pair: usize,
    pub label: usize,
    pub idx1: Vec<usize>,
    pub idx2: Vec<usize>,
    pub idx3: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Slice {
    correct: Vec<usize>,
    incorrect: Vec<usize>,
}

/// Uniform over tasks, then pairs, then labels; batches with replacement.
/// Only non-degenerate slices are ever drawn.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    // task -> pair -> (pair index, label -> slice)
    tree: Vec<(usize, Vec<(usize, Vec<(usize, Slice)>)>)>,
    batch: usize,
}

impl TripletSampler {
    fn build(
        tasks: &[SourceTask<'_>],
        batch: usize,
        pick: impl Fn(usize, usize, usize, &LabelSlices) -> Option<Slice>,
    ) -> Self {
        let mut tree = Vec::new();
        for (t, task) in tasks.iter().enumerate() {
            let mut pairs = Vec::new();
            for (p, (part, _)) in task.pairs.iter().enumerate() {
                let labels: Vec<(usize, Slice)> = part
                    .per_label
                    .iter()
                    .filter_map(|(&y, s)| pick(t, p, y, s).map(|sl| (y, sl)))
                    .filter(|(_, sl)| !sl.correct.is_empty() && !sl.incorrect.is_empty())
                    .collect();
                if !labels.is_empty() {
                    pairs.push((p, labels));
                }
            }
            if !pairs.is_empty() {
                tree.push((t, pairs));
            }
        }
        Self { tree, batch }
    }

    /// Sampler over the full partitions.
    pub fn new(tasks: &[SourceTask<'_>], batch: usize) -> Self {
        Self::build(tasks, batch, |_, _, _, s| {
            Some(Slice {
                correct: s.correct.clone(),
                incorrect: s.incorrect.clone(),
            })
        })
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Number of usable `(task, pair, label)` triples.
    pub fn num_triples(&self) -> usize {
        self.tree.iter().flat_map(|(_, p)| p.iter().map(|(_, l)| l.len())).sum()
    }

    pub fn draw(&self, rng: &mut Rng) -> TripletDraw {
        let (task, pairs) = &self.tree[rng.gen_range(0..self.tree.len())];
        let (pair, labels) = &pairs[rng.gen_range(0..pairs.len())];
        let (label, slice) = &labels[rng.gen_range(0..labels.len())];
        TripletDraw {
            task: *task,
            pair: *pair,
            label: *label,
            idx1: sample_indices(rng, &slice.correct, self.batch),
            idx2: sample_indices(rng, &slice.correct, self.batch),
            idx3: sample_indices(rng, &slice.incorrect, self.batch),
        }
    }
}

/// Trained encoder plus diagnostics.
#[derive(Debug, Clone)]
pub struct EncoderFit {
    pub f_z: ModelParams,
    /// Held-out objective (triplet loss plus penalty) at initialization.
    pub initial_loss: f64,
    pub best_heldout_loss: f64,
    pub steps: usize,
    pub curve: Vec<crate::train::CurvePoint>,
    pub usable_triples: usize,
}

fn batch_mean_forward(f_z: &ModelParams, view: &TrainView, idx: &[usize]) -> Result<Vec<f64>> {
    let x = view.x.select(Axis(0), idx);
    let out = f_z.predict_logits(x.view())?;
    Ok(out.mean_axis(Axis(0)).expect("non-empty batch").to_vec())
}

/// Triplet loss of one draw without gradients.
pub fn draw_loss(f_z: &ModelParams, tasks: &[SourceTask<'_>], d: &TripletDraw, margin: f64) -> Result<f64> {
    let view = &tasks[d.task].pairs[d.pair].1;
    let m1 = batch_mean_forward(f_z, view, &d.idx1)?;
    let m2 = batch_mean_forward(f_z, view, &d.idx2)?;
    let m3 = batch_mean_forward(f_z, view, &d.idx3)?;
    triplet_loss(&m1, &m2, &m3, margin)
}

/// Loss and parameter gradient of one draw. The three batches go through
/// the encoder as one stacked forward pass.
pub fn draw_gradient(
    f_z: &ModelParams,
    tasks: &[SourceTask<'_>],
    d: &TripletDraw,
    margin: f64,
) -> Result<(f64, crate::numerics::Gradients)> {
    let view = &tasks[d.task].pairs[d.pair].1;
    let idx: Vec<usize> = d.idx1.iter().chain(&d.idx2).chain(&d.idx3).copied().collect();
    let x = view.x.select(Axis(0), &idx);
    let trace = forward_trace(f_z, x.view(), Mode::Eval, None)?;
    let (n1, n2) = (d.idx1.len(), d.idx2.len());
    let mean = |a: usize, b: usize| trace.logits.slice(ndarray::s![a..b, ..]).mean_axis(Axis(0)).expect("rows");
    let m1 = mean(0, n1);
    let m2 = mean(n1, n1 + n2);
    let m3 = mean(n1 + n2, idx.len());
    let (loss, [g1, g2, g3]) = triplet_loss_grad(m1.as_slice().unwrap(), m2.as_slice().unwrap(), m3.as_slice().unwrap(), margin)?;
    let mut d_out = Array2::zeros(trace.logits.raw_dim());
    for (r, mut row) in d_out.rows_mut().into_iter().enumerate() {
        let (g, n) = if r < n1 {
            (&g1, n1)
        } else if r < n1 + n2 {
            (&g2, n2)
        } else {
            (&g3, d.idx3.len())
        };
        row.assign(&(Array1::from(g.clone()) / n as f64));
    }
    let grads = backprop(f_z, &trace, &d_out)?;
    Ok((loss + f_z.decay_penalty(), grads))
}

/// Trains `f_Z` on triples drawn from every non-degenerate slice of every
/// task. A tenth of each slice is held out; the stopping signal is the mean
/// loss over a fixed set of held-out triples plus the weight-decay penalty.
/// The hinge alone reaches zero long before the encoder drops its nuisance
/// weights, so the penalty is what separates those models.
pub fn learn_unstable_representation(tasks: &[SourceTask<'_>], cfg: &TripletConfig, seed: u64) -> Result<EncoderFit> {
    cfg.validate()?;
    let input_dim = tasks
        .iter()
        .flat_map(|t| t.pairs.iter())
        .map(|(_, v)| v.input_dim())
        .next()
        .ok_or(Error::NoContrastableSignal)?;
    let mut split_rng = rng_from_seed(derive_seed(seed, &[0]));
    let mut held: BTreeMap<(usize, usize, usize), LabelSlices> = BTreeMap::new();
    let mut fit: BTreeMap<(usize, usize, usize), LabelSlices> = BTreeMap::new();
    for (t, task) in tasks.iter().enumerate() {
        for (p, (part, view)) in task.pairs.iter().enumerate() {
            if view.input_dim() != input_dim {
                return Err(crate::error::shape_err("source views", input_dim, view.input_dim()));
            }
            for (&y, s) in &part.per_label {
                let (cf, ch) = split_list(&s.correct, &mut split_rng);
                let (inf, inh) = split_list(&s.incorrect, &mut split_rng);
                fit.insert((t, p, y), LabelSlices { correct: cf, incorrect: inf });
                held.insert((t, p, y), LabelSlices { correct: ch, incorrect: inh });
            }
        }
    }
    let pick = |map: &BTreeMap<(usize, usize, usize), LabelSlices>| {
        let map = map.clone();
        move |t: usize, p: usize, y: usize, _: &LabelSlices| {
            map.get(&(t, p, y)).map(|s| Slice {
                correct: s.correct.clone(),
                incorrect: s.incorrect.clone(),
            })
        }
    };
    let sampler = TripletSampler::build(tasks, cfg.batch_size, pick(&fit));
    if sampler.is_empty() {
        return Err(Error::NoContrastableSignal);
    }
    let mut held_sampler = TripletSampler::build(tasks, cfg.batch_size, pick(&held));
    if held_sampler.is_empty() {
        // tiny slices: fall back to the training slices for the signal
        held_sampler = sampler.clone();
    }
    let mut eval_rng = rng_from_seed(derive_seed(seed, &[1]));
    let eval_draws: Vec<TripletDraw> = (0..cfg.eval_triples).map(|_| held_sampler.draw(&mut eval_rng)).collect();
    let held_loss = |f: &ModelParams| -> Result<f64> {
        let mut s = 0.0;
        for d in &eval_draws {
            s += draw_loss(f, tasks, d, cfg.margin)?;
        }
        Ok(s / eval_draws.len() as f64 + f.decay_penalty())
    };

    let mut rng = rng_from_seed(derive_seed(seed, &[2]));
    let mut widths = vec![input_dim];
    widths.extend(&cfg.hidden);
    widths.push(cfg.output_dim);
    let mut f_z = ModelParams::new(&widths, crate::numerics::Activation::Relu, &mut rng)?
        .with_regularization(0.0, cfg.weight_decay);
    let initial_loss = held_loss(&f_z)?;
    let mut adam = AdamState::new(&f_z, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience);
    stopper.observe(0, -initial_loss);
    let mut best = f_z.clone();
    let mut curve = vec![crate::train::CurvePoint {
        step: 0,
        train_loss: f64::NAN,
        val_metric: -initial_loss,
    }];
    let mut acc = 0.0;
    let mut t = 0;
    while t < cfg.max_steps {
        let d = sampler.draw(&mut rng);
        let (loss, grads) = draw_gradient(&f_z, tasks, &d, cfg.margin)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t, loss });
        }
        adam_step(&mut adam, &mut f_z, &grads)?;
        acc += loss;
        t += 1;
        if t % cfg.eval_every == 0 || t == cfg.max_steps {
            let metric = -held_loss(&f_z)?;
            curve.push(crate::train::CurvePoint {
                step: t,
                train_loss: acc / ((t - 1) % cfg.eval_every + 1) as f64,
                val_metric: metric,
            });
            acc = 0.0;
            if stopper.observe(t, metric) {
                best.clone_from(&f_z);
            }
            if stopper.should_stop() {
                break;
            }
        }
    }
    Ok(EncoderFit {
        f_z: best,
        initial_loss,
        best_heldout_loss: -stopper.best,
        steps: t,
        curve,
        usable_triples: sampler.num_triples(),
    })
}

fn split_list(v: &[usize], rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let (fit, held) = holdout_split(v.len(), 0.1, rng);
    (fit.iter().map(|&i| v[i]).collect(), held.iter().map(|&i| v[i]).collect())
}

/// Everything the source phase produces for one task.
#[derive(Debug, Clone)]
pub struct SourcePhase {
    pub task_id: String,
    pub classifiers: Vec<(EnvId, EnvClassifier)>,
    /// `(partition, view of the partitioned environment)` for both orders.
    pub pairs: Vec<(Partition, TrainView)>,
}

impl SourcePhase {
    pub fn as_task(&self) -> SourceTask<'_> {
        SourceTask {
            task_id: &self.task_id,
            pairs: &self.pairs,
        }
    }
}

/// Trains a classifier on each training environment and partitions every
/// other training environment with it.
pub fn run_source_phase(task_id: &str, envs: &[(Role, TrainView)], cfg: &TrainConfig, seed: u64) -> Result<SourcePhase> {
    let mut classifiers = Vec::new();
    for (k, (role, view)) in envs.iter().enumerate() {
        let c = train_env_classifier(view, cfg, derive_seed(seed, &[k as u64]))?;
        classifiers.push((EnvId::new(task_id, *role), c));
    }
    let mut pairs = Vec::new();
    for (i, (id_i, c)) in classifiers.iter().enumerate() {
        for (j, (role_j, view_j)) in envs.iter().enumerate() {
            if i != j {
                let part = partition_environment(&c.params, id_i, view_j, &EnvId::new(task_id, *role_j))?;
                pairs.push((part, view_j.clone()));
            }
        }
    }
    Ok(SourcePhase {
        task_id: task_id.into(),
        classifiers,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        let m = [0.0, 0.0];
        assert_eq!(triplet_loss(&m, &m, &[1.0, 0.0], 0.3).unwrap(), 0.0);
        assert!((triplet_loss(&m, &m, &m, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!(triplet_loss(&m, &m, &[1.0], 0.3).is_err());
    }

    #[test]
    fn gradient_zero_at_kink() {
        // raw value exactly zero
        let (l, g) = triplet_loss_grad(&[0.0], &[0.0], &[0.5f64.sqrt()], 0.5).unwrap();
        assert!(l.abs() < 1e-15);
        if l == 0.0 {
            assert!(g.iter().all(|v| v.iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let m1 = [0.3, -0.2, 0.1];
        let m2 = [0.5, 0.0, -0.4];
        let m3 = [0.2, -0.1, 0.2];
        let (_, g) = triplet_loss_grad(&m1, &m2, &m3, 0.3).unwrap();
        let h = 1e-6;
        for which in 0..3 {
            for k in 0..3 {
                let mut ms = [m1.to_vec(), m2.to_vec(), m3.to_vec()];
                ms[which][k] += h;
                let up = triplet_loss(&ms[0], &ms[1], &ms[2], 0.3).unwrap();
                ms[which][k] -= 2.0 * h;
                let dn = triplet_loss(&ms[0], &ms[1], &ms[2], 0.3).unwrap();
                assert!(((up - dn) / (2.0 * h) - g[which][k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn self_partition_rejected() {
        let view = TrainView {
            x: ndarray::array![[1.0]],
            y: vec![0],
            num_classes: 2,
        };
        let p = ModelParams::new(&[1, 2], crate::numerics::Activation::Relu, &mut rng_from_seed(0)).unwrap();
        let id = EnvId::new("t", Role::Train1);
        assert!(partition_environment(&p, &id, &view, &id).is_err());
    }

    #[test]
    fn all_degenerate_is_no_signal() {
        let view = TrainView {
            x: ndarray::array![[1.0], [2.0]],
            y: vec![0, 1],
            num_classes: 2,
        };
        let mut per_label = BTreeMap::new();
        per_label.insert(0, LabelSlices { correct: vec![0], incorrect: vec![] });
        per_label.insert(1, LabelSlices { correct: vec![1], incorrect: vec![] });
        let part = Partition {
            source_env: EnvId::new("t", Role::Train1),
            eval_env: EnvId::new("t", Role::Train2),
            per_label,
            alpha_empirical: 1.0,
        };
        let pairs = vec![(part, view)];
        let tasks = [SourceTask { task_id: "t", pairs: &pairs }];
        assert!(matches!(
            learn_unstable_representation(&tasks, &TripletConfig::default(), 0),
            Err(Error::NoContrastableSignal)
        ));
    }
}
