//! Exact finite-distribution checks for the partitioning argument.
//!
//! Joints are tables over `(c, z, y)`: stable feature, unstable feature,
//! label. A classifier is represented by its conditional `P(y | c, z)`,
//! normally the Bayes conditional of the joint it was "trained" on.

use rand::Rng as _;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng_from_seed, Rng};

/// Tolerance for normalization and hypothesis checks.
pub const EXACT_TOL: f64 = 1e-12;

/// Probability table over `(c, z, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    card: [usize; 3],
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(card: [usize; 3], probs: Vec<f64>) -> Result<Self> {
        if card.contains(&0) {
            return Err(Error::Config(format!("zero cardinality in {card:?}")));
        }
        let len = card.iter().product::<usize>();
        if probs.len() != len {
            return Err(crate::error::shape_err("joint table", len, probs.len()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("joint has negative or non-finite entries".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > EXACT_TOL {
            return Err(Error::Config(format!("joint sums to {total}")));
        }
        Ok(Self { card, probs })
    }

    /// Normalizes non-negative weights into a joint.
    pub fn from_weights(card: [usize; 3], weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("weights have no mass".into()));
        }
        Self::new(card, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn card(&self) -> [usize; 3] {
        self.card
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn idx(&self, c: usize, z: usize, y: usize) -> usize {
        (c * self.card[1] + z) * self.card[2] + y
    }

    pub fn get(&self, c: usize, z: usize, y: usize) -> f64 {
        self.probs[self.idx(c, z, y)]
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.card[2]];
        for c in 0..self.card[0] {
            for z in 0..self.card[1] {
                for (y, o) in out.iter_mut().enumerate() {
                    *o += self.get(c, z, y);
                }
            }
        }
        out
    }

    /// `P(z, y)` as `[z][y]`.
    pub fn marginal_zy(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.card[2]]; self.card[1]];
        for c in 0..self.card[0] {
            for (z, row) in out.iter_mut().enumerate() {
                for (y, o) in row.iter_mut().enumerate() {
                    *o += self.get(c, z, y);
                }
            }
        }
        out
    }

    /// `P(z | y)` as `[y][z]`; `None` for labels with no mass.
    pub fn z_given_y(&self) -> Vec<Option<Vec<f64>>> {
        let zy = self.marginal_zy();
        (0..self.card[2])
            .map(|y| {
                let py: f64 = zy.iter().map(|r| r[y]).sum();
                (py > 0.0).then(|| zy.iter().map(|r| r[y] / py).collect())
            })
            .collect()
    }

    /// `P(c | y)` as `[y][c]`; `None` for labels with no mass.
    pub fn c_given_y(&self) -> Vec<Option<Vec<f64>>> {
        let py = self.marginal_y();
        (0..self.card[2])
            .map(|y| {
                (py[y] > 0.0).then(|| {
                    (0..self.card[0])
                        .map(|c| (0..self.card[1]).map(|z| self.get(c, z, y)).sum::<f64>() / py[y])
                        .collect()
                })
            })
            .collect()
    }

    pub fn total_variation(&self, other: &DiscreteJoint) -> Result<f64> {
        if self.card != other.card {
            return Err(crate::error::shape_err(
                "total variation",
                format!("{:?}", self.card),
                format!("{:?}", other.card),
            ));
        }
        Ok(0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

/// Classifier conditional `P(y | c, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditional {
    card: [usize; 3],
    probs: Vec<f64>,
}

impl Conditional {
    pub fn new(card: [usize; 3], probs: Vec<f64>) -> Result<Self> {
        let len = card.iter().product::<usize>();
        if probs.len() != len {
            return Err(crate::error::shape_err("conditional table", len, probs.len()));
        }
        for row in probs.chunks(card[2]) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > EXACT_TOL {
                return Err(Error::Config(format!("conditional row {row:?} is not a distribution")));
            }
        }
        Ok(Self { card, probs })
    }

    pub fn get(&self, c: usize, z: usize, y: usize) -> f64 {
        self.probs[(c * self.card[1] + z) * self.card[2] + y]
    }

    pub fn card(&self) -> [usize; 3] {
        self.card
    }
}

/// Exact Bayes conditional of a joint. Cells with no `(c, z)` mass get the
/// uniform row.
pub fn bayes_conditional(p: &DiscreteJoint) -> Conditional {
    let [kc, kz, ky] = p.card;
    let mut probs = Vec::with_capacity(p.probs.len());
    for c in 0..kc {
        for z in 0..kz {
            let row: Vec<f64> = (0..ky).map(|y| p.get(c, z, y)).collect();
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                probs.extend(row.iter().map(|v| v / s));
            } else {
                probs.extend(std::iter::repeat_n(1.0 / ky as f64, ky));
            }
        }
    }
    Conditional { card: p.card, probs }
}

/// `P_j` split by a classifier into the mass it gets right and wrong.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedJoint {
    /// `None` when the classifier is never right (`alpha = 0`).
    pub correct: Option<DiscreteJoint>,
    /// `None` when the classifier is never wrong (`alpha = 1`).
    pub incorrect: Option<DiscreteJoint>,
    pub alpha: f64,
}

impl PartitionedJoint {
    pub fn degenerate(&self) -> bool {
        self.correct.is_none() || self.incorrect.is_none()
    }

    /// `alpha * correct + (1 - alpha) * incorrect`, cellwise.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self
            .correct
            .as_ref()
            .or(self.incorrect.as_ref())
            .map_or(0, |j| j.probs.len());
        (0..n)
            .map(|k| {
                self.correct.as_ref().map_or(0.0, |j| self.alpha * j.probs[k])
                    + self.incorrect.as_ref().map_or(0.0, |j| (1.0 - self.alpha) * j.probs[k])
            })
            .collect()
    }
}

/// Splits `p_j` into the parts a classifier with conditional `cond_i` gets
/// right (weight `P_i(y|c,z)`) and wrong (weight `P_i(1-y|c,z)`).
pub fn partition_distribution(p_j: &DiscreteJoint, cond_i: &Conditional) -> Result<PartitionedJoint> {
    if p_j.card != cond_i.card {
        return Err(crate::error::shape_err(
            "partition",
            format!("{:?}", p_j.card),
            format!("{:?}", cond_i.card),
        ));
    }
    if p_j.card[2] != 2 {
        return Err(Error::Config(format!("partition needs binary Y, got |Y| = {}", p_j.card[2])));
    }
    let [kc, kz, _] = p_j.card;
    let mut right = vec![0.0; p_j.probs.len()];
    let mut wrong = vec![0.0; p_j.probs.len()];
    for c in 0..kc {
        for z in 0..kz {
            for y in 0..2 {
                let k = p_j.idx(c, z, y);
                right[k] = p_j.probs[k] * cond_i.get(c, z, y);
                wrong[k] = p_j.probs[k] * cond_i.get(c, z, 1 - y);
            }
        }
    }
    let alpha: f64 = right.iter().sum();
    let beta: f64 = wrong.iter().sum();
    let side = |w: Vec<f64>, mass: f64| -> Result<Option<DiscreteJoint>> {
        if mass > 0.0 {
            Ok(Some(DiscreteJoint::new(p_j.card, w.into_iter().map(|v| v / mass).collect())?))
        } else {
            Ok(None)
        }
    };
    Ok(PartitionedJoint {
        correct: side(right, alpha)?,
        incorrect: side(wrong, beta)?,
        alpha,
    })
}

/// `Cov(Z, Y)` with values equal to their indices.
pub fn covariance_zy(p: &DiscreteJoint) -> f64 {
    let zy = p.marginal_zy();
    let (mut ezy, mut ez, mut ey) = (0.0, 0.0, 0.0);
    for (z, row) in zy.iter().enumerate() {
        for (y, &m) in row.iter().enumerate() {
            ezy += (z * y) as f64 * m;
            ez += z as f64 * m;
            ey += y as f64 * m;
        }
    }
    ezy - ez * ey
}

/// Reduced form `0.5 * sum_z z P(z, 1) - 0.5 * sum_z z P(z, 0)`, valid for
/// binary `Y` with a uniform marginal. `None` otherwise.
pub fn covariance_zy_reduced(p: &DiscreteJoint) -> Option<f64> {
    if p.card[2] != 2 || !is_uniform(&p.marginal_y()) {
        return None;
    }
    let zy = p.marginal_zy();
    let s = |y: usize| zy.iter().enumerate().map(|(z, r)| z as f64 * r[y]).sum::<f64>();
    Some(0.5 * s(1) - 0.5 * s(0))
}

fn is_uniform(p: &[f64]) -> bool {
    let u = 1.0 / p.len() as f64;
    p.iter().all(|v| (v - u).abs() <= EXACT_TOL)
}

fn close_opt(a: &[Option<Vec<f64>>], b: &[Option<Vec<f64>>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => x.iter().zip(y).all(|(u, v)| (u - v).abs() <= EXACT_TOL),
            (None, None) => true,
            _ => false,
        })
}

/// `Z` independent of `C` given `Y`.
pub fn z_indep_c_given_y(p: &DiscreteJoint) -> bool {
    let py = p.marginal_y();
    let zg = p.z_given_y();
    let cg = p.c_given_y();
    for y in 0..p.card[2] {
        let (Some(zg), Some(cg)) = (&zg[y], &cg[y]) else {
            continue;
        };
        for c in 0..p.card[0] {
            for z in 0..p.card[1] {
                if (p.get(c, z, y) / py[y] - cg[c] * zg[z]).abs() > EXACT_TOL {
                    return false;
                }
            }
        }
    }
    true
}

/// Hypotheses of the covariance-sign statement for a pair `(p_i, p_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairHypotheses {
    pub binary: bool,
    pub z_indep_c_given_y: bool,
    pub uniform_y: bool,
    /// `sum_y P_i(z|y) = sum_y P_j(z|y)` for every `z`.
    pub equal_sums: bool,
    /// `Cov(Z,Y; P_i) > Cov(Z,Y; P_j)`.
    pub covariance_gap: bool,
    /// `P_i(c|y) = P_j(c|y)`: the stable relation is the same in both.
    pub stable_invariant: bool,
}

impl PairHypotheses {
    pub fn evaluate(p_i: &DiscreteJoint, p_j: &DiscreteJoint) -> Self {
        let same_card = p_i.card == p_j.card;
        let binary = same_card && p_i.card[1] == 2 && p_i.card[2] == 2;
        let equal_sums = same_card && {
            let sums = |p: &DiscreteJoint| -> Vec<f64> {
                let zg = p.z_given_y();
                (0..p.card[1])
                    .map(|z| zg.iter().flatten().map(|r| r[z]).sum())
                    .collect()
            };
            sums(p_i).iter().zip(sums(p_j)).all(|(a, b)| (a - b).abs() <= EXACT_TOL)
        };
        Self {
            binary,
            z_indep_c_given_y: z_indep_c_given_y(p_i) && z_indep_c_given_y(p_j),
            uniform_y: is_uniform(&p_i.marginal_y()) && is_uniform(&p_j.marginal_y()),
            equal_sums,
            covariance_gap: covariance_zy(p_i) - covariance_zy(p_j) > EXACT_TOL,
            stable_invariant: same_card && close_opt(&p_i.c_given_y(), &p_j.c_given_y()),
        }
    }

    pub fn all(&self) -> bool {
        self.binary
            && self.z_indep_c_given_y
            && self.uniform_y
            && self.equal_sums
            && self.covariance_gap
            && self.stable_invariant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCovarianceReport {
    pub hypotheses: PairHypotheses,
    pub hypotheses_satisfied: bool,
    /// `Cov(Z,Y)` on the part of `P_j` that `f_i` gets wrong.
    pub cov_cross_on_j: Option<f64>,
    /// `Cov(Z,Y)` on the part of `P_i` that `f_j` gets wrong.
    pub cov_cross_on_i: Option<f64>,
    /// Both signs as stated (`< 0` on `j`, `> 0` on `i`).
    pub holds: bool,
}

/// Signs of the cross-partition covariances under exact Bayes classifiers.
pub fn check_prop2(p_i: &DiscreteJoint, p_j: &DiscreteJoint) -> Result<CrossCovarianceReport> {
    let hypotheses = PairHypotheses::evaluate(p_i, p_j);
    if !hypotheses.binary {
        return Ok(CrossCovarianceReport {
            hypotheses_satisfied: false,
            hypotheses,
            cov_cross_on_j: None,
            cov_cross_on_i: None,
            holds: false,
        });
    }
    let on_j = partition_distribution(p_j, &bayes_conditional(p_i))?;
    let on_i = partition_distribution(p_i, &bayes_conditional(p_j))?;
    let cov_cross_on_j = on_j.incorrect.as_ref().map(covariance_zy);
    let cov_cross_on_i = on_i.incorrect.as_ref().map(covariance_zy);
    let holds = matches!((cov_cross_on_j, cov_cross_on_i), (Some(a), Some(b)) if a < 0.0 && b > 0.0);
    Ok(CrossCovarianceReport {
        hypotheses_satisfied: hypotheses.all(),
        hypotheses,
        cov_cross_on_j,
        cov_cross_on_i,
        holds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMeanReport {
    pub hypotheses: PairHypotheses,
    pub hypotheses_satisfied: bool,
    /// `Z` uniform within each side of the partition. Reported only.
    pub uniform_z_within_partitions: bool,
    pub degenerate: bool,
    /// `sum_z z P(Z=z, Y=y)` on the wrong side, for `y = 0, 1`.
    pub incorrect_mass: Option<[f64; 2]>,
    /// Same on the right side.
    pub correct_mass: Option<[f64; 2]>,
    /// Wrong side has less `Z = 1` mass at `Y = 1` and more at `Y = 0`.
    pub holds: bool,
    /// The reverse orientation (wrong > right at `Y = 1`, wrong < right at
    /// `Y = 0`), kept for comparison.
    pub reversed_orientation_holds: bool,
}

/// Conditional-mean comparison between the right and wrong parts of `P_j`
/// under `f_i`.
pub fn check_cor1(p_i: &DiscreteJoint, p_j: &DiscreteJoint) -> Result<ConditionalMeanReport> {
    let hypotheses = PairHypotheses::evaluate(p_i, p_j);
    let mut report = ConditionalMeanReport {
        hypotheses_satisfied: hypotheses.all(),
        hypotheses,
        uniform_z_within_partitions: false,
        degenerate: true,
        incorrect_mass: None,
        correct_mass: None,
        holds: false,
        reversed_orientation_holds: false,
    };
    if !report.hypotheses.binary {
        return Ok(report);
    }
    let part = partition_distribution(p_j, &bayes_conditional(p_i))?;
    let (Some(right), Some(wrong)) = (&part.correct, &part.incorrect) else {
        return Ok(report);
    };
    let mass = |p: &DiscreteJoint| {
        let zy = p.marginal_zy();
        [zy[1][0], zy[1][1]]
    };
    let z_uniform = |p: &DiscreteJoint| {
        let zy = p.marginal_zy();
        is_uniform(&zy.iter().map(|r| r.iter().sum::<f64>()).collect::<Vec<_>>())
    };
    let (w, r) = (mass(wrong), mass(right));
    report.degenerate = false;
    report.uniform_z_within_partitions = z_uniform(right) && z_uniform(wrong);
    report.incorrect_mass = Some(w);
    report.correct_mass = Some(r);
    report.holds = w[1] < r[1] && w[0] > r[0];
    report.reversed_orientation_holds = w[1] > r[1] && w[0] < r[0];
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchOrderingResult {
    /// `None` when a slice is empty.
    pub fraction_satisfied: Option<f64>,
    pub degenerate: bool,
}

/// Draws `n` values from `probs` and returns the count per value.
fn multinomial(rng: &mut Rng, n: u64, probs: &[f64]) -> Vec<u64> {
    let mut counts = vec![0; probs.len()];
    let mut left = n;
    let mut mass = 1.0;
    for (k, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == probs.len() || mass <= 0.0 {
            counts[k] = left;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(left, q).expect("probability in [0,1]").sample(rng);
        counts[k] = draw;
        left -= draw;
        mass -= p;
    }
    counts
}

/// Monte Carlo estimate of how often two batches from the right side of
/// `part` (label `y`) have closer mean one-hot `Z` than a right batch and a
/// wrong batch. Ties count as failures.
pub fn simulate_theorem1(
    part: &PartitionedJoint,
    y: usize,
    batch_size: usize,
    trials: usize,
    seed: u64,
) -> Result<BatchOrderingResult> {
    if batch_size == 0 || trials == 0 {
        return Err(Error::Config("batch_size and trials must be positive".into()));
    }
    let degenerate = BatchOrderingResult {
        fraction_satisfied: None,
        degenerate: true,
    };
    let (Some(right), Some(wrong)) = (&part.correct, &part.incorrect) else {
        return Ok(degenerate);
    };
    if y >= right.card[2] {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_classes: right.card[2],
        });
    }
    let (Some(pr), Some(pw)) = (right.z_given_y()[y].clone(), wrong.z_given_y()[y].clone()) else {
        return Ok(degenerate);
    };
    let mut rng = rng_from_seed(seed);
    let n = batch_size as u64;
    let inv = 1.0 / batch_size as f64;
    let mut hits = 0usize;
    for _ in 0..trials {
        let a = multinomial(&mut rng, n, &pr);
        let b = multinomial(&mut rng, n, &pr);
        let c = multinomial(&mut rng, n, &pw);
        let d2 = |u: &[u64], v: &[u64]| {
            u.iter()
                .zip(v)
                .map(|(&s, &t)| {
                    let d = (s as f64 - t as f64) * inv;
                    d * d
                })
                .sum::<f64>()
        };
        if d2(&a, &b) < d2(&a, &c) {
            hits += 1;
        }
    }
    Ok(BatchOrderingResult {
        fraction_satisfied: Some(hits as f64 / trials as f64),
        degenerate: false,
    })
}

/// Binary joint with `P(y) = 1/2`, `P(c = y | y) = s`, `P(z = y | y) = a`
/// and `Z` independent of `C` given `Y`.
pub fn symmetric_joint(agreement: f64, stable: f64) -> Result<DiscreteJoint> {
    if !(0.0..=1.0).contains(&agreement) || !(0.0..=1.0).contains(&stable) {
        return Err(Error::Config(format!("rates ({agreement}, {stable}) outside [0,1]")));
    }
    let mut probs = Vec::with_capacity(8);
    for c in 0..2 {
        for z in 0..2 {
            for y in 0..2 {
                let pc = if c == y { stable } else { 1.0 - stable };
                let pz = if z == y { agreement } else { 1.0 - agreement };
                probs.push(0.5 * pc * pz);
            }
        }
    }
    DiscreteJoint::new([2, 2, 2], probs)
}

/// One fuzzed environment pair; `a_i > a_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzPair {
    pub a_i: f64,
    pub a_j: f64,
    pub stable: f64,
}

impl FuzzPair {
    pub fn joints(&self) -> Result<(DiscreteJoint, DiscreteJoint)> {
        Ok((symmetric_joint(self.a_i, self.stable)?, symmetric_joint(self.a_j, self.stable)?))
    }
}

/// Draws pairs with agreement in `[0.55, 0.95]`, a shared stable rate in
/// `[0.6, 0.9]`, and rejects those without a covariance gap. Every returned
/// pair satisfies [`PairHypotheses::all`].
pub fn fuzz_pairs(seed: u64, count: usize) -> Result<Vec<FuzzPair>> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a: f64 = rng.gen_range(0.55..=0.95);
        let b: f64 = rng.gen_range(0.55..=0.95);
        let stable = rng.gen_range(0.6..=0.9);
        let pair = FuzzPair {
            a_i: a.max(b),
            a_j: a.min(b),
            stable,
        };
        let (pi, pj) = pair.joints()?;
        if PairHypotheses::evaluate(&pi, &pj).all() {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Random joint with independent exponential weights.
pub fn random_joint(card: [usize; 3], rng: &mut Rng) -> Result<DiscreteJoint> {
    let len = card.iter().product();
    let w: Vec<f64> = (0..len).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    DiscreteJoint::from_weights(card, w)
}

/// Random conditional `P(y | c, z)`.
pub fn random_conditional(card: [usize; 3], rng: &mut Rng) -> Result<Conditional> {
    let mut probs = Vec::with_capacity(card.iter().product());
    for _ in 0..card[0] * card[1] {
        let w: Vec<f64> = (0..card[2]).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let s: f64 = w.iter().sum();
        let mut row: Vec<f64> = w.iter().map(|v| v / s).collect();
        // absorb rounding so the row sums to one
        let head: f64 = row[..card[2] - 1].iter().sum();
        row[card[2] - 1] = (1.0 - head).max(0.0);
        probs.extend(row);
    }
    Conditional::new(card, probs)
}

/// Pooled batch-mean ordering fraction over a fuzz suite (both labels of every pair,
/// partition of `P_j` under the Bayes classifier of `P_i`).
pub fn batch_ordering_suite_fraction(pairs: &[FuzzPair], batch_size: usize, trials: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut runs = 0usize;
    for (k, pair) in pairs.iter().enumerate() {
        let (pi, pj) = pair.joints()?;
        let part = partition_distribution(&pj, &bayes_conditional(&pi))?;
        for y in 0..2 {
            let s = derive_seed(seed, &[k as u64, y as u64, batch_size as u64]);
            if let Some(f) = simulate_theorem1(&part, y, batch_size, trials, s)?.fraction_satisfied {
                total += f;
                runs += 1;
            }
        }
    }
    if runs == 0 {
        return Err(Error::Degenerate("every suite slice was empty".into()));
    }
    Ok(total / runs as f64)
}

/// Batch sizes swept by the batch-mean ordering check.
pub const BATCH_SWEEP_SIZES: [usize; 4] = [4, 16, 64, 256];
/// Pairs in the standard fuzz suite used for the batch-size sweep.
pub const BATCH_SWEEP_PAIRS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckCount {
    pub checked: usize,
    pub passed: usize,
    pub pass: bool,
}

impl CheckCount {
    fn new(checked: usize, passed: usize) -> Self {
        Self {
            checked,
            passed,
            pass: checked > 0 && checked == passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSummary {
    pub count: CheckCount,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMeanSummary {
    pub count: CheckCount,
    pub reversed_orientation_passed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOrderingSummary {
    pub pairs: usize,
    pub trials: usize,
    pub batch_sizes: Vec<usize>,
    pub fractions: Vec<f64>,
    pub monotone_within_slack: bool,
    pub final_at_least_095: bool,
    pub pass: bool,
}

/// Everything `theory-check` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub prop1: MixtureSummary,
    pub prop2: CheckCount,
    pub cor1: ConditionalMeanSummary,
    pub thm1: BatchOrderingSummary,
}

impl TheoryReport {
    pub fn pass(&self) -> bool {
        self.prop1.count.pass && self.prop2.pass && self.cor1.count.pass && self.thm1.pass
    }
}

/// Mixture identity check on `count` random `(joint, conditional)` pairs
/// over varying small cardinalities with binary `Y`.
pub fn check_mixture_fuzz(seed: u64, count: usize) -> Result<MixtureSummary> {
    let mut rng = rng_from_seed(seed);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let card = [rng.gen_range(1..=4), rng.gen_range(2..=4), 2];
        let p = random_joint(card, &mut rng)?;
        let cond = random_conditional(card, &mut rng)?;
        let part = partition_distribution(&p, &cond)?;
        let err = part
            .reconstruct()
            .iter()
            .zip(p.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        if err <= EXACT_TOL {
            passed += 1;
        }
    }
    Ok(MixtureSummary {
        count: CheckCount::new(count, passed),
        max_abs_error: worst,
    })
}

/// Runs the full set of exact and Monte Carlo checks.
pub fn run_theory_checks(seed: u64, batch_trials: usize) -> Result<TheoryReport> {
    let prop1 = check_mixture_fuzz(derive_seed(seed, &[1]), 1000)?;

    let pairs = fuzz_pairs(derive_seed(seed, &[2]), 1000)?;
    let mut p2 = 0;
    let mut c1 = 0;
    let mut c1_rev = 0;
    for pair in &pairs {
        let (pi, pj) = pair.joints()?;
        p2 += check_prop2(&pi, &pj)?.holds as usize;
        let r = check_cor1(&pi, &pj)?;
        c1 += r.holds as usize;
        c1_rev += r.reversed_orientation_holds as usize;
    }

    let suite = fuzz_pairs(derive_seed(seed, &[3]), BATCH_SWEEP_PAIRS)?;
    let mut fractions = Vec::new();
    for &b in &BATCH_SWEEP_SIZES {
        fractions.push(batch_ordering_suite_fraction(&suite, b, batch_trials, derive_seed(seed, &[4]))?);
    }
    let monotone = fractions.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let final_ok = fractions.last().is_some_and(|&f| f >= 0.95);
    Ok(TheoryReport {
        prop1,
        prop2: CheckCount::new(pairs.len(), p2),
        cor1: ConditionalMeanSummary {
            count: CheckCount::new(pairs.len(), c1),
            reversed_orientation_passed: c1_rev,
        },
        thm1: BatchOrderingSummary {
            pairs: suite.len(),
            trials: batch_trials,
            batch_sizes: BATCH_SWEEP_SIZES.to_vec(),
            fractions,
            monotone_within_slack: monotone,
            final_at_least_095: final_ok,
            pass: monotone && final_ok,
        },
    })
}
