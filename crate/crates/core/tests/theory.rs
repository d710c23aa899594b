use proptest::prelude::*;
use tofu_core::numerics::rng_from_seed;
use tofu_core::theory::*;

/// Cell-by-cell partition computed with plain loops.
fn hand_partition(p: &DiscreteJoint, cond: &Conditional) -> (f64, Vec<f64>, Vec<f64>) {
    let [kc, kz, ky] = p.card();
    let (mut right, mut wrong) = (Vec::new(), Vec::new());
    for c in 0..kc {
        for z in 0..kz {
            for y in 0..ky {
                right.push(p.get(c, z, y) * cond.get(c, z, y));
                wrong.push(p.get(c, z, y) * cond.get(c, z, 1 - y));
            }
        }
    }
    let a: f64 = right.iter().sum();
    let b: f64 = wrong.iter().sum();
    (a, right.iter().map(|v| v / a).collect(), wrong.iter().map(|v| v / b).collect())
}

/// `E[ZY] - E[Z]E[Y]` by a double sum over all cells.
fn brute_cov(p: &DiscreteJoint) -> f64 {
    let [kc, kz, ky] = p.card();
    let mut cells = Vec::new();
    for c in 0..kc {
        for z in 0..kz {
            for y in 0..ky {
                cells.push((z as f64, y as f64, p.get(c, z, y)));
            }
        }
    }
    let ezy: f64 = cells.iter().map(|(z, y, m)| z * y * m).sum();
    let ez: f64 = cells.iter().map(|(z, _, m)| z * m).sum();
    let ey: f64 = cells.iter().map(|(_, y, m)| y * m).sum();
    ezy - ez * ey
}

#[test]
fn partition_matches_hand_summation() {
    let mut rng = rng_from_seed(11);
    for _ in 0..50 {
        let p = random_joint([2, 2, 2], &mut rng).unwrap();
        let cond = random_conditional([2, 2, 2], &mut rng).unwrap();
        let part = partition_distribution(&p, &cond).unwrap();
        let (a, r, w) = hand_partition(&p, &cond);
        assert!((part.alpha - a).abs() < 1e-14);
        for (x, y) in part.correct.unwrap().probs().iter().zip(&r) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in part.incorrect.unwrap().probs().iter().zip(&w) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}

#[test]
fn covariance_examples() {
    // product joint
    let pz = [0.3, 0.7];
    let py = [0.5, 0.5];
    let mut probs = Vec::new();
    for z in 0..2 {
        for y in 0..2 {
            probs.push(pz[z] * py[y]);
        }
    }
    let indep = DiscreteJoint::new([1, 2, 2], probs).unwrap();
    assert!(covariance_zy(&indep).abs() < 1e-14);

    let p = symmetric_joint(0.9, 0.7).unwrap();
    let cov = covariance_zy(&p);
    assert!((cov - brute_cov(&p)).abs() < 1e-14);
    assert!((cov - (0.9 * 0.5 - 0.25)).abs() < 1e-14);
    assert!((covariance_zy_reduced(&p).unwrap() - cov).abs() < 1e-14);

    // swap z <-> 1 - z
    let mut swapped = vec![0.0; 8];
    for c in 0..2 {
        for z in 0..2 {
            for y in 0..2 {
                swapped[(c * 2 + (1 - z)) * 2 + y] = p.get(c, z, y);
            }
        }
    }
    let s = DiscreteJoint::new([2, 2, 2], swapped).unwrap();
    assert!((covariance_zy(&s) + cov).abs() < 1e-14);
}

#[test]
fn cross_covariance_on_09_vs_08() {
    let pi = symmetric_joint(0.9, 0.75).unwrap();
    let pj = symmetric_joint(0.8, 0.75).unwrap();
    let r = check_prop2(&pi, &pj).unwrap();
    assert!(r.hypotheses_satisfied, "{r:?}");
    assert!(r.cov_cross_on_j.unwrap() < 0.0);
    assert!(r.cov_cross_on_i.unwrap() > 0.0);
    assert!(r.holds);
    let c = check_cor1(&pi, &pj).unwrap();
    assert!(c.holds && !c.degenerate);
    assert!(!c.reversed_orientation_holds);
}

#[test]
fn fuzzed_pairs_pass_covariance_and_mean_checks() {
    let pairs = fuzz_pairs(5, 1000).unwrap();
    for pair in &pairs {
        let (pi, pj) = pair.joints().unwrap();
        assert!(check_prop2(&pi, &pj).unwrap().holds, "{pair:?}");
    }
    for pair in &pairs[..500] {
        let (pi, pj) = pair.joints().unwrap();
        assert!(check_cor1(&pi, &pj).unwrap().holds, "{pair:?}");
    }
}

#[test]
fn batch_one_is_near_chance() {
    let pairs = fuzz_pairs(1, 20).unwrap();
    let f = batch_ordering_suite_fraction(&pairs, 1, 500, 0).unwrap();
    // documented behavior: ties dominate at batch size one
    assert!(f < 0.8, "{f}");
}

#[test]
fn batch_ordering_fraction_grows_with_batch() {
    let pairs = fuzz_pairs(2, 10).unwrap();
    let f4 = batch_ordering_suite_fraction(&pairs, 4, 1000, 0).unwrap();
    let f256 = batch_ordering_suite_fraction(&pairs, 256, 1000, 0).unwrap();
    assert!(f256 > f4);
    assert!(f256 >= 0.95, "{f256}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mixture_identity(seed in any::<u64>(), kc in 1usize..4, kz in 2usize..4) {
        let mut rng = rng_from_seed(seed);
        let card = [kc, kz, 2];
        let p = random_joint(card, &mut rng).unwrap();
        let cond = random_conditional(card, &mut rng).unwrap();
        let part = partition_distribution(&p, &cond).unwrap();
        for (a, b) in part.reconstruct().iter().zip(p.probs()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_equals_brute_force(seed in any::<u64>(), kz in 2usize..5, ky in 2usize..4) {
        let mut rng = rng_from_seed(seed);
        let p = random_joint([2, kz, ky], &mut rng).unwrap();
        prop_assert!((covariance_zy(&p) - brute_cov(&p)).abs() < 1e-12);
    }

    #[test]
    fn reduced_form_agrees(a in 0.0f64..1.0, s in 0.0f64..1.0) {
        let p = symmetric_joint(a, s).unwrap();
        prop_assert!((covariance_zy_reduced(&p).unwrap() - covariance_zy(&p)).abs() < 1e-12);
    }
}
