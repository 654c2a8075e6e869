mod common;

use perfinline::perf_oracle::CostModel;
use perfinline::policy::{
    advise, log_likelihood, normalize_rewards, policy_gradient, rollout, walk, ActMode,
    PolicyParams, RewardModel, Step, Trajectory,
};
use perfinline::progmodel::{generate_program, GenConfig, Module};
use perfinline::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-6;
const DIRECTIONS: usize = 16;

struct CallCount;

impl RewardModel for CallCount {
    fn total_reward(&self, m: &Module) -> Result<f64> {
        Ok(-(m.call_count() as f64))
    }
}

fn trajectories(seed: u64) -> (PolicyParams, Vec<Trajectory>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = PolicyParams::random(&mut rng);
    let cm = CostModel::default();
    let mut trajs = Vec::new();
    let mut gen_seed = seed * 1000;
    while trajs.len() < 4 {
        gen_seed += 1;
        let m = generate_program(&GenConfig {
            seed: gen_seed,
            ..GenConfig::default()
        })
        .unwrap();
        let (t, _) = rollout(&m, &p, &p, &CallCount, &cm, ActMode::Sample, &mut rng).unwrap();
        if t.decisions().count() > 0 {
            trajs.push(t);
        }
    }
    let weights = (0..trajs.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    (p, trajs, weights)
}

/// Relative error of the update direction, sketched through directional
/// derivatives along random unit directions.
fn fd_error(seed: u64) -> f64 {
    let (p, trajs, weights) = trajectories(seed);
    let batches: Vec<(&[Step], f64)> = trajs
        .iter()
        .zip(&weights)
        .map(|(t, w)| (t.steps.as_slice(), *w))
        .collect();
    let grad = policy_gradient(&p, &batches);
    let flat = p.net.to_flat();
    let mut probe = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut objective = |d: &[f64], sign: f64| {
        let shifted: Vec<f64> = flat.iter().zip(d).map(|(t, v)| t + sign * H * v).collect();
        probe.net.set_flat(&shifted);
        log_likelihood(&probe, &batches)
    };
    let (mut diff, mut norm) = (0.0, 0.0);
    for _ in 0..DIRECTIONS {
        let d: Vec<f64> = (0..flat.len()).map(|_| rng.sample(StandardNormal)).collect();
        let len = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d: Vec<f64> = d.into_iter().map(|v| v / len).collect();
        let numeric = (objective(&d, 1.0) - objective(&d, -1.0)) / (2.0 * H);
        let exact: f64 = grad.iter().zip(&d).map(|(g, v)| g * v).sum();
        diff += (exact - numeric).powi(2);
        norm += numeric.powi(2);
    }
    (diff / norm).sqrt()
}

#[test]
fn update_direction_matches_finite_differences() {
    let worst = (0..100).map(fd_error).fold(0.0, f64::max);
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_rewards_are_standard(r in prop::collection::vec(-100.0f64..100.0, 2..32)) {
        prop_assume!(r.iter().any(|v| *v != r[0]));
        let z = normalize_rewards(&r);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((std - 1.0).abs() < 1e-6, "std {}", std);
    }

    #[test]
    fn rollouts_terminate_without_the_guard(m in common::acyclic_module(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PolicyParams::random(&mut rng);
        let (t, _) = rollout(&m, &p, &p, &CallCount, &CostModel::default(), ActMode::Sample, &mut rng).unwrap();
        prop_assert!(!t.guard_triggered);
        prop_assert!(t.steps.len() >= m.call_sites().len());
    }

    #[test]
    fn zero_policy_changes_nothing(m in common::module()) {
        let (out, log) = advise(&m, &PolicyParams::zeros(), &CostModel::default()).unwrap();
        prop_assert!(log.iter().all(|d| !d.inline));
        prop_assert_eq!(log.len(), m.call_sites().len());
        prop_assert_eq!(out, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn inline_everything_stays_finite(m in common::module()) {
        let (_, t) = walk(&m, &CostModel::default(), |_, _, _| Ok((true, 0.0))).unwrap();
        let recursive = t.steps.iter().filter(|s| s.caller == s.callee).count();
        prop_assert!(t.steps.iter().filter(|s| s.forced).count() >= recursive);
    }

    #[test]
    fn advice_is_deterministic(m in common::module(), seed in any::<u64>()) {
        let p = PolicyParams::random(&mut ChaCha8Rng::seed_from_u64(seed));
        let cm = CostModel::default();
        let (a, log_a) = advise(&m, &p, &cm).unwrap();
        let (b, log_b) = advise(&m, &p, &cm).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(log_a, log_b);
    }
}
