use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{input_matrix, rollout, ActMode, PolicyParams, RewardModel, Step, Trajectory};
use crate::error::{Error, Result};
use crate::nn::flatten_gradients;
use crate::perf_oracle::CostModel;
use crate::progmodel::Module;
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Step size α.
    pub learning_rate: f64,
    /// Perturbation scale σ.
    pub sigma: f64,
    /// Rollouts per iteration.
    pub rollouts: usize,
    pub iterations: usize,
    pub normalize_rewards: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 0.02,
            sigma: 0.02,
            rollouts: 8,
            iterations: 200,
            normalize_rewards: true,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be finite", self.sigma)));
        }
        if self.rollouts == 0 {
            return Err(Error::Config("at least one rollout per iteration".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub program: String,
    pub mean_reward: f64,
    pub min_reward: f64,
    pub max_reward: f64,
    /// Decisions taken across all rollouts.
    pub decisions: usize,
    pub inline_fraction: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct PolicyTrainOutcome {
    pub params: PolicyParams,
    pub history: Vec<IterationRecord>,
    pub skipped_iterations: usize,
    /// Rollouts in which the size guard stopped inlining.
    pub guard_triggers: usize,
}

/// Centers and scales to unit population deviation; a constant vector
/// maps to zeros.
pub fn normalize_rewards(r: &[f64]) -> Vec<f64> {
    if r.iter().all(|v| *v == r[0]) {
        return vec![0.0; r.len()];
    }
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    r.iter().map(|v| (v - mean) / (std + 1e-8)).collect()
}

/// `Σ_i w_i Σ_t log π(a_it | s_it)` over the unforced steps.
pub fn log_likelihood(p: &PolicyParams, batches: &[(&[Step], f64)]) -> f64 {
    batches
        .iter()
        .map(|(steps, w)| {
            w * steps
                .iter()
                .filter(|s| !s.forced)
                .map(|s| p.log_probs(&s.features)[usize::from(s.action)])
                .sum::<f64>()
        })
        .sum()
}

/// Gradient of [`log_likelihood`] with respect to the flattened parameters.
pub fn policy_gradient(p: &PolicyParams, batches: &[(&[Step], f64)]) -> Vec<f64> {
    let mut steps = Vec::new();
    let mut weights = Vec::new();
    for (s, w) in batches {
        for st in s.iter().filter(|st| !st.forced) {
            steps.push(st);
            weights.push(*w);
        }
    }
    if steps.is_empty() {
        return vec![0.0; p.net.param_count()];
    }
    let xs = input_matrix(steps.iter().map(|s| &s.features));
    let cache = p.net.forward_cached(xs.view());
    let logits = cache.output();
    let mut grad = Array2::zeros((steps.len(), 2));
    for (k, s) in steps.iter().enumerate() {
        let lp = super::log_softmax([logits[[k, 0]], logits[[k, 1]]]);
        let a = usize::from(s.action);
        for j in 0..2 {
            let onehot = if j == a { 1.0 } else { 0.0 };
            grad[[k, j]] = weights[k] * (onehot - lp[j].exp());
        }
    }
    flatten_gradients(&p.net.backward(&cache, grad))
}

/// Perturbed-parameter rollouts with the log-likelihood update
/// `γ ← γ + α/n Σ_i R_i Σ_t ∇ log π_γ(a_it | s_it)`.
///
/// Iteration `k` rolls out `corpus[k mod len]` `n` times; rollout `i` acts
/// under `γ + σ s_i` with its own seed stream.
pub fn train_policy(
    tc: &TrainerConfig,
    corpus: &[(String, Module)],
    init: PolicyParams,
    reward: &dyn RewardModel,
    cm: &CostModel,
) -> Result<PolicyTrainOutcome> {
    tc.validate()?;
    init.validate()?;
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty training corpus".into()));
    }
    let mut params = init;
    let mut history = Vec::with_capacity(tc.iterations);
    let mut skipped_iterations = 0;
    let mut guard_triggers = 0;
    let n = tc.rollouts;
    for it in 0..tc.iterations {
        let (name, module) = &corpus[it % corpus.len()];
        let iter_seed = derive_seed(tc.seed, it as u64);
        let base_flat = params.net.to_flat();
        let rollouts: Vec<Trajectory> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(iter_seed, i as u64));
                let mut perturbed = params.clone();
                let flat: Vec<f64> = base_flat
                    .iter()
                    .map(|g| {
                        let s: f64 = StandardNormal.sample(&mut rng);
                        g + tc.sigma * s
                    })
                    .collect();
                perturbed.net.set_flat(&flat);
                rollout(module, &perturbed, &params, reward, cm, ActMode::Sample, &mut rng)
                    .map(|(t, _)| t)
            })
            .collect::<Result<_>>()?;

        let raw: Vec<f64> = rollouts.iter().map(|t| t.total_reward).collect();
        guard_triggers += rollouts.iter().filter(|t| t.guard_triggered).count();
        let decisions: usize = rollouts.iter().map(|t| t.decisions().count()).sum();
        let inlined: usize = rollouts
            .iter()
            .map(|t| t.decisions().filter(|s| s.action).count())
            .sum();
        let skipped = decisions == 0;
        history.push(IterationRecord {
            iteration: it,
            program: name.clone(),
            mean_reward: raw.iter().sum::<f64>() / n as f64,
            min_reward: raw.iter().copied().fold(f64::INFINITY, f64::min),
            max_reward: raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            decisions,
            inline_fraction: if skipped { 0.0 } else { inlined as f64 / decisions as f64 },
            skipped,
        });
        if skipped {
            skipped_iterations += 1;
            continue;
        }
        let weights = if tc.normalize_rewards {
            normalize_rewards(&raw)
        } else {
            raw
        };
        let batches: Vec<(&[Step], f64)> = rollouts
            .iter()
            .zip(&weights)
            .map(|(t, w)| (t.steps.as_slice(), *w))
            .collect();
        let grad = policy_gradient(&params, &batches);
        let scale = tc.learning_rate / n as f64;
        let updated: Vec<f64> = base_flat
            .iter()
            .zip(&grad)
            .map(|(g, d)| g + scale * d)
            .collect();
        params.net.set_flat(&updated);
        if !params.net.is_finite() {
            return Err(Error::Invariant(format!(
                "policy diverged at iteration {it}; lower the learning rate"
            )));
        }
    }
    if skipped_iterations > 0 {
        log::warn!("{skipped_iterations} iterations had no decisions and were skipped");
    }
    Ok(PolicyTrainOutcome {
        params,
        history,
        skipped_iterations,
        guard_triggers,
    })
}
