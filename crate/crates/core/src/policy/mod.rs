//! The inlining agent: a small network over call-site features, rollouts
//! over the evolving module, training and deployment.

mod autotune;
mod evaluate;
mod train;

pub use autotune::{autotune_regions, AutotuneResult, EXHAUSTIVE_GRID};
pub use evaluate::{
    autotune_report, deploy, evaluate, EvalConfig, EvalReport, ProgramEval, RegionReport,
    RegionRow, Strategy, StrategyResult, HEURISTIC_COST_THRESHOLD,
};
pub use train::{
    log_likelihood, normalize_rewards, policy_gradient, train_policy, IterationRecord,
    PolicyTrainOutcome, TrainerConfig,
};

use std::collections::HashSet;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{expect_schema, Error, Result};
use crate::features::{CalleeFeatureVector, ModuleFeatures};
use crate::ir2perf::Ir2PerfModel;
use crate::nn::{Dense, Mlp, DEFAULT_LEAKY_SLOPE};
use crate::perf_oracle::CostModel;
use crate::progmodel::{apply_inline, enumerate_callsites, CallSite, Module, SiteId};

pub const POLICY_SCHEMA: &str = "policy/1";
pub const POLICY_DIMS: [usize; 4] = [CalleeFeatureVector::LEN, 64, 64, 2];
/// Inlining stops once the module outgrows its original size this many times.
pub const SIZE_GUARD_FACTOR: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolicyRepr", try_from = "PolicyRepr")]
pub struct PolicyParams {
    pub net: Mlp,
}

#[derive(Serialize, Deserialize)]
struct PolicyRepr {
    schema: String,
    dims: Vec<usize>,
    layers: Vec<Dense>,
    leaky_slope: f64,
    input_transform: String,
    tie_rule: String,
    forced_no_rule: String,
}

impl From<PolicyParams> for PolicyRepr {
    fn from(p: PolicyParams) -> Self {
        PolicyRepr {
            schema: POLICY_SCHEMA.into(),
            dims: p.net.dims(),
            layers: p.net.layers,
            leaky_slope: p.net.leaky_slope,
            input_transform: "signed-log1p".into(),
            tie_rule: "no-inline".into(),
            forced_no_rule: "direct-recursion".into(),
        }
    }
}

impl TryFrom<PolicyRepr> for PolicyParams {
    type Error = String;

    fn try_from(r: PolicyRepr) -> Result<Self, String> {
        let p = PolicyParams {
            net: Mlp {
                layers: r.layers,
                leaky_slope: r.leaky_slope,
            },
        };
        if p.net.dims() != r.dims {
            return Err(format!("dims {:?} do not match the layers", r.dims));
        }
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

impl PolicyParams {
    pub fn zeros() -> Self {
        PolicyParams {
            net: Mlp::zeros(&POLICY_DIMS, DEFAULT_LEAKY_SLOPE),
        }
    }

    /// He-initialized hidden layers; the output layer is scaled down so
    /// both actions start out near-equally likely.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut net = Mlp::random(&POLICY_DIMS, DEFAULT_LEAKY_SLOPE, rng);
        net.layers
            .last_mut()
            .expect("output layer")
            .weights
            .mapv_inplace(|w| 0.1 * w);
        PolicyParams { net }
    }

    /// [`PolicyParams::random`] from a ChaCha stream seeded with `seed`.
    pub fn seeded(seed: u64) -> Self {
        Self::random(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.check_dims(&POLICY_DIMS)?;
        if !self.net.is_finite() {
            return Err(Error::Invariant("non-finite policy parameter".into()));
        }
        Ok(())
    }

    pub fn logits(&self, x: &CalleeFeatureVector) -> [f64; 2] {
        let out = self.net.forward_one(&policy_input(x));
        [out[0], out[1]]
    }

    /// Log-probabilities of (no-inline, inline).
    pub fn log_probs(&self, x: &CalleeFeatureVector) -> [f64; 2] {
        log_softmax(self.logits(x))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("");
        expect_schema(POLICY_SCHEMA, found)?;
        serde_json::from_value(value).map_err(|e| Error::Invariant(e.to_string()))
    }
}

/// Signed `log1p`, compressing counts and costs that span decades.
pub fn policy_input(x: &CalleeFeatureVector) -> [f64; CalleeFeatureVector::LEN] {
    x.to_array().map(|v| v.signum() * v.abs().ln_1p())
}

pub(crate) fn input_matrix<'a, I>(xs: I) -> Array2<f64>
where
    I: ExactSizeIterator<Item = &'a CalleeFeatureVector>,
{
    let n = xs.len();
    let mut m = Array2::zeros((n, CalleeFeatureVector::LEN));
    for (i, x) in xs.enumerate() {
        for (j, v) in policy_input(x).into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

pub fn log_softmax(l: [f64; 2]) -> [f64; 2] {
    let mx = l[0].max(l[1]);
    let lse = mx + ((l[0] - mx).exp() + (l[1] - mx).exp()).ln();
    [l[0] - lse, l[1] - lse]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Argmax,
}

/// Chooses an action; ties in argmax mode go to no-inline. Returns the
/// action and its log-probability under `p`.
pub fn act<R: RngCore>(
    p: &PolicyParams,
    x: &CalleeFeatureVector,
    mode: ActMode,
    rng: &mut R,
) -> (bool, f64) {
    let l = p.logits(x);
    let lp = log_softmax(l);
    let inline = match mode {
        ActMode::Argmax => l[1] > l[0],
        ActMode::Sample => rng.random::<f64>() < lp[1].exp(),
    };
    (inline, lp[usize::from(inline)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub site: SiteId,
    pub caller: String,
    pub callee: String,
    pub features: CalleeFeatureVector,
    pub action: bool,
    /// Log-probability of `action`; 0 for forced steps.
    pub log_prob: f64,
    /// Direct recursion or the size guard forced no-inline.
    pub forced: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub total_reward: f64,
    pub guard_triggered: bool,
}

impl Trajectory {
    pub fn decisions(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| !s.forced)
    }
}

/// Visits every call site of the evolving module, sites created by
/// inlining included, asking `decide` for each one that is not forced.
pub fn walk<D>(m: &Module, cm: &CostModel, mut decide: D) -> Result<(Module, Trajectory)>
where
    D: FnMut(&ModuleFeatures, &CallSite, &CalleeFeatureVector) -> Result<(bool, f64)>,
{
    let limit = SIZE_GUARD_FACTOR * m.instruction_count().max(1);
    let mut cur = m.clone();
    let mut visited: HashSet<SiteId> = HashSet::new();
    let mut traj = Trajectory::default();
    loop {
        let Some(cs) = enumerate_callsites(&cur)
            .into_iter()
            .find(|c| !visited.contains(&c.id))
        else {
            break;
        };
        visited.insert(cs.id);
        let feats = ModuleFeatures::new(&cur)?;
        let x = feats.callsite_features(&cs, cm)?;
        let over = cur.instruction_count() > limit;
        traj.guard_triggered |= over;
        let mut step = Step {
            site: cs.id,
            caller: cs.caller.clone(),
            callee: cs.callee.clone(),
            features: x,
            action: false,
            log_prob: 0.0,
            forced: cs.is_direct_recursion() || over,
        };
        if !step.forced {
            let (a, lp) = decide(&feats, &cs, &step.features)?;
            step.action = a;
            step.log_prob = lp;
        }
        drop(feats);
        if step.action {
            match apply_inline(&cur, cs.id) {
                Ok(next) => cur = next,
                Err(Error::RefusedInline(_)) => {}
                Err(e) => return Err(e),
            }
        }
        traj.steps.push(step);
    }
    Ok((cur, traj))
}

/// Source of the scalar reward of a finished rollout.
pub trait RewardModel: Sync {
    fn total_reward(&self, m: &Module) -> Result<f64>;
}

/// Sum of predicted speedups over every function of the module.
impl RewardModel for Ir2PerfModel {
    fn total_reward(&self, m: &Module) -> Result<f64> {
        let feats = ModuleFeatures::new(m)?;
        let mut total = 0.0;
        for f in m.functions.keys() {
            total += self.predict_features(&feats.function_features(f)?);
        }
        Ok(total)
    }
}

/// Rollout acting with `p`; log-probabilities are recorded under `base`
/// (equal to `p` outside training).
pub fn rollout<R: RngCore>(
    m: &Module,
    p: &PolicyParams,
    base: &PolicyParams,
    reward: &dyn RewardModel,
    cm: &CostModel,
    mode: ActMode,
    rng: &mut R,
) -> Result<(Trajectory, Module)> {
    let (out, mut traj) = walk(m, cm, |_, _, x| {
        let (a, _) = act(p, x, mode, rng);
        Ok((a, base.log_probs(x)[usize::from(a)]))
    })?;
    traj.total_reward = reward.total_reward(&out)?;
    Ok((traj, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub site: SiteId,
    pub caller: String,
    pub callee: String,
    pub features: CalleeFeatureVector,
    pub inline: bool,
    pub forced: bool,
}

/// Deterministic deployment: argmax decisions, no reward model involved.
pub fn advise(m: &Module, p: &PolicyParams, cm: &CostModel) -> Result<(Module, Vec<Decision>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, traj) = walk(m, cm, |_, _, x| Ok(act(p, x, ActMode::Argmax, &mut rng)))?;
    let log = traj
        .steps
        .into_iter()
        .map(|s| Decision {
            site: s.site,
            caller: s.caller,
            callee: s.callee,
            features: s.features,
            inline: s.action,
            forced: s.forced,
        })
        .collect();
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::progmodel::fixtures::*;
    use crate::progmodel::Opcode;

    struct Constant(f64);

    impl RewardModel for Constant {
        fn total_reward(&self, _: &Module) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn chain() -> Module {
        Module::new(
            "main",
            vec![
                straight("main", 0, vec![op_call(0, "a", 0), Opcode::FAdd]),
                straight("a", 1, vec![op_call(1, "b", 0), op_call(2, "b", 1)]),
                straight("b", 0, vec![Opcode::FMul]),
            ],
        )
    }

    #[test]
    fn zero_policy_is_indifferent() {
        let p = PolicyParams::zeros();
        let x = CalleeFeatureVector::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, lp) = act(&p, &x, ActMode::Sample, &mut rng);
        assert_eq!(lp, 0.5f64.ln());
        assert_eq!(act(&p, &x, ActMode::Argmax, &mut rng), (false, 0.5f64.ln()));
    }

    #[test]
    fn argmax_prefers_larger_logit() {
        let mut p = PolicyParams::zeros();
        p.net.layers[2].bias[0] = 2.0;
        p.net.layers[2].bias[1] = -1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = act(&p, &CalleeFeatureVector::default(), ActMode::Argmax, &mut rng);
        assert!(!a);
        let lp = log_softmax([2.0, -1.0]);
        assert!((lp[0].exp() + lp[1].exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_policy_advice_leaves_module_unchanged() {
        let m = chain();
        let (out, log) = advise(&m, &PolicyParams::zeros(), &CostModel::default()).unwrap();
        assert_eq!(out, m);
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|d| !d.inline));
    }

    #[test]
    fn inline_everything_visits_cloned_sites() {
        let m = chain();
        let (out, traj) = walk(&m, &CostModel::default(), |_, _, _| Ok((true, 0.0))).unwrap();
        // bottom-up: a's two sites first, so the clone of `a` carries no calls
        assert_eq!(traj.steps.len(), 3);
        assert_eq!(out.functions["main"].instruction_count(), 4);
        assert_eq!(out.call_count(), 0);
        assert!(!traj.guard_triggered);
    }

    #[test]
    fn recursion_is_forced_no() {
        let m = Module::new(
            "f",
            vec![straight("f", 0, vec![op_call(0, "f", 0), Opcode::FAdd])],
        );
        let (out, traj) = walk(&m, &CostModel::default(), |_, _, _| Ok((true, 0.0))).unwrap();
        assert_eq!(out, m);
        assert!(traj.steps[0].forced);
    }

    #[test]
    fn zero_site_rollout_reward_is_unchanged_module() {
        let m = Module::new("main", vec![straight("main", 0, vec![Opcode::FAdd])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyParams::zeros();
        let (traj, out) = rollout(
            &m,
            &p,
            &p,
            &Constant(2.5),
            &CostModel::default(),
            ActMode::Sample,
            &mut rng,
        )
        .unwrap();
        assert!(traj.steps.is_empty());
        assert_eq!(traj.total_reward, 2.5);
        assert_eq!(out, m);
    }

    #[test]
    fn policy_json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = PolicyParams::random(&mut rng);
        let back = PolicyParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
