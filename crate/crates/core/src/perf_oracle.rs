//! Deterministic stand-in for running a program.
//!
//! Runtime is a weighted instruction sum scaled by static block frequency.
//! Calls pay a fixed overhead plus argument setup; constant arguments make
//! the callee body cheaper; a module larger than its cache budget pays a
//! uniform i-cache penalty. Those three terms are what make inlining a
//! tradeoff rather than a free win.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{expect_schema, Error, Result};
use crate::progmodel::{
    BlockId, CallGraph, Function, FunctionAnalysis, LoopTuning, Module, Opcode,
};
use crate::util::derive_seed;

pub const COSTMODEL_SCHEMA: &str = "costmodel/1";

/// Allowed unroll counts; 0 leaves the loop alone.
pub const UNROLL_GRID: [u32; 4] = [0, 2, 4, 8];
pub const INTERLEAVE_GRID: [u32; 3] = [1, 2, 4];

/// Relative spread above which a measurement is repeated.
pub const VARIANCE_LIMIT: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionWeights {
    pub fadd: f64,
    pub fsub: f64,
    pub fmul: f64,
    pub fdiv: f64,
    pub ret: f64,
    pub generic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub schema: String,
    pub weights: InstructionWeights,
    pub call_overhead: f64,
    pub per_arg_setup: f64,
    /// Callee cost reduction per constant argument.
    pub const_param_bonus: f64,
    /// Lower bound of the constant-argument multiplier.
    pub const_param_floor: f64,
    pub icache_beta: f64,
    pub trip_estimate: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            schema: COSTMODEL_SCHEMA.to_string(),
            weights: InstructionWeights {
                fadd: 2.0,
                fsub: 2.0,
                fmul: 4.0,
                fdiv: 8.0,
                ret: 1.0,
                generic: 1.0,
            },
            call_overhead: 10.0,
            per_arg_setup: 1.0,
            const_param_bonus: 0.05,
            const_param_floor: 0.5,
            icache_beta: 0.5,
            trip_estimate: 8.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        expect_schema(COSTMODEL_SCHEMA, &self.schema)?;
        let w = &self.weights;
        let positive = [
            w.fadd,
            w.fsub,
            w.fmul,
            w.fdiv,
            w.ret,
            w.generic,
            self.call_overhead,
            self.trip_estimate,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("cost weights must be positive".into()));
        }
        if self.per_arg_setup < 0.0 || self.const_param_bonus < 0.0 || self.icache_beta < 0.0 {
            return Err(Error::Config("cost coefficients must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.const_param_floor) {
            return Err(Error::Config("const_param_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn weight(&self, op: &Opcode) -> f64 {
        let w = &self.weights;
        match op {
            Opcode::FAdd => w.fadd,
            Opcode::FSub => w.fsub,
            Opcode::FMul => w.fmul,
            Opcode::FDiv => w.fdiv,
            Opcode::Ret => w.ret,
            Opcode::Generic => w.generic,
            Opcode::Call { .. } => 0.0,
        }
    }

    /// Multiplier applied to a callee body reached with `const_args`
    /// constant arguments.
    pub fn const_scale(&self, const_args: u32) -> f64 {
        (1.0 - self.const_param_bonus * f64::from(const_args)).max(self.const_param_floor)
    }

    pub fn call_cost(&self, callee_params: u32) -> f64 {
        self.call_overhead + self.per_arg_setup * f64::from(callee_params)
    }

    /// `1 + beta * max(0, size - budget) / budget`.
    pub fn icache_penalty(&self, size: u64, budget: u64) -> f64 {
        let over = size.saturating_sub(budget) as f64;
        1.0 + self.icache_beta * over / budget as f64
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cm: CostModel = serde_json::from_str(text)?;
        cm.validate()?;
        Ok(cm)
    }
}

/// Frequency-free cost of a function body: every instruction once, calls
/// at overhead plus argument setup.
pub fn static_cost(m: &Module, f: &str, cm: &CostModel) -> Result<f64> {
    let func = m.function(f)?;
    let mut cost = 0.0;
    for b in &func.blocks {
        for op in &b.instructions {
            cost += match op {
                Opcode::Call { callee, .. } => cm.call_cost(m.function(callee)?.param_count),
                other => cm.weight(other),
            };
        }
    }
    Ok(cost)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub function: String,
    /// Share of total runtime spent in the function's own code.
    pub t_func: f64,
    pub n_func: f64,
    pub total_runtime: f64,
    /// Member of a recursive SCC; its cost was cut at the cycle.
    pub in_cycle: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Runtime {
    pub total: f64,
    pub penalty: f64,
    /// Profiles of every function executed at least once, by name.
    pub profile: Vec<ProfileRecord>,
}

impl Runtime {
    pub fn record(&self, f: &str) -> Option<&ProfileRecord> {
        self.profile.iter().find(|r| r.function == f)
    }

    /// Runtime of one call of `f` (total × t / n), if it ran.
    pub fn function_runtime(&self, f: &str) -> Option<f64> {
        self.record(f)
            .and_then(|r| func_runtime(self.total, r.t_func, r.n_func).ok())
    }
}

struct CallEdge {
    callee: usize,
    freq: f64,
    scale: f64,
}

struct FunctionCost {
    /// Own cost of one invocation, call overheads included.
    self_cost: f64,
    edges: Vec<CallEdge>,
}

fn function_cost(
    f: &Function,
    m: &Module,
    index: &HashMap<&str, usize>,
    cm: &CostModel,
) -> Result<FunctionCost> {
    let analysis = FunctionAnalysis::new(f)?;
    let mut self_cost = 0.0;
    let mut edges = Vec::new();
    for b in &f.blocks {
        let freq = cm.trip_estimate.powi(analysis.loops.depth_of(b.id) as i32);
        let tuning = b.tuning.unwrap_or(LoopTuning::IDENTITY);
        let arith_div = f64::from(tuning.interleave.clamp(1, 2));
        let mut block_cost = 0.0;
        for op in &b.instructions {
            match op {
                Opcode::Call {
                    callee, const_args, ..
                } => {
                    let g = m.function(callee)?;
                    block_cost += cm.call_cost(g.param_count);
                    edges.push(CallEdge {
                        callee: index[callee.as_str()],
                        freq,
                        scale: cm.const_scale(*const_args),
                    });
                }
                op if op.is_arithmetic() => block_cost += cm.weight(op) / arith_div,
                op => block_cost += cm.weight(op),
            }
        }
        if tuning.unroll >= 2 {
            // one generic unit of per-iteration loop overhead, amortized
            block_cost -= cm.weights.generic * (1.0 - 1.0 / f64::from(tuning.unroll));
        }
        self_cost += freq * block_cost;
    }
    Ok(FunctionCost { self_cost, edges })
}

/// Total runtime and flat profile of `m`.
///
/// A call contributes the callee's dynamic cost scaled by the constant
/// argument multiplier. A call that closes a recursive cycle contributes
/// only its overhead, so each cycle body is counted once.
pub fn module_runtime(m: &Module, cm: &CostModel) -> Result<Runtime> {
    let names: Vec<&str> = m.functions.keys().map(String::as_str).collect();
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let costs = m
        .functions
        .values()
        .map(|f| function_cost(f, m, &index, cm))
        .collect::<Result<Vec<_>>>()?;
    let entry = *index
        .get(m.entry_function.as_str())
        .ok_or_else(|| Error::NotFound(format!("entry `{}`", m.entry_function)))?;

    // DFS from the entry: dynamic costs bottom-up, edges into a function
    // still on the stack marked as cycle-closing.
    let n = names.len();
    let mut dynamic = vec![0.0; n];
    let mut state = vec![0u8; n];
    let mut closing: Vec<Vec<bool>> = costs.iter().map(|c| vec![false; c.edges.len()]).collect();
    let mut postorder = Vec::with_capacity(n);
    let mut stack: Vec<(usize, usize)> = vec![(entry, 0)];
    state[entry] = 1;
    while let Some(&mut (f, ref mut next)) = stack.last_mut() {
        if let Some(edge) = costs[f].edges.get(*next) {
            let e = *next;
            *next += 1;
            match state[edge.callee] {
                0 => {
                    state[edge.callee] = 1;
                    stack.push((edge.callee, 0));
                }
                1 => closing[f][e] = true,
                _ => {}
            }
        } else {
            let c = &costs[f];
            dynamic[f] = c.self_cost
                + c.edges
                    .iter()
                    .zip(&closing[f])
                    .filter(|(_, closes)| !**closes)
                    .map(|(e, _)| e.freq * e.scale * dynamic[e.callee])
                    .sum::<f64>();
            state[f] = 2;
            postorder.push(f);
            stack.pop();
        }
    }

    // Top-down: effective invocation weight and call counts.
    let mut weight = vec![0.0; n];
    let mut calls = vec![0.0; n];
    weight[entry] = 1.0;
    calls[entry] = 1.0;
    for &f in postorder.iter().rev() {
        for (e, closes) in costs[f].edges.iter().zip(&closing[f]) {
            if !closes {
                weight[e.callee] += weight[f] * e.freq * e.scale;
                calls[e.callee] += calls[f] * e.freq;
            }
        }
    }

    let penalty = cm.icache_penalty(m.code_size(), m.cache_budget);
    let total = dynamic[entry] * penalty;
    let self_time: Vec<f64> = (0..n).map(|f| weight[f] * costs[f].self_cost).collect();
    let sum_self: f64 = postorder.iter().map(|&f| self_time[f]).sum();
    let cg = CallGraph::new(m);
    let mut profile = Vec::with_capacity(postorder.len());
    for (f, name) in names.iter().enumerate() {
        if state[f] != 2 {
            continue;
        }
        profile.push(ProfileRecord {
            function: name.to_string(),
            t_func: self_time[f] / sum_self,
            n_func: calls[f],
            total_runtime: total,
            in_cycle: cg.is_recursive(name)?,
        });
    }
    Ok(Runtime {
        total,
        penalty,
        profile,
    })
}

/// Average runtime of one call: `total × t_func / n_func`.
pub fn func_runtime(total: f64, t_func: f64, n_func: f64) -> Result<f64> {
    if !(n_func >= 1.0) {
        return Err(Error::UndefinedProfile(format!("call count {n_func}")));
    }
    if !(t_func > 0.0 && t_func <= 1.0) {
        return Err(Error::UndefinedProfile(format!("time share {t_func}")));
    }
    Ok(total * t_func / n_func)
}

/// `base / configured`.
pub fn func_speedup(base: f64, configured: f64) -> Result<f64> {
    if !(configured > 0.0) || !(base > 0.0) {
        return Err(Error::DivisionGuard(format!(
            "speedup {base} / {configured}"
        )));
    }
    Ok(base / configured)
}

/// Drops one minimum and one maximum and averages the rest.
pub fn trimmed_mean(runs: &[f64]) -> Result<f64> {
    if runs.len() < 3 {
        return Err(Error::Protocol(format!(
            "trimmed mean needs at least 3 runs, got {}",
            runs.len()
        )));
    }
    let mut sorted = runs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let middle = &sorted[1..sorted.len() - 1];
    Ok(middle.iter().sum::<f64>() / middle.len() as f64)
}

/// Sample standard deviation over mean.
pub fn relative_variance(runs: &[f64]) -> f64 {
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    if runs.len() < 2 || mean == 0.0 {
        return 0.0;
    }
    let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub runs: Vec<f64>,
    pub noise_epsilon: f64,
    pub seed: u64,
    pub trimmed_mean: f64,
    pub relative_variance: f64,
    /// The first batch was too noisy and was replaced by a repeat.
    pub repeated: bool,
}

/// Noisy repeated measurement with the trimmed-mean protocol.
pub fn measure(
    m: &Module,
    cm: &CostModel,
    noise_epsilon: f64,
    seed: u64,
    runs: usize,
) -> Result<Measurement> {
    if runs < 3 {
        return Err(Error::Protocol(format!("need at least 3 runs, got {runs}")));
    }
    if !(0.0..=0.1).contains(&noise_epsilon) {
        return Err(Error::Config(format!(
            "noise epsilon {noise_epsilon} outside [0, 0.1]"
        )));
    }
    let total = module_runtime(m, cm)?.total;
    let batch = |seed: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..runs)
            .map(|_| {
                let u: f64 = rng.random();
                total * (1.0 + noise_epsilon * (2.0 * u - 1.0))
            })
            .collect()
    };
    let mut used_seed = seed;
    let mut samples = batch(seed);
    let mut repeated = false;
    if relative_variance(&samples) > VARIANCE_LIMIT {
        used_seed = derive_seed(seed, 1);
        samples = batch(used_seed);
        repeated = true;
    }
    Ok(Measurement {
        trimmed_mean: trimmed_mean(&samples)?,
        relative_variance: relative_variance(&samples),
        runs: samples,
        noise_epsilon,
        seed: used_seed,
        repeated,
    })
}

/// An innermost loop, identified by its function and header block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionId {
    pub function: String,
    pub header: BlockId,
}

/// Innermost loops of the module in function, then header order.
pub fn tunable_regions(m: &Module) -> Result<Vec<RegionId>> {
    let mut out = Vec::new();
    for f in m.functions.values() {
        let a = FunctionAnalysis::new(f)?;
        out.extend(a.loops.innermost().map(|l| RegionId {
            function: f.name.clone(),
            header: l.header,
        }));
    }
    Ok(out)
}

/// Annotates each listed region with its unroll/interleave choice.
pub fn apply_unroll_config(
    m: &Module,
    config: &BTreeMap<RegionId, LoopTuning>,
) -> Result<Module> {
    let mut out = m.clone();
    for (region, tuning) in config {
        if !UNROLL_GRID.contains(&tuning.unroll) || !INTERLEAVE_GRID.contains(&tuning.interleave) {
            return Err(Error::Config(format!(
                "({}, {}) is outside the unroll/interleave grid",
                tuning.unroll, tuning.interleave
            )));
        }
        let f = out
            .functions
            .get_mut(&region.function)
            .ok_or_else(|| Error::Config(format!("unknown region function `{}`", region.function)))?;
        let analysis = FunctionAnalysis::new(f)?;
        let lp = analysis
            .loops
            .innermost()
            .find(|l| l.header == region.header)
            .ok_or_else(|| {
                Error::Config(format!(
                    "`{}` has no innermost loop at {}",
                    region.function, region.header
                ))
            })?;
        for b in f.blocks.iter_mut().filter(|b| lp.members.contains(&b.id)) {
            b.tuning = (*tuning != LoopTuning::IDENTITY).then_some(*tuning);
        }
    }
    Ok(out)
}

/// Writes the profile as CSV (function, t_func, n_func, total).
pub fn write_profile_csv<W: Write>(runtime: &Runtime, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["function", "t_func", "n_func", "total"])?;
    for r in &runtime.profile {
        w.write_record([
            r.function.clone(),
            r.t_func.to_string(),
            r.n_func.to_string(),
            r.total_runtime.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::progmodel::fixtures::*;
    use crate::progmodel::{apply_inline, SiteId};

    fn cm() -> CostModel {
        CostModel::default()
    }

    fn single(ops: Vec<Opcode>) -> Module {
        Module::new("main", vec![straight("main", 0, ops)])
    }

    #[test]
    fn static_costs() {
        let m = single(vec![Opcode::FAdd]);
        assert_eq!(static_cost(&m, "main", &cm()).unwrap(), 3.0);

        let m = Module::new(
            "main",
            vec![
                straight("main", 0, vec![op_call(0, "g", 0)]),
                straight("g", 2, vec![Opcode::FDiv]),
            ],
        );
        assert_eq!(static_cost(&m, "main", &cm()).unwrap(), 13.0);
        assert!(static_cost(&m, "nope", &cm()).is_err());
    }

    #[test]
    fn single_function_runtime() {
        let rt = module_runtime(&single(vec![Opcode::FAdd]), &cm()).unwrap();
        assert_eq!(rt.total, 3.0);
        assert_eq!(rt.penalty, 1.0);
        assert_eq!(rt.profile.len(), 1);
        assert_eq!(rt.profile[0].t_func, 1.0);
        assert_eq!(rt.profile[0].n_func, 1.0);
    }

    #[test]
    fn call_decomposition_and_inline_gain() {
        // main {g, call leaf, ret}; leaf {fadd, ret}
        let m = Module::new(
            "main",
            vec![
                straight("main", 0, vec![Opcode::Generic, op_call(0, "leaf", 0)]),
                straight("leaf", 0, vec![Opcode::FAdd]),
            ],
        );
        let rt = module_runtime(&m, &cm()).unwrap();
        // main self = 1 + 10 + 1, leaf = 3
        assert_eq!(rt.total, 15.0);
        assert!((rt.record("main").unwrap().t_func - 12.0 / 15.0).abs() < 1e-15);
        assert!((rt.record("leaf").unwrap().t_func - 3.0 / 15.0).abs() < 1e-15);
        assert_eq!(rt.record("leaf").unwrap().n_func, 1.0);

        let inlined = apply_inline(&m, SiteId(0)).unwrap();
        assert!(inlined.code_size() <= inlined.cache_budget);
        let after = module_runtime(&inlined, &cm()).unwrap();
        // main {g, fadd, ret} = 4; leaf never runs
        assert_eq!(after.total, 4.0);
        assert!(after.total < rt.total);
        assert!(after.record("leaf").is_none());
    }

    #[test]
    fn loop_frequency_scales_callee() {
        let m = Module::new(
            "main",
            vec![
                with_loop("main", 0, vec![op_call(0, "leaf", 2)]),
                straight("leaf", 2, vec![Opcode::FMul]),
            ],
        );
        let rt = module_runtime(&m, &cm()).unwrap();
        // main: 1 + 8*(10+2) + 2 = 99; leaf: 8 * 0.9 * 5 = 36
        assert!((rt.total - 135.0).abs() < 1e-12);
        assert_eq!(rt.record("leaf").unwrap().n_func, 8.0);
        let sum: f64 = rt.profile.iter().map(|r| r.t_func).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recursion_is_counted_once() {
        let m = Module::new(
            "main",
            vec![
                straight("main", 0, vec![op_call(0, "a", 0)]),
                straight("a", 0, vec![Opcode::FAdd, op_call(1, "b", 0)]),
                straight("b", 0, vec![Opcode::FMul, op_call(2, "a", 0)]),
            ],
        );
        let rt = module_runtime(&m, &cm()).unwrap();
        // main 11 + a (2 + 10 + 1) + b (4 + 10 + 1)
        assert_eq!(rt.total, 11.0 + 13.0 + 15.0);
        assert!(rt.record("a").unwrap().in_cycle);
        assert!(!rt.record("main").unwrap().in_cycle);
        let sum: f64 = rt.profile.iter().map(|r| r.t_func).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_formula() {
        let cm = cm();
        assert_eq!(cm.icache_penalty(120, 100), 1.1);
        assert_eq!(cm.icache_penalty(100, 100), 1.0);
        assert_eq!(cm.icache_penalty(50, 100), 1.0);

        let mut m = single(vec![Opcode::FAdd; 11]); // 12 instructions
        m.cache_budget = 10;
        let rt = module_runtime(&m, &cm).unwrap();
        assert_eq!(rt.penalty, 1.0 + 0.5 * 2.0 / 10.0);
        assert!((rt.total - 23.0 * rt.penalty).abs() < 1e-12);
    }

    #[test]
    fn runtime_share_and_speedup_examples() {
        assert!((func_runtime(100.0, 0.2, 400.0).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(func_runtime(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((func_runtime(60.0, 0.35, 7.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(
            func_runtime(1.0, 0.5, 0.0),
            Err(Error::UndefinedProfile(_))
        ));

        assert!((func_speedup(0.05, 0.04).unwrap() - 1.25).abs() < 1e-12);
        assert_eq!(func_speedup(0.7, 0.7).unwrap(), 1.0);
        assert!((func_speedup(0.02, 0.08).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(
            func_speedup(1.0, 0.0),
            Err(Error::DivisionGuard(_))
        ));
    }

    #[test]
    fn trimmed_mean_protocol() {
        assert_eq!(trimmed_mean(&[10.0, 1.0, 3.0, 2.0, 4.0]).unwrap(), 3.0);
        assert!(matches!(trimmed_mean(&[1.0, 2.0]), Err(Error::Protocol(_))));

        let m = single(vec![Opcode::FAdd]);
        let exact = measure(&m, &cm(), 0.0, 1, 5).unwrap();
        assert_eq!(exact.trimmed_mean, 3.0);
        assert_eq!(exact.relative_variance, 0.0);
        assert!(exact.runs.iter().all(|&r| r == 3.0));

        let a = measure(&m, &cm(), 0.05, 42, 5).unwrap();
        let b = measure(&m, &cm(), 0.05, 42, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.runs.iter().all(|&r| (r / 3.0 - 1.0).abs() <= 0.05));
        assert!(matches!(measure(&m, &cm(), 0.0, 1, 2), Err(Error::Protocol(_))));
        assert!(matches!(measure(&m, &cm(), 0.2, 1, 5), Err(Error::Config(_))));
    }

    fn loop_module(body: Vec<Opcode>, padding: usize) -> Module {
        let mut main = with_loop("main", 0, body);
        main.blocks[0].instructions = vec![Opcode::Generic; padding.max(1)];
        Module::new("main", vec![main])
    }

    #[test]
    fn identity_tuning_changes_nothing() {
        let m = loop_module(vec![Opcode::FAdd, Opcode::FMul], 3);
        let regions = tunable_regions(&m).unwrap();
        let config = regions
            .iter()
            .map(|r| (r.clone(), LoopTuning::IDENTITY))
            .collect();
        let tuned = apply_unroll_config(&m, &config).unwrap();
        assert_eq!(tuned, m);
        assert_eq!(
            module_runtime(&tuned, &cm()).unwrap(),
            module_runtime(&m, &cm()).unwrap()
        );
    }

    #[test]
    fn unrolling_small_loop_helps() {
        let m = loop_module(vec![Opcode::FAdd], 40);
        let base = module_runtime(&m, &cm()).unwrap().total;
        let region = tunable_regions(&m).unwrap().remove(0);
        let tuned = apply_unroll_config(
            &m,
            &BTreeMap::from([(region, LoopTuning { unroll: 4, interleave: 1 })]),
        )
        .unwrap();
        assert!(tuned.code_size() <= tuned.cache_budget);
        let after = module_runtime(&tuned, &cm()).unwrap().total;
        // saves 8 iterations × 3/4 of a unit
        assert!((base - after - 6.0).abs() < 1e-12);
    }

    #[test]
    fn unrolling_large_loop_at_budget_hurts() {
        // 30-instruction loop body in a 35-instruction module: unroll 8 adds
        // 210 instructions against a budget of 42.
        let m = loop_module(vec![Opcode::Generic; 30], 3);
        let base = module_runtime(&m, &cm()).unwrap();
        let region = tunable_regions(&m).unwrap().remove(0);
        let tuned = apply_unroll_config(
            &m,
            &BTreeMap::from([(region, LoopTuning { unroll: 8, interleave: 1 })]),
        )
        .unwrap();
        let after = module_runtime(&tuned, &cm()).unwrap();
        let saving = 8.0 * (1.0 - 1.0 / 8.0);
        let size = tuned.code_size() as f64;
        let budget = tuned.cache_budget as f64;
        let expected = (base.total - saving) * (1.0 + 0.5 * (size - budget) / budget);
        assert!((after.total - expected).abs() < 1e-9);
        assert!(after.total > base.total);
    }

    #[test]
    fn unroll_config_errors() {
        let m = loop_module(vec![Opcode::FAdd], 3);
        let region = tunable_regions(&m).unwrap().remove(0);
        let off_grid = BTreeMap::from([(region, LoopTuning { unroll: 3, interleave: 1 })]);
        assert!(matches!(
            apply_unroll_config(&m, &off_grid),
            Err(Error::Config(_))
        ));
        let unknown = BTreeMap::from([(
            RegionId {
                function: "main".into(),
                header: BlockId(0),
            },
            LoopTuning { unroll: 2, interleave: 1 },
        )]);
        assert!(matches!(
            apply_unroll_config(&m, &unknown),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cost_model_json_roundtrip() {
        let text = cm().to_json().unwrap();
        assert!(text.contains("costmodel/1"));
        assert_eq!(CostModel::from_json(&text).unwrap(), cm());
    }
}
