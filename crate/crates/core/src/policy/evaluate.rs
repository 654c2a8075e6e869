use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{advise, autotune_regions, walk, PolicyParams};
use crate::error::{Error, Result};
use crate::perf_oracle::{measure, CostModel};
use crate::progmodel::{count_tunable_regions, Module};
use crate::util::{derive_seed, geometric_mean};

/// Static-cost bound of the threshold heuristic standing in for a
/// production inliner.
pub const HEURISTIC_COST_THRESHOLD: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    NeverInline,
    /// Inline when the callee's static cost is at most 30 and it is not
    /// recursive.
    Heuristic,
    /// Inline only when the module does not grow.
    SizeBaseline,
    Policy,
    /// Fair coin per site, seeded.
    Random,
}

impl Strategy {
    pub const BASELINES: [Strategy; 3] = [
        Strategy::NeverInline,
        Strategy::Heuristic,
        Strategy::SizeBaseline,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::NeverInline => "never-inline",
            Strategy::Heuristic => "heuristic (stand-in)",
            Strategy::SizeBaseline => "size (stand-in)",
            Strategy::Policy => "policy",
            Strategy::Random => "random",
        }
    }
}

/// Module produced by deploying `strategy` on `m`. `policy` is only
/// consulted by [`Strategy::Policy`], `seed` only by [`Strategy::Random`].
pub fn deploy(
    m: &Module,
    strategy: Strategy,
    policy: Option<&PolicyParams>,
    cm: &CostModel,
    seed: u64,
) -> Result<Module> {
    let out = match strategy {
        Strategy::NeverInline => m.clone(),
        Strategy::Policy => {
            let p = policy.ok_or_else(|| Error::Config("policy strategy without a policy".into()))?;
            advise(m, p, cm)?.0
        }
        Strategy::Heuristic => {
            walk(m, cm, |feats, cs, x| {
                let recursive = feats.call_graph().is_recursive(&cs.callee)?;
                Ok((x.callee_cost_estimate <= HEURISTIC_COST_THRESHOLD && !recursive, 0.0))
            })?
            .0
        }
        Strategy::SizeBaseline => {
            walk(m, cm, |_, cs, _| {
                // the call and the callee's `ret` disappear
                let k = m_function_size(m, &cs.callee)?;
                Ok((k <= 2, 0.0))
            })?
            .0
        }
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            walk(m, cm, |_, _, _| Ok((rng.random_bool(0.5), 0.0)))?.0
        }
    };
    Ok(out)
}

fn m_function_size(m: &Module, f: &str) -> Result<usize> {
    Ok(m.function(f)?.instruction_count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub noise_epsilon: f64,
    pub runs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            noise_epsilon: 0.005,
            runs: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub runtime: f64,
    pub relative_variance: f64,
    pub size: usize,
    pub tunable_regions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramEval {
    pub program: String,
    pub results: Vec<StrategyResult>,
}

impl ProgramEval {
    pub fn result(&self, s: Strategy) -> Option<&StrategyResult> {
        self.results.iter().find(|r| r.strategy == s)
    }

    /// Runtime of `baseline` over runtime of `s`.
    pub fn speedup(&self, s: Strategy, baseline: Strategy) -> Option<f64> {
        Some(self.result(baseline)?.runtime / self.result(s)?.runtime)
    }

    pub fn size_ratio(&self, s: Strategy, baseline: Strategy) -> Option<f64> {
        Some(self.result(s)?.size as f64 / self.result(baseline)?.size as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategies: Vec<Strategy>,
    pub programs: Vec<ProgramEval>,
}

impl EvalReport {
    pub fn geomean_speedup(&self, s: Strategy, baseline: Strategy) -> Option<f64> {
        let v: Vec<f64> = self
            .programs
            .iter()
            .filter_map(|p| p.speedup(s, baseline))
            .collect();
        geometric_mean(&v)
    }

    pub fn geomean_size_ratio(&self, s: Strategy, baseline: Strategy) -> Option<f64> {
        let v: Vec<f64> = self
            .programs
            .iter()
            .filter_map(|p| p.size_ratio(s, baseline))
            .collect();
        geometric_mean(&v)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut summary = serde_json::Map::new();
        for &b in &self.strategies {
            summary.insert(
                format!("speedup_wrt_{}", serde_json::to_value(b)?.as_str().unwrap_or("")),
                serde_json::json!(self.geomean_speedup(Strategy::Policy, b)),
            );
            summary.insert(
                format!("size_ratio_wrt_{}", serde_json::to_value(b)?.as_str().unwrap_or("")),
                serde_json::json!(self.geomean_size_ratio(Strategy::Policy, b)),
            );
        }
        let v = serde_json::json!({
            "strategies": self.strategies,
            "geomean": summary,
            "programs": self.programs,
        });
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        Ok(s)
    }

    /// Per program: policy speedup and size ratio against each baseline,
    /// then the measured variance and region counts.
    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        let baselines: Vec<Strategy> = self
            .strategies
            .iter()
            .copied()
            .filter(|s| *s != Strategy::Policy)
            .collect();
        write!(out, "{:<14}", "program")?;
        for b in &baselines {
            write!(out, " {:>22}", format!("speedup/{}", short(*b)))?;
        }
        for b in &baselines {
            write!(out, " {:>18}", format!("size/{}", short(*b)))?;
        }
        writeln!(out, " {:>10} {:>8}", "variance", "regions")?;
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for p in &self.programs {
            write!(out, "{:<14}", p.program)?;
            for b in &baselines {
                write!(out, " {:>22}", cell(p.speedup(Strategy::Policy, *b)))?;
            }
            for b in &baselines {
                write!(out, " {:>18}", cell(p.size_ratio(Strategy::Policy, *b)))?;
            }
            let own = p.result(Strategy::Policy);
            writeln!(
                out,
                " {:>10} {:>8}",
                own.map_or("-".into(), |r| format!("{:.5}", r.relative_variance)),
                own.map_or("-".into(), |r| r.tunable_regions.to_string())
            )?;
        }
        write!(out, "{:<14}", "geomean")?;
        for b in &baselines {
            write!(out, " {:>22}", cell(self.geomean_speedup(Strategy::Policy, *b)))?;
        }
        for b in &baselines {
            write!(out, " {:>18}", cell(self.geomean_size_ratio(Strategy::Policy, *b)))?;
        }
        writeln!(out)?;
        writeln!(
            out,
            "heuristic and size baselines are stand-ins for production inliners"
        )?;
        Ok(())
    }
}

fn short(s: Strategy) -> &'static str {
    match s {
        Strategy::NeverInline => "never",
        Strategy::Heuristic => "heuristic",
        Strategy::SizeBaseline => "size",
        Strategy::Policy => "policy",
        Strategy::Random => "random",
    }
}

fn check_disjoint(corpus: &[(String, Module)], train_ids: &BTreeSet<String>) -> Result<()> {
    let overlap: Vec<&str> = corpus
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| train_ids.contains(*n))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Overlap(format!(
            "programs used in training: {}",
            overlap.join(", ")
        )));
    }
    Ok(())
}

/// Measures every strategy on every test program. All strategies of one
/// program share the same measurement noise stream.
pub fn evaluate(
    corpus: &[(String, Module)],
    train_ids: &BTreeSet<String>,
    policy: Option<&PolicyParams>,
    strategies: &[Strategy],
    cm: &CostModel,
    ec: &EvalConfig,
) -> Result<EvalReport> {
    check_disjoint(corpus, train_ids)?;
    let programs = corpus
        .par_iter()
        .enumerate()
        .map(|(i, (name, m))| -> Result<ProgramEval> {
            let seed = derive_seed(ec.seed, i as u64);
            let results = strategies
                .iter()
                .map(|&s| {
                    let out = deploy(m, s, policy, cm, seed)?;
                    let meas = measure(&out, cm, ec.noise_epsilon, seed, ec.runs)?;
                    Ok(StrategyResult {
                        strategy: s,
                        runtime: meas.trimmed_mean,
                        relative_variance: meas.relative_variance,
                        size: out.instruction_count(),
                        tunable_regions: count_tunable_regions(&out),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(ProgramEval {
                program: name.clone(),
                results,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        strategies: strategies.to_vec(),
        programs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub program: String,
    pub strategy: Strategy,
    pub regions: usize,
    pub untuned_runtime: f64,
    pub tuned_runtime: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub budget: usize,
    pub rows: Vec<RegionRow>,
}

impl RegionReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "{:<14} {:<22} {:>8} {:>14} {:>14} {:>9}",
            "program", "strategy", "regions", "untuned", "tuned", "speedup"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{:<14} {:<22} {:>8} {:>14.3} {:>14.3} {:>9.4}",
                r.program,
                r.strategy.label(),
                r.regions,
                r.untuned_runtime,
                r.tuned_runtime,
                r.untuned_runtime / r.tuned_runtime
            )?;
        }
        Ok(())
    }
}

/// Region counts and post-tuning runtimes of each strategy's output.
pub fn autotune_report(
    corpus: &[(String, Module)],
    policy: Option<&PolicyParams>,
    strategies: &[Strategy],
    cm: &CostModel,
    budget: usize,
    seed: u64,
) -> Result<RegionReport> {
    let rows: Vec<Vec<RegionRow>> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, (name, m))| {
            let seed = derive_seed(seed, i as u64);
            strategies
                .iter()
                .map(|&s| {
                    let out = deploy(m, s, policy, cm, seed)?;
                    let r = autotune_regions(&out, budget, cm, seed)?;
                    Ok(RegionRow {
                        program: name.clone(),
                        strategy: s,
                        regions: r.regions,
                        untuned_runtime: r.baseline_runtime,
                        tuned_runtime: r.best_runtime,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(RegionReport {
        budget,
        rows: rows.into_iter().flatten().collect(),
    })
}
