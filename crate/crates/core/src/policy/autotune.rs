use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::perf_oracle::{
    apply_unroll_config, module_runtime, tunable_regions, CostModel, RegionId, INTERLEAVE_GRID,
    UNROLL_GRID,
};
use crate::progmodel::{LoopTuning, Module};

/// Points in the per-region grid.
pub const EXHAUSTIVE_GRID: usize = UNROLL_GRID.len() * INTERLEAVE_GRID.len();

fn grid_point(k: usize) -> LoopTuning {
    LoopTuning {
        unroll: UNROLL_GRID[k / INTERLEAVE_GRID.len()],
        interleave: INTERLEAVE_GRID[k % INTERLEAVE_GRID.len()],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutotuneResult {
    pub regions: usize,
    pub baseline_runtime: f64,
    pub best_runtime: f64,
    /// Grid choice per region of the best configuration.
    pub best_config: Vec<(RegionId, LoopTuning)>,
    pub evaluations: usize,
}

impl AutotuneResult {
    pub fn speedup(&self) -> f64 {
        self.baseline_runtime / self.best_runtime
    }
}

struct Search {
    best: Vec<usize>,
    best_runtime: f64,
    evaluations: usize,
}

impl Search {
    fn consider(&mut self, choice: Vec<usize>, eval: impl Fn(&[usize]) -> Result<f64>) -> Result<()> {
        let t = eval(&choice)?;
        self.evaluations += 1;
        if t < self.best_runtime {
            self.best_runtime = t;
            self.best = choice;
        }
        Ok(())
    }
}

/// Searches per-region (unroll, interleave) choices for `budget` oracle
/// evaluations. The untuned configuration is evaluated first; the grid is
/// enumerated exhaustively when it fits the budget, otherwise half the
/// budget goes to random search and the rest to single-region mutations
/// of the best point.
pub fn autotune_regions(
    m: &Module,
    budget: usize,
    cm: &CostModel,
    seed: u64,
) -> Result<AutotuneResult> {
    let regions = tunable_regions(m)?;
    let baseline_runtime = module_runtime(m, cm)?.total;
    let r = regions.len();
    let eval = |choice: &[usize]| -> Result<f64> {
        let cfg: BTreeMap<RegionId, LoopTuning> = regions
            .iter()
            .cloned()
            .zip(choice.iter().map(|&k| grid_point(k)))
            .collect();
        Ok(module_runtime(&apply_unroll_config(m, &cfg)?, cm)?.total)
    };

    let mut search = Search {
        best: vec![0usize; r],
        best_runtime: baseline_runtime,
        evaluations: 1,
    };
    let exhaustive = u32::try_from(r)
        .ok()
        .and_then(|r| EXHAUSTIVE_GRID.checked_pow(r))
        .filter(|&total| total <= budget.max(1));
    if r > 0 {
        if let Some(total) = exhaustive {
            for idx in 1..total {
                let mut choice = vec![0; r];
                let mut rest = idx;
                for c in choice.iter_mut().rev() {
                    *c = rest % EXHAUSTIVE_GRID;
                    rest /= EXHAUSTIVE_GRID;
                }
                search.consider(choice, &eval)?;
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            while search.evaluations < budget / 2 {
                let choice = (0..r).map(|_| rng.random_range(0..EXHAUSTIVE_GRID)).collect();
                search.consider(choice, &eval)?;
            }
            while search.evaluations < budget {
                let mut choice = search.best.clone();
                let i = rng.random_range(0..r);
                choice[i] = rng.random_range(0..EXHAUSTIVE_GRID);
                search.consider(choice, &eval)?;
            }
        }
    }
    let Search {
        best,
        best_runtime,
        evaluations,
    } = search;
    Ok(AutotuneResult {
        regions: r,
        baseline_runtime,
        best_runtime,
        best_config: regions
            .into_iter()
            .zip(best.iter().map(|&k| grid_point(k)))
            .collect(),
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::progmodel::fixtures::*;
    use crate::progmodel::Opcode;

    #[test]
    fn identity_is_grid_point_zero() {
        assert_eq!(grid_point(0), LoopTuning::IDENTITY);
        assert_eq!(EXHAUSTIVE_GRID, 12);
    }

    #[test]
    fn no_regions_returns_baseline() {
        let m = Module::new("main", vec![straight("main", 0, vec![Opcode::FAdd])]);
        let r = autotune_regions(&m, 120, &CostModel::default(), 0).unwrap();
        assert_eq!(r.regions, 0);
        assert_eq!(r.best_runtime, r.baseline_runtime);
    }

    #[test]
    fn single_region_matches_exhaustive_oracle() {
        let m = Module::new(
            "main",
            vec![with_loop("main", 0, vec![Opcode::Generic, Opcode::Generic])],
        );
        let cm = CostModel::default();
        let regions = tunable_regions(&m).unwrap();
        let oracle = (0..EXHAUSTIVE_GRID)
            .map(|k| {
                let cfg = BTreeMap::from([(regions[0].clone(), grid_point(k))]);
                module_runtime(&apply_unroll_config(&m, &cfg).unwrap(), &cm)
                    .unwrap()
                    .total
            })
            .fold(f64::INFINITY, f64::min);
        let r = autotune_regions(&m, 12, &cm, 0).unwrap();
        assert_eq!(r.best_runtime, oracle);
        assert!(r.best_runtime < r.baseline_runtime);
    }
}
