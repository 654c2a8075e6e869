//! Seeded generator of structured (hence reducible) synthetic programs.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{default_cache_budget, BasicBlock, BlockId, Function, Module, Opcode, SiteId};
use crate::error::{Error, Result};

/// Generator knobs. Identical configs produce bit-identical modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    /// Functions including `main`.
    pub n_functions: usize,
    /// Inclusive block-count range per function.
    pub blocks_per_function: (usize, usize),
    /// Inclusive instruction-count range per block, `ret` and calls excluded.
    pub instrs_per_block: (usize, usize),
    /// Chance that a region opens a loop, while below `max_loop_depth`.
    pub loop_probability: f64,
    pub max_loop_depth: u32,
    /// Chance that a region opens an if/else.
    pub branch_probability: f64,
    /// Expected calls per block.
    pub callsite_density: f64,
    /// Chance that a call targets the caller itself or an earlier function,
    /// which is what allows call-graph cycles.
    pub recursion_probability: f64,
    pub max_params: u32,
    /// Chance that each argument of a call is a constant.
    pub const_arg_probability: f64,
    pub local_probability: f64,
    /// Share of non-call instructions that are floating-point arithmetic.
    pub arith_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_functions: 6,
            blocks_per_function: (1, 8),
            instrs_per_block: (1, 5),
            loop_probability: 0.25,
            max_loop_depth: 2,
            branch_probability: 0.25,
            callsite_density: 0.3,
            recursion_probability: 0.0,
            max_params: 3,
            const_arg_probability: 0.3,
            local_probability: 0.5,
            arith_fraction: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.n_functions == 0 {
            return err("n_functions must be at least 1");
        }
        let (bmin, bmax) = self.blocks_per_function;
        if bmin == 0 || bmin > bmax {
            return err("blocks_per_function must satisfy 1 <= min <= max");
        }
        let (imin, imax) = self.instrs_per_block;
        if imin == 0 || imin > imax {
            return err("instrs_per_block must satisfy 1 <= min <= max");
        }
        for (name, p) in [
            ("loop_probability", self.loop_probability),
            ("branch_probability", self.branch_probability),
            ("recursion_probability", self.recursion_probability),
            ("const_arg_probability", self.const_arg_probability),
            ("local_probability", self.local_probability),
            ("arith_fraction", self.arith_fraction),
        ] {
            if !prob(p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.callsite_density.is_finite() && self.callsite_density >= 0.0) {
            return err("callsite_density must be finite and non-negative");
        }
        Ok(())
    }
}

enum Region {
    Block,
    IfElse(Vec<Region>, Vec<Region>),
    Loop(Vec<Region>),
}

impl Region {
    fn blocks(regions: &[Region]) -> usize {
        regions
            .iter()
            .map(|r| match r {
                Region::Block => 1,
                Region::IfElse(t, e) => 1 + Self::blocks(t) + Self::blocks(e),
                Region::Loop(body) => 1 + Self::blocks(body),
            })
            .sum()
    }
}

struct Gen<'a> {
    cfg: &'a GenConfig,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn regions(&mut self, mut budget: usize, depth: u32) -> Vec<Region> {
        let mut out = Vec::new();
        while budget > 0 {
            if depth < self.cfg.max_loop_depth && self.rng.random_bool(self.cfg.loop_probability) {
                let body = self.rng.random_range(0..budget);
                out.push(Region::Loop(self.regions(body, depth + 1)));
                budget -= 1 + body;
            } else if budget >= 2 && self.rng.random_bool(self.cfg.branch_probability) {
                let inner = self.rng.random_range(1..budget);
                let then_blocks = self.rng.random_range(1..=inner);
                let then = self.regions(then_blocks, depth);
                let els = self.regions(inner - then_blocks, depth);
                out.push(Region::IfElse(then, els));
                budget -= 1 + inner;
            } else {
                out.push(Region::Block);
                budget -= 1;
            }
        }
        out
    }

    fn body_ops(&mut self) -> Vec<Opcode> {
        let (lo, hi) = self.cfg.instrs_per_block;
        let n = self.rng.random_range(lo..=hi);
        (0..n)
            .map(|_| {
                if self.rng.random_bool(self.cfg.arith_fraction) {
                    [Opcode::FAdd, Opcode::FSub, Opcode::FMul, Opcode::FDiv]
                        .choose(&mut self.rng)
                        .expect("non-empty")
                        .clone()
                } else {
                    Opcode::Generic
                }
            })
            .collect()
    }

    fn function_blocks(&mut self) -> Vec<BasicBlock> {
        let (lo, hi) = self.cfg.blocks_per_function;
        let total = self.rng.random_range(lo..=hi);
        let mut blocks = Vec::with_capacity(total);
        if total == 1 {
            let mut ops = self.body_ops();
            ops.push(Opcode::Ret);
            blocks.push(BasicBlock::new(BlockId(0), ops, vec![]));
            return blocks;
        }
        let inner = self.regions(total - 2, 0);
        debug_assert_eq!(Region::blocks(&inner), total - 2);
        let entry = self.new_block(&mut blocks);
        let mut dangling = vec![entry];
        for r in &inner {
            let (first, exits) = self.lower(r, &mut blocks);
            patch(&mut blocks, &dangling, first);
            dangling = exits;
        }
        let exit = self.new_block(&mut blocks);
        blocks[exit].instructions.push(Opcode::Ret);
        patch(&mut blocks, &dangling, exit);
        blocks
    }

    fn new_block(&mut self, blocks: &mut Vec<BasicBlock>) -> usize {
        let ops = self.body_ops();
        blocks.push(BasicBlock::new(BlockId(blocks.len() as u32), ops, vec![]));
        blocks.len() - 1
    }

    /// Lowers one region; returns its first block and the blocks whose
    /// fall-through successor is still open.
    fn lower(&mut self, r: &Region, blocks: &mut Vec<BasicBlock>) -> (usize, Vec<usize>) {
        match r {
            Region::Block => {
                let b = self.new_block(blocks);
                (b, vec![b])
            }
            Region::IfElse(then, els) => {
                let cond = self.new_block(blocks);
                let (t_first, mut exits) = self.lower_seq(then, blocks);
                link(blocks, cond, t_first);
                if els.is_empty() {
                    exits.push(cond);
                } else {
                    let (e_first, e_exits) = self.lower_seq(els, blocks);
                    link(blocks, cond, e_first);
                    exits.extend(e_exits);
                }
                (cond, exits)
            }
            Region::Loop(body) => {
                let header = self.new_block(blocks);
                if body.is_empty() {
                    link(blocks, header, header);
                } else {
                    let (b_first, b_exits) = self.lower_seq(body, blocks);
                    link(blocks, header, b_first);
                    patch(blocks, &b_exits, header);
                }
                (header, vec![header])
            }
        }
    }

    fn lower_seq(&mut self, seq: &[Region], blocks: &mut Vec<BasicBlock>) -> (usize, Vec<usize>) {
        let (first, mut dangling) = self.lower(&seq[0], blocks);
        for r in &seq[1..] {
            let (f, exits) = self.lower(r, blocks);
            patch(blocks, &dangling, f);
            dangling = exits;
        }
        (first, dangling)
    }
}

fn link(blocks: &mut [BasicBlock], from: usize, to: usize) {
    let id = blocks[to].id;
    blocks[from].successors.push(id);
}

fn patch(blocks: &mut [BasicBlock], from: &[usize], to: usize) {
    for &f in from {
        link(blocks, f, to);
    }
}

fn function_name(i: usize) -> String {
    if i == 0 {
        "main".to_string()
    } else {
        format!("f{i:02}")
    }
}

/// Generates a well-formed module from `cfg`.
///
/// Function 0 is `main`. Without recursion, function `i` only calls
/// functions `j > i`, so the call graph is a DAG; every non-main function
/// gets at least one caller whenever calls are enabled.
pub fn generate_program(cfg: &GenConfig) -> Result<Module> {
    cfg.validate()?;
    let mut g = Gen {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let n = cfg.n_functions;
    let params: Vec<u32> = (0..n)
        .map(|i| {
            if i == 0 {
                0
            } else {
                g.rng.random_range(0..=cfg.max_params)
            }
        })
        .collect();
    let mut bodies: Vec<Vec<BasicBlock>> = (0..n).map(|_| g.function_blocks()).collect();

    let mut next_site = 0u32;
    let mut has_caller = vec![false; n];
    let mut insert_call = |g: &mut Gen, body: &mut Vec<BasicBlock>, callee: usize| {
        let b = g.rng.random_range(0..body.len());
        let block = &mut body[b];
        let limit = if block.ends_with_ret() {
            block.instructions.len() - 1
        } else {
            block.instructions.len()
        };
        let at = g.rng.random_range(0..=limit);
        let const_args = (0..params[callee])
            .filter(|_| g.rng.random_bool(cfg.const_arg_probability))
            .count() as u32;
        block.instructions.insert(
            at,
            Opcode::Call {
                site: SiteId(next_site),
                callee: function_name(callee),
                const_args,
            },
        );
        next_site += 1;
    };

    if cfg.callsite_density > 0.0 {
        let whole = cfg.callsite_density.floor() as usize;
        let frac = cfg.callsite_density - cfg.callsite_density.floor();
        for i in 0..n {
            let n_blocks = bodies[i].len();
            for _ in 0..n_blocks {
                let calls = whole + usize::from(g.rng.random_bool(frac));
                for _ in 0..calls {
                    let recursive = cfg.recursion_probability > 0.0
                        && g.rng.random_bool(cfg.recursion_probability);
                    let callee = if recursive {
                        g.rng.random_range(0..=i)
                    } else if i + 1 < n {
                        g.rng.random_range(i + 1..n)
                    } else {
                        continue;
                    };
                    has_caller[callee] = true;
                    insert_call(&mut g, &mut bodies[i], callee);
                }
            }
        }
        for j in 1..n {
            if !has_caller[j] {
                let i = g.rng.random_range(0..j);
                insert_call(&mut g, &mut bodies[i], j);
            }
        }
    }

    let functions = bodies
        .into_iter()
        .enumerate()
        .map(|(i, blocks)| Function {
            name: function_name(i),
            is_local: i != 0 && g.rng.random_bool(cfg.local_probability),
            param_count: params[i],
            entry: BlockId(0),
            blocks,
        })
        .collect::<Vec<_>>();

    let mut m = Module::new("main", functions);
    m.next_site_id = next_site;
    m.cache_budget = default_cache_budget(m.instruction_count());
    m.validate()?;
    Ok(m)
}
