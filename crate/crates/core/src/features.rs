//! Static features: 20 per function (regressor input) and 13 per call
//! site (policy input).

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf_oracle::{static_cost, CostModel};
use crate::progmodel::{CallGraph, CallSite, Function, FunctionAnalysis, Module, Opcode};

macro_rules! named_vector {
    ($(#[$meta:meta])* $name:ident, $len:expr, { $($field:ident => $label:literal),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            $(pub $field: f64,)*
        }

        impl $name {
            pub const LEN: usize = $len;
            pub const NAMES: [&'static str; $len] = [$($label),*];

            pub fn to_array(&self) -> [f64; $len] {
                [$(self.$field),*]
            }

            pub fn from_array(a: [f64; $len]) -> Self {
                let [$($field),*] = a;
                $name { $($field),* }
            }

            pub fn from_slice(s: &[f64]) -> Result<Self> {
                let a: [f64; $len] = s.try_into().map_err(|_| {
                    Error::Config(format!(
                        "{} needs {} values, got {}",
                        stringify!($name),
                        $len,
                        s.len()
                    ))
                })?;
                Ok(Self::from_array(a))
            }

            pub fn is_valid(&self) -> bool {
                self.to_array().iter().all(|v| v.is_finite() && *v >= 0.0)
            }
        }
    };
}

named_vector!(
    /// Caller-level features, in table order.
    FeatureVector, 20, {
        instruction_per_block => "InstructionPerBlock",
        successor_per_block => "SuccessorPerBlock",
        avg_nested_loop_level => "AvgNestedLoopLevel",
        instr_per_loop => "InstrPerLoop",
        block_with_multiple_successors_per_loop => "BlockWithMultipleSuccecorsPerLoop",
        calls_no => "CallsNo",
        is_local => "IsLocal",
        max_loop_depth => "MaxLoopDepth",
        max_dom_tree_level => "MaxDomTreeLevel",
        caller_height => "CallerHeight",
        call_usage => "CallUsage",
        is_recursive => "IsRecursive",
        num_callsite_in_loop => "NumCallsiteInLoop",
        entry_block_freq => "EntryBlockFreq",
        max_callsite_block_freq => "MaxCallsiteBlockFreq",
        ret_count => "NoOfInstructions='Ret'",
        fmul_count => "NoOfInstructions='fmul'",
        fdiv_count => "NoOfInstructions='fdiv'",
        fadd_count => "NoOfInstructions='fadd'",
        fsub_count => "NoOfInstructions='fsub'",
    }
);

named_vector!(
    /// Call-site features seen by the inlining policy.
    CalleeFeatureVector, 13, {
        callee_basic_block_count => "CalleeBasicBlockCount",
        call_site_height => "CallSiteHeight",
        node_count => "NodeCount",
        edge_count => "EdgeCount",
        nr_constant_params => "NrConstantParams",
        callee_users => "CalleeUsers",
        caller_users => "CallerUsers",
        caller_basic_block_count => "CallerBasicBlockCount",
        caller_conditionally_executed_blocks => "CallerConditionallyExecutedBlocks",
        callee_conditionally_executed_blocks => "CalleeConditionallyExecutedBlocks",
        callee_cost_estimate => "CalleeCostEstimate",
        call_site_block_freq => "CallSiteBlockFreq",
        call_site_loop_level => "CallSiteLoopLevel",
    }
);

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Call graph and per-function analyses of one module state, shared by
/// repeated extractions.
pub struct ModuleFeatures<'m> {
    module: &'m Module,
    graph: CallGraph,
    analyses: HashMap<&'m str, FunctionAnalysis>,
}

impl<'m> ModuleFeatures<'m> {
    pub fn new(module: &'m Module) -> Result<Self> {
        let analyses = module
            .functions
            .iter()
            .map(|(name, f)| Ok((name.as_str(), FunctionAnalysis::new(f)?)))
            .collect::<Result<_>>()?;
        Ok(ModuleFeatures {
            module,
            graph: CallGraph::new(module),
            analyses,
        })
    }

    pub fn call_graph(&self) -> &CallGraph {
        &self.graph
    }

    fn lookup(&self, f: &str) -> Result<(&'m Function, &FunctionAnalysis)> {
        let func = self.module.function(f)?;
        Ok((func, &self.analyses[func.name.as_str()]))
    }

    pub fn function_features(&self, f: &str) -> Result<FeatureVector> {
        let (func, a) = self.lookup(f)?;
        let n_blocks = func.blocks.len() as f64;
        let instrs = func.instruction_count() as f64;
        let succs: usize = func.blocks.iter().map(|b| b.successors.len()).sum();

        let loops = &a.loops.loops;
        let n_loops = loops.len() as f64;
        let depth_sum: u32 = loops.iter().map(|l| l.depth).sum();
        let loop_instrs: usize = loops
            .iter()
            .flat_map(|l| &l.members)
            .map(|b| func.block(*b).map_or(0, |b| b.instructions.len()))
            .sum();
        let multi_succ_in_loop = func
            .blocks
            .iter()
            .filter(|b| b.successors.len() >= 2 && a.loops.depth_of(b.id) >= 1)
            .count();

        let mut fv = FeatureVector {
            instruction_per_block: ratio(instrs, n_blocks),
            successor_per_block: ratio(succs as f64, n_blocks),
            avg_nested_loop_level: ratio(f64::from(depth_sum), n_loops),
            instr_per_loop: ratio(loop_instrs as f64, n_loops),
            block_with_multiple_successors_per_loop: ratio(multi_succ_in_loop as f64, n_loops),
            is_local: f64::from(u8::from(func.is_local)),
            max_loop_depth: f64::from(a.loops.max_depth()),
            max_dom_tree_level: f64::from(a.dom.max_level()),
            caller_height: f64::from(self.graph.height(f)?),
            call_usage: self.graph.users(f)? as f64,
            is_recursive: f64::from(u8::from(self.graph.is_recursive(f)?)),
            entry_block_freq: a.frequency(func.entry),
            ..FeatureVector::default()
        };
        for b in &func.blocks {
            for op in &b.instructions {
                match op {
                    Opcode::Ret => fv.ret_count += 1.0,
                    Opcode::FMul => fv.fmul_count += 1.0,
                    Opcode::FDiv => fv.fdiv_count += 1.0,
                    Opcode::FAdd => fv.fadd_count += 1.0,
                    Opcode::FSub => fv.fsub_count += 1.0,
                    Opcode::Call { .. } => {
                        fv.calls_no += 1.0;
                        if a.loops.depth_of(b.id) >= 1 {
                            fv.num_callsite_in_loop += 1.0;
                        }
                        fv.max_callsite_block_freq =
                            fv.max_callsite_block_freq.max(a.frequency(b.id));
                    }
                    Opcode::Generic => {}
                }
            }
        }
        Ok(fv)
    }

    /// Blocks that do not dominate the exit block, i.e. may be skipped.
    fn conditionally_executed(func: &Function, a: &FunctionAnalysis) -> f64 {
        let Some(exit) = func.exit_block() else {
            return 0.0;
        };
        func.blocks
            .iter()
            .filter(|b| !a.dominates(b.id, exit.id))
            .count() as f64
    }

    pub fn callsite_features(&self, cs: &CallSite, cm: &CostModel) -> Result<CalleeFeatureVector> {
        let (caller, ca) = self.lookup(&cs.caller)?;
        let (callee, ga) = self.lookup(&cs.callee)?;
        if caller.block(cs.block).is_none() {
            return Err(Error::NotFound(format!("call site {}", cs.id)));
        }
        Ok(CalleeFeatureVector {
            callee_basic_block_count: callee.blocks.len() as f64,
            call_site_height: f64::from(self.graph.height(&cs.caller)?),
            node_count: self.graph.node_count() as f64,
            edge_count: self.graph.edge_count() as f64,
            nr_constant_params: f64::from(cs.const_args),
            callee_users: self.graph.users(&cs.callee)? as f64,
            caller_users: self.graph.users(&cs.caller)? as f64,
            caller_basic_block_count: caller.blocks.len() as f64,
            caller_conditionally_executed_blocks: Self::conditionally_executed(caller, ca),
            callee_conditionally_executed_blocks: Self::conditionally_executed(callee, ga),
            callee_cost_estimate: static_cost(self.module, &cs.callee, cm)?,
            call_site_block_freq: ca.frequency(cs.block),
            call_site_loop_level: f64::from(ca.loops.depth_of(cs.block)),
        })
    }
}

/// The 20 caller features of function `f`.
pub fn extract_function_features(m: &Module, f: &str) -> Result<FeatureVector> {
    ModuleFeatures::new(m)?.function_features(f)
}

/// The 13 call-site features of `cs`.
pub fn extract_callsite_features(
    m: &Module,
    cs: &CallSite,
    cm: &CostModel,
) -> Result<CalleeFeatureVector> {
    let live = m.find_site(cs.id)?;
    ModuleFeatures::new(m)?.callsite_features(&live, cm)
}

/// Writes function feature rows as CSV with the fixed 20-column header,
/// preceded by a `function` column.
pub fn write_function_features_csv<W: Write>(
    rows: &[(String, FeatureVector)],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["function"];
    header.extend(FeatureVector::NAMES);
    w.write_record(&header)?;
    for (name, fv) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(fv.to_array().iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_function_features_csv`].
pub fn read_function_features_csv<R: Read>(input: R) -> Result<Vec<(String, FeatureVector)>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let expected: Vec<&str> = std::iter::once("function")
        .chain(FeatureVector::NAMES)
        .collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Schema {
            expected: expected.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        rows.push((rec[0].to_string(), FeatureVector::from_slice(&values)?));
    }
    Ok(rows)
}

/// Writes call-site feature rows as CSV with the fixed 13-column header,
/// preceded by the site id.
pub fn write_callsite_features_csv<W: Write>(
    rows: &[(CallSite, CalleeFeatureVector)],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["site"];
    header.extend(CalleeFeatureVector::NAMES);
    w.write_record(&header)?;
    for (cs, fv) in rows {
        let mut rec = vec![cs.id.0.to_string()];
        rec.extend(fv.to_array().iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
