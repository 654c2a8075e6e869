//! Synthetic IR: modules of functions made of basic blocks, plus the
//! analyses and the inlining transform that operate on them.
//!
//! The IR only carries what the rest of the pipeline observes: opcode
//! classes (for features and the cost model), CFG edges, loop structure and
//! call sites. There are no values, no SSA and no real semantics.
//!
//! Module-level invariants (checked by [`Module::validate`]):
//!
//! * every function has exactly one `ret`, the last instruction of its only
//!   successor-free block;
//! * the entry block has no predecessors and every block is reachable;
//! * the CFG is reducible;
//! * call-site ids are unique across the module and below `next_site_id`.

mod analysis;
mod callgraph;
mod generate;
mod inline;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{expect_schema, Error, Result};

pub use analysis::{
    block_frequency, compute_dominators, detect_loops, DomTree, FunctionAnalysis, Loop, LoopNest,
    TRIP_ESTIMATE,
};
pub use callgraph::{call_graph_height, enumerate_callsites, CallGraph};
pub use generate::{generate_program, GenConfig};
pub use inline::apply_inline;

/// Schema tag written into every program corpus file.
pub const PROGMODEL_SCHEMA: &str = "progmodel/1";

/// Identifier of a basic block, unique within its function. Serialized as
/// `"b<n>"`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockId(pub u32);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

impl From<BlockId> for String {
    fn from(id: BlockId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for BlockId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.strip_prefix('b')
            .and_then(|n| n.parse().ok())
            .map(BlockId)
            .ok_or_else(|| format!("malformed block id `{s}`"))
    }
}

/// Module-wide call-site identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteId(pub u32);

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cs{}", self.0)
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Opcode {
    FAdd,
    FSub,
    FMul,
    FDiv,
    Ret,
    Call {
        site: SiteId,
        callee: String,
        const_args: u32,
    },
    Generic,
}

impl Opcode {
    pub fn is_arithmetic(&self) -> bool {
        matches!(self, Opcode::FAdd | Opcode::FSub | Opcode::FMul | Opcode::FDiv)
    }
}

/// Unroll/interleave annotation left on the blocks of a tuned loop region.
/// Only the cost model reads it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct LoopTuning {
    pub unroll: u32,
    pub interleave: u32,
}

impl LoopTuning {
    pub const IDENTITY: LoopTuning = LoopTuning {
        unroll: 0,
        interleave: 1,
    };

    /// Code-size multiplier for a block carrying this annotation.
    pub fn size_factor(&self) -> u64 {
        u64::from(self.unroll.max(1)) * u64::from(self.interleave.max(1))
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: BlockId,
    pub instructions: Vec<Opcode>,
    pub successors: Vec<BlockId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<LoopTuning>,
}

impl BasicBlock {
    pub fn new(id: BlockId, instructions: Vec<Opcode>, successors: Vec<BlockId>) -> Self {
        BasicBlock {
            id,
            instructions,
            successors,
            tuning: None,
        }
    }

    pub fn ends_with_ret(&self) -> bool {
        matches!(self.instructions.last(), Some(Opcode::Ret))
    }

    /// Code size in instruction units, including any tuning multiplier.
    pub fn code_size(&self) -> u64 {
        let factor = self.tuning.map_or(1, |t| t.size_factor());
        self.instructions.len() as u64 * factor
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub is_local: bool,
    pub param_count: u32,
    pub entry: BlockId,
    pub blocks: Vec<BasicBlock>,
}

impl Function {
    pub fn block(&self, id: BlockId) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn block_position(&self, id: BlockId) -> Option<usize> {
        self.blocks.iter().position(|b| b.id == id)
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }

    /// The unique block ending in `ret`.
    pub fn exit_block(&self) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.ends_with_ret())
    }

    pub fn next_block_id(&self) -> u32 {
        self.blocks.iter().map(|b| b.id.0 + 1).max().unwrap_or(0)
    }

    /// Iterates `(block, index, site, callee, const_args)` over every call
    /// in block order, then instruction order.
    pub fn calls(&self) -> impl Iterator<Item = (&BasicBlock, usize, SiteId, &str, u32)> {
        self.blocks.iter().flat_map(|b| {
            b.instructions
                .iter()
                .enumerate()
                .filter_map(move |(i, op)| match op {
                    Opcode::Call {
                        site,
                        callee,
                        const_args,
                    } => Some((b, i, *site, callee.as_str(), *const_args)),
                    _ => None,
                })
        })
    }
}

/// A call instruction located in the module.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CallSite {
    pub id: SiteId,
    pub caller: String,
    pub block: BlockId,
    pub instr_index: usize,
    pub callee: String,
    pub const_args: u32,
}

impl CallSite {
    pub fn is_direct_recursion(&self) -> bool {
        self.caller == self.callee
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Module {
    pub schema: String,
    pub entry_function: String,
    pub cache_budget: u64,
    pub next_site_id: u32,
    #[serde(with = "function_list")]
    pub functions: BTreeMap<String, Function>,
}

mod function_list {
    use std::collections::BTreeMap;

    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    use super::Function;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<String, Function>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        map.values().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<String, Function>, D::Error> {
        let list = Vec::<Function>::deserialize(d)?;
        let mut map = BTreeMap::new();
        for f in list {
            let name = f.name.clone();
            if map.insert(name.clone(), f).is_some() {
                return Err(D::Error::custom(format!("duplicate function `{name}`")));
            }
        }
        Ok(map)
    }
}

impl Module {
    /// Builds a module from functions, assigning the cache budget from its
    /// current size and `next_site_id` from the largest site in use.
    pub fn new(entry_function: &str, functions: Vec<Function>) -> Self {
        let mut m = Module {
            schema: PROGMODEL_SCHEMA.to_string(),
            entry_function: entry_function.to_string(),
            cache_budget: 1,
            next_site_id: 0,
            functions: functions.into_iter().map(|f| (f.name.clone(), f)).collect(),
        };
        m.next_site_id = m
            .call_sites()
            .iter()
            .map(|cs| cs.id.0 + 1)
            .max()
            .unwrap_or(0);
        m.cache_budget = default_cache_budget(m.instruction_count());
        m
    }

    pub fn function(&self, name: &str) -> Result<&Function> {
        self.functions
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("function `{name}`")))
    }

    /// All call sites, functions in name order, then block and instruction
    /// order.
    pub fn call_sites(&self) -> Vec<CallSite> {
        self.functions
            .values()
            .flat_map(|f| function_sites(f))
            .collect()
    }

    pub fn find_site(&self, id: SiteId) -> Result<CallSite> {
        self.functions
            .values()
            .find_map(|f| function_sites(f).into_iter().find(|cs| cs.id == id))
            .ok_or_else(|| Error::NotFound(format!("call site {id}")))
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.values().map(Function::instruction_count).sum()
    }

    pub fn call_count(&self) -> usize {
        self.functions.values().map(|f| f.calls().count()).sum()
    }

    /// Size used by the i-cache model: instruction count scaled by any
    /// unroll/interleave annotations.
    pub fn code_size(&self) -> u64 {
        self.functions
            .values()
            .flat_map(|f| &f.blocks)
            .map(BasicBlock::code_size)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        let schema = probe.get("schema").and_then(|v| v.as_str()).unwrap_or("");
        expect_schema(PROGMODEL_SCHEMA, schema)?;
        let m: Module = serde_json::from_value(probe)?;
        m.validate()?;
        Ok(m)
    }

    /// Re-checks every structural invariant of the module.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invariant(msg));
        if !self.functions.contains_key(&self.entry_function) {
            return bad(format!("entry function `{}` missing", self.entry_function));
        }
        if self.cache_budget == 0 {
            return bad("cache budget must be positive".into());
        }
        let mut sites = HashSet::new();
        for (name, f) in &self.functions {
            if name != &f.name {
                return bad(format!("function keyed `{name}` is named `{}`", f.name));
            }
            validate_function(f)?;
            for (_, _, site, callee, const_args) in f.calls() {
                let Some(target) = self.functions.get(callee) else {
                    return bad(format!("{site} in `{name}` calls unknown `{callee}`"));
                };
                if const_args > target.param_count {
                    return bad(format!(
                        "{site} passes {const_args} constants to `{callee}` with {} params",
                        target.param_count
                    ));
                }
                if site.0 >= self.next_site_id {
                    return bad(format!("{site} not below next_site_id {}", self.next_site_id));
                }
                if !sites.insert(site) {
                    return bad(format!("duplicate call site {site}"));
                }
            }
        }
        Ok(())
    }
}

/// `ceil(1.2 × size)`, fixed when a program is generated.
pub fn default_cache_budget(instruction_count: usize) -> u64 {
    // Integer form of ceil(6n / 5) avoids float rounding on exact multiples.
    ((6 * instruction_count as u64) + 4) / 5
}

fn function_sites(f: &Function) -> Vec<CallSite> {
    f.calls()
        .map(|(b, i, site, callee, const_args)| CallSite {
            id: site,
            caller: f.name.clone(),
            block: b.id,
            instr_index: i,
            callee: callee.to_string(),
            const_args,
        })
        .collect()
}

fn validate_function(f: &Function) -> Result<()> {
    let bad = |msg: String| Err(Error::Invariant(format!("`{}`: {msg}", f.name)));
    if f.blocks.is_empty() {
        return bad("no blocks".into());
    }
    let mut ids = HashMap::new();
    for (i, b) in f.blocks.iter().enumerate() {
        if ids.insert(b.id, i).is_some() {
            return bad(format!("duplicate block {}", b.id));
        }
    }
    if !ids.contains_key(&f.entry) {
        return bad(format!("entry {} missing", f.entry));
    }
    let mut rets = 0;
    for b in &f.blocks {
        if b.instructions.is_empty() {
            return bad(format!("block {} is empty", b.id));
        }
        let ret_positions: Vec<_> = b
            .instructions
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Opcode::Ret))
            .map(|(i, _)| i)
            .collect();
        match ret_positions.as_slice() {
            [] if b.successors.is_empty() => {
                return bad(format!("block {} has no successors and no ret", b.id))
            }
            [] => {}
            [i] if *i + 1 == b.instructions.len() && b.successors.is_empty() => rets += 1,
            _ => return bad(format!("block {} has a misplaced ret", b.id)),
        }
        for s in &b.successors {
            if !ids.contains_key(s) {
                return bad(format!("block {} jumps to unknown {s}", b.id));
            }
            if *s == f.entry {
                return bad(format!("entry {} has a predecessor", f.entry));
            }
        }
    }
    if rets != 1 {
        return bad(format!("expected exactly one ret, found {rets}"));
    }
    let analysis = FunctionAnalysis::new(f)?;
    if analysis.reachable_count() != f.blocks.len() {
        return bad("unreachable blocks".into());
    }
    Ok(())
}

/// Number of innermost loops across the module; each is one unroll /
/// interleave tunable region.
pub fn count_tunable_regions(m: &Module) -> usize {
    m.functions
        .values()
        .map(|f| {
            FunctionAnalysis::new(f)
                .map(|a| a.loops.innermost().count())
                .unwrap_or(0)
        })
        .sum()
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn block_id_roundtrips_as_string() {
        let json = serde_json::to_string(&BlockId(12)).unwrap();
        assert_eq!(json, "\"b12\"");
        let back: BlockId = serde_json::from_str(&json).unwrap();
        assert_eq!(back, BlockId(12));
        assert!(serde_json::from_str::<BlockId>("\"x3\"").is_err());
    }

    #[test]
    fn cache_budget_is_ceiling_of_six_fifths() {
        assert_eq!(default_cache_budget(10), 12);
        assert_eq!(default_cache_budget(11), 14);
        assert_eq!(default_cache_budget(1), 2);
    }

    #[test]
    fn validate_rejects_broken_modules() {
        let ok = Module::new("main", vec![straight("main", 0, vec![Opcode::FAdd])]);
        ok.validate().unwrap();

        let mut two_rets = ok.clone();
        two_rets.functions.get_mut("main").unwrap().blocks[0]
            .instructions
            .insert(0, Opcode::Ret);
        assert!(matches!(two_rets.validate(), Err(Error::Invariant(_))));

        let dangling = Module::new(
            "main",
            vec![straight("main", 0, vec![op_call(0, "nope", 0)])],
        );
        assert!(dangling.validate().is_err());

        let mut unreachable = ok.clone();
        unreachable
            .functions
            .get_mut("main")
            .unwrap()
            .blocks
            .push(block(7, vec![Opcode::Generic], &[0]));
        assert!(unreachable.validate().is_err());
    }

    #[test]
    fn json_schema_is_checked() {
        let m = Module::new("main", vec![straight("main", 0, vec![Opcode::FAdd])]);
        let text = m.to_json().unwrap();
        assert_eq!(Module::from_json(&text).unwrap(), m);
        let wrong = text.replace(PROGMODEL_SCHEMA, "progmodel/0");
        assert!(matches!(Module::from_json(&wrong), Err(Error::Schema { .. })));
    }

    #[test]
    fn tunable_regions_count_innermost_only() {
        let loop_free = Module::new("main", vec![straight("main", 0, vec![Opcode::FAdd])]);
        assert_eq!(count_tunable_regions(&loop_free), 0);

        // entry → outer header ↔ inner self loop → exit
        let nested = function(
            "main",
            0,
            vec![
                block(0, vec![Opcode::Generic], &[1]),
                block(1, vec![Opcode::Generic], &[2, 3]),
                block(2, vec![Opcode::FAdd], &[2, 1]),
                block(3, vec![Opcode::Ret], &[]),
            ],
        );
        let m = Module::new("main", vec![nested]);
        m.validate().unwrap();
        assert_eq!(count_tunable_regions(&m), 1);
    }
}
