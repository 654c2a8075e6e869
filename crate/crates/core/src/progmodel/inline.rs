//! The inlining transform.
//!
//! The call block is split at the call. The callee's entry block is merged
//! into the split head and the callee's exit block (minus its `ret`) is
//! merged into the split tail; the remaining callee blocks are cloned in
//! between with fresh ids. Entry blocks have no predecessors and exit blocks
//! no successors, so both merges leave the loop structure of the clone
//! intact and nested under the loops of the call block.

use std::collections::HashMap;

use super::{BasicBlock, BlockId, Module, Opcode, SiteId};
use crate::error::{Error, Result};

/// Inlines call site `site` and returns the transformed module. The input
/// is left untouched and the callee keeps its own body.
pub fn apply_inline(m: &Module, site: SiteId) -> Result<Module> {
    let cs = m.find_site(site)?;
    if cs.is_direct_recursion() {
        return Err(Error::RefusedInline(format!(
            "{site}: `{}` calls itself",
            cs.caller
        )));
    }
    let callee = m.function(&cs.callee)?;
    let callee_exit = callee
        .exit_block()
        .ok_or_else(|| Error::Invariant(format!("`{}` has no exit block", callee.name)))?;

    let mut out = m.clone();
    let mut next_site = out.next_site_id;
    let caller = out
        .functions
        .get_mut(&cs.caller)
        .expect("call site caller exists");
    let pos = caller
        .block_position(cs.block)
        .expect("call site block exists");
    let call_block = caller.blocks[pos].clone();
    let before = &call_block.instructions[..cs.instr_index];
    let after = &call_block.instructions[cs.instr_index + 1..];

    let mut next_block = caller.next_block_id();
    let mut block_map: HashMap<BlockId, BlockId> = HashMap::new();
    for b in &callee.blocks {
        let id = if b.id == callee.entry {
            call_block.id
        } else {
            let id = BlockId(next_block);
            next_block += 1;
            id
        };
        block_map.insert(b.id, id);
    }

    let mut clone_ops = |ops: &[Opcode]| -> Vec<Opcode> {
        ops.iter()
            .filter(|op| !matches!(op, Opcode::Ret))
            .map(|op| match op {
                Opcode::Call {
                    callee, const_args, ..
                } => {
                    let site = SiteId(next_site);
                    next_site += 1;
                    Opcode::Call {
                        site,
                        callee: callee.clone(),
                        const_args: *const_args,
                    }
                }
                other => other.clone(),
            })
            .collect()
    };

    let mut spliced: Vec<BasicBlock> = Vec::with_capacity(callee.blocks.len());
    let is_single_block = callee.entry == callee_exit.id;
    for b in &callee.blocks {
        let is_entry = b.id == callee.entry;
        let is_exit = b.id == callee_exit.id;
        let mut instructions = Vec::new();
        if is_entry {
            instructions.extend_from_slice(before);
        }
        instructions.extend(clone_ops(&b.instructions));
        if is_exit {
            instructions.extend_from_slice(after);
        }
        let successors = if is_exit {
            call_block.successors.clone()
        } else {
            b.successors.iter().map(|s| block_map[s]).collect()
        };
        let tuning = if is_entry || (is_exit && is_single_block) {
            call_block.tuning
        } else {
            None
        };
        if instructions.is_empty() {
            return Err(Error::RefusedInline(format!(
                "{site}: splicing `{}` would leave an empty block",
                callee.name
            )));
        }
        let block = BasicBlock {
            id: block_map[&b.id],
            instructions,
            successors,
            tuning,
        };
        if is_entry {
            spliced.insert(0, block);
        } else {
            spliced.push(block);
        }
    }

    caller.blocks.splice(pos..=pos, spliced);
    out.next_site_id = next_site;
    Ok(out)
}
