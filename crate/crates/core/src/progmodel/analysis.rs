//! Per-function CFG analyses: dominators, natural loops and static block
//! frequency.

use std::collections::{BTreeMap, HashMap};

use super::{BlockId, Function};
use crate::error::{Error, Result};

/// Static trip count assumed for every loop level.
pub const TRIP_ESTIMATE: f64 = 8.0;

/// Index-based view of a function's CFG.
#[derive(Clone, Debug)]
pub(crate) struct Cfg {
    pub ids: Vec<BlockId>,
    pub index: HashMap<BlockId, usize>,
    pub succs: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
    pub entry: usize,
}

impl Cfg {
    pub fn new(f: &Function) -> Result<Self> {
        let ids: Vec<BlockId> = f.blocks.iter().map(|b| b.id).collect();
        let index: HashMap<BlockId, usize> =
            ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let lookup = |id: &BlockId| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Invariant(format!("`{}`: unknown block {id}", f.name)))
        };
        let mut succs = Vec::with_capacity(ids.len());
        for b in &f.blocks {
            succs.push(b.successors.iter().map(lookup).collect::<Result<Vec<_>>>()?);
        }
        let mut preds = vec![Vec::new(); ids.len()];
        for (u, ss) in succs.iter().enumerate() {
            for &v in ss {
                preds[v].push(u);
            }
        }
        let entry = lookup(&f.entry)?;
        Ok(Cfg {
            ids,
            index,
            succs,
            preds,
            entry,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Reverse postorder of the blocks reachable from the entry.
    pub fn reverse_postorder(&self) -> Vec<usize> {
        let mut visited = vec![false; self.len()];
        let mut post = Vec::with_capacity(self.len());
        let mut stack = vec![(self.entry, 0usize)];
        visited[self.entry] = true;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&s) = self.succs[node].get(*next) {
                *next += 1;
                if !visited[s] {
                    visited[s] = true;
                    stack.push((s, 0));
                }
            } else {
                post.push(node);
                stack.pop();
            }
        }
        post.reverse();
        post
    }
}

/// Immediate-dominator tree of one function.
#[derive(Clone, Debug)]
pub struct DomTree {
    ids: Vec<BlockId>,
    idom: Vec<Option<usize>>,
    level: Vec<u32>,
}

impl DomTree {
    fn build(cfg: &Cfg) -> DomTree {
        let rpo = cfg.reverse_postorder();
        let mut order = vec![usize::MAX; cfg.len()];
        for (i, &b) in rpo.iter().enumerate() {
            order[b] = i;
        }
        let mut idom: Vec<Option<usize>> = vec![None; cfg.len()];
        idom[cfg.entry] = Some(cfg.entry);

        let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
            while a != b {
                while order[a] > order[b] {
                    a = idom[a].expect("processed");
                }
                while order[b] > order[a] {
                    b = idom[b].expect("processed");
                }
            }
            a
        };

        let mut changed = true;
        while changed {
            changed = false;
            for &b in rpo.iter().skip(1) {
                let mut new_idom = None;
                for &p in &cfg.preds[b] {
                    if idom[p].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
                if new_idom.is_some() && idom[b] != new_idom {
                    idom[b] = new_idom;
                    changed = true;
                }
            }
        }

        let mut level = vec![0; cfg.len()];
        for &b in &rpo {
            level[b] = if b == cfg.entry {
                1
            } else {
                level[idom[b].expect("reachable")] + 1
            };
        }
        DomTree {
            ids: cfg.ids.clone(),
            idom,
            level,
        }
    }

    pub(crate) fn idom_index(&self, b: usize) -> Option<usize> {
        self.idom[b]
    }

    /// Whether block index `a` dominates block index `b`.
    pub(crate) fn dominates_index(&self, a: usize, mut b: usize) -> bool {
        loop {
            if a == b {
                return true;
            }
            match self.idom[b] {
                Some(p) if p != b => b = p,
                _ => return false,
            }
        }
    }

    pub(crate) fn level_index(&self, b: usize) -> u32 {
        self.level[b]
    }

    pub fn idom(&self, b: BlockId) -> Option<BlockId> {
        let i = self.ids.iter().position(|&id| id == b)?;
        self.idom[i].map(|d| self.ids[d])
    }

    /// Depth of the dominator tree, the entry being level 1.
    pub fn max_level(&self) -> u32 {
        self.level.iter().copied().max().unwrap_or(0)
    }

    pub fn as_map(&self) -> BTreeMap<BlockId, BlockId> {
        self.idom
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.map(|d| (self.ids[i], self.ids[d])))
            .collect()
    }
}

/// Immediate dominators of every reachable block; the entry maps to itself.
pub fn compute_dominators(f: &Function) -> Result<BTreeMap<BlockId, BlockId>> {
    let cfg = Cfg::new(f)?;
    Ok(DomTree::build(&cfg).as_map())
}

/// One natural loop (all back edges to the same header merged).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Loop {
    pub header: BlockId,
    /// Member blocks in function block order, header included.
    pub members: Vec<BlockId>,
    pub depth: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoopNest {
    /// Loops ordered by the position of their header.
    pub loops: Vec<Loop>,
    block_depth: HashMap<BlockId, u32>,
}

impl LoopNest {
    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    /// Depth of the innermost loop containing `b`, 0 outside all loops.
    pub fn depth_of(&self, b: BlockId) -> u32 {
        self.block_depth.get(&b).copied().unwrap_or(0)
    }

    pub fn max_depth(&self) -> u32 {
        self.loops.iter().map(|l| l.depth).max().unwrap_or(0)
    }

    /// Loops that contain no other loop.
    pub fn innermost(&self) -> impl Iterator<Item = &Loop> {
        self.loops.iter().filter(move |l| {
            !self
                .loops
                .iter()
                .any(|m| m.header != l.header && l.members.contains(&m.header))
        })
    }
}

fn find_loops(cfg: &Cfg, dom: &DomTree, fname: &str) -> Result<LoopNest> {
    // Retreating edges from a DFS; reducibility requires each one to be a
    // back edge (target dominates source).
    let n = cfg.len();
    let mut state = vec![0u8; n]; // 0 new, 1 on stack, 2 done
    let mut back_edges: Vec<(usize, usize)> = Vec::new();
    let mut stack = vec![(cfg.entry, 0usize)];
    state[cfg.entry] = 1;
    while let Some(&mut (node, ref mut next)) = stack.last_mut() {
        if let Some(&s) = cfg.succs[node].get(*next) {
            *next += 1;
            match state[s] {
                0 => {
                    state[s] = 1;
                    stack.push((s, 0));
                }
                1 => {
                    if !dom.dominates_index(s, node) {
                        return Err(Error::Invariant(format!(
                            "`{fname}`: irreducible edge {} -> {}",
                            cfg.ids[node], cfg.ids[s]
                        )));
                    }
                    back_edges.push((node, s));
                }
                _ => {
                    if dom.dominates_index(s, node) {
                        back_edges.push((node, s));
                    }
                }
            }
        } else {
            state[node] = 2;
            stack.pop();
        }
    }

    let mut headers: Vec<usize> = back_edges.iter().map(|&(_, h)| h).collect();
    headers.sort_unstable();
    headers.dedup();

    let mut member_sets: Vec<Vec<bool>> = Vec::with_capacity(headers.len());
    for &h in &headers {
        let mut member = vec![false; n];
        member[h] = true;
        let mut work: Vec<usize> = back_edges
            .iter()
            .filter(|&&(_, t)| t == h)
            .map(|&(s, _)| s)
            .collect();
        while let Some(b) = work.pop() {
            if !member[b] {
                member[b] = true;
                work.extend(cfg.preds[b].iter().copied());
            }
        }
        member_sets.push(member);
    }

    let mut loops = Vec::with_capacity(headers.len());
    for (i, &h) in headers.iter().enumerate() {
        let enclosing = headers
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i && member_sets[j][h])
            .count() as u32;
        loops.push(Loop {
            header: cfg.ids[h],
            members: (0..n)
                .filter(|&b| member_sets[i][b])
                .map(|b| cfg.ids[b])
                .collect(),
            depth: enclosing + 1,
        });
    }
    let mut block_depth = HashMap::new();
    for b in 0..n {
        let d = member_sets.iter().filter(|m| m[b]).count() as u32;
        if d > 0 {
            block_depth.insert(cfg.ids[b], d);
        }
    }
    Ok(LoopNest { loops, block_depth })
}

/// Natural loops of `f`, nested by containment.
pub fn detect_loops(f: &Function) -> Result<LoopNest> {
    Ok(FunctionAnalysis::new(f)?.loops)
}

/// Static frequency estimate `TRIP_ESTIMATE^depth(b)`.
pub fn block_frequency(f: &Function, b: BlockId) -> Result<f64> {
    let a = FunctionAnalysis::new(f)?;
    if !a.cfg.index.contains_key(&b) {
        return Err(Error::NotFound(format!("block {b} in `{}`", f.name)));
    }
    Ok(a.frequency(b))
}

/// All per-function analyses, computed once.
#[derive(Clone, Debug)]
pub struct FunctionAnalysis {
    pub(crate) cfg: Cfg,
    pub dom: DomTree,
    pub loops: LoopNest,
}

impl FunctionAnalysis {
    pub fn new(f: &Function) -> Result<Self> {
        let cfg = Cfg::new(f)?;
        let dom = DomTree::build(&cfg);
        let loops = find_loops(&cfg, &dom, &f.name)?;
        Ok(FunctionAnalysis { cfg, dom, loops })
    }

    pub fn frequency(&self, b: BlockId) -> f64 {
        TRIP_ESTIMATE.powi(self.loops.depth_of(b) as i32)
    }

    pub(crate) fn reachable_count(&self) -> usize {
        (0..self.cfg.len())
            .filter(|&b| self.dom.idom_index(b).is_some())
            .count()
    }

    /// Whether block `a` dominates block `b`.
    pub fn dominates(&self, a: BlockId, b: BlockId) -> bool {
        match (self.cfg.index.get(&a), self.cfg.index.get(&b)) {
            (Some(&a), Some(&b)) => self.dom.dominates_index(a, b),
            _ => false,
        }
    }

    pub fn dom_level(&self, b: BlockId) -> u32 {
        self.cfg
            .index
            .get(&b)
            .map_or(0, |&i| self.dom.level_index(i))
    }
}
