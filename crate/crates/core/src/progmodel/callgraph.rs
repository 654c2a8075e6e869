//! Call graph, SCC condensation, heights and the bottom-up visit order.

use std::collections::{BTreeSet, HashMap};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};

use super::{CallSite, Module};
use crate::error::{Error, Result};

/// Function-level call graph with its strongly connected components.
#[derive(Clone, Debug)]
pub struct CallGraph {
    names: Vec<String>,
    index: HashMap<String, usize>,
    /// Distinct callees of each function.
    callees: Vec<BTreeSet<usize>>,
    /// Number of call sites targeting each function.
    users: Vec<usize>,
    /// SCCs in bottom-up order (callees before callers).
    sccs: Vec<Vec<usize>>,
    scc_of: Vec<usize>,
    height: Vec<u32>,
}

impl CallGraph {
    pub fn new(m: &Module) -> Self {
        let names: Vec<String> = m.functions.keys().cloned().collect();
        let index: HashMap<String, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let mut callees = vec![BTreeSet::new(); names.len()];
        let mut users = vec![0; names.len()];
        for (i, f) in m.functions.values().enumerate() {
            for (_, _, _, callee, _) in f.calls() {
                if let Some(&j) = index.get(callee) {
                    callees[i].insert(j);
                    users[j] += 1;
                }
            }
        }

        let mut graph = DiGraph::<(), ()>::with_capacity(names.len(), 0);
        let nodes: Vec<NodeIndex> = (0..names.len()).map(|_| graph.add_node(())).collect();
        for (i, cs) in callees.iter().enumerate() {
            for &j in cs {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
        // tarjan_scc yields components in reverse topological order, which
        // for caller→callee edges is bottom-up.
        let sccs: Vec<Vec<usize>> = tarjan_scc(&graph)
            .into_iter()
            .map(|c| {
                let mut c: Vec<usize> = c.into_iter().map(|n| n.index()).collect();
                c.sort_unstable();
                c
            })
            .collect();
        let mut scc_of = vec![0; names.len()];
        for (k, c) in sccs.iter().enumerate() {
            for &f in c {
                scc_of[f] = k;
            }
        }
        let mut scc_height = vec![0u32; sccs.len()];
        for (k, c) in sccs.iter().enumerate() {
            let h = c
                .iter()
                .flat_map(|&f| callees[f].iter())
                .filter(|&&g| scc_of[g] != k)
                .map(|&g| scc_height[scc_of[g]] + 1)
                .max()
                .unwrap_or(0);
            scc_height[k] = h;
        }
        let height = scc_of.iter().map(|&k| scc_height[k]).collect();
        CallGraph {
            names,
            index,
            callees,
            users,
            sccs,
            scc_of,
            height,
        }
    }

    fn idx(&self, f: &str) -> Result<usize> {
        self.index
            .get(f)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("function `{f}`")))
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    /// Distinct caller→callee pairs.
    pub fn edge_count(&self) -> usize {
        self.callees.iter().map(BTreeSet::len).sum()
    }

    /// Longest path to a leaf in the SCC-contracted graph.
    pub fn height(&self, f: &str) -> Result<u32> {
        Ok(self.height[self.idx(f)?])
    }

    /// Number of call sites in the module targeting `f`.
    pub fn users(&self, f: &str) -> Result<usize> {
        Ok(self.users[self.idx(f)?])
    }

    /// Whether `f` sits on a call-graph cycle, self calls included.
    pub fn is_recursive(&self, f: &str) -> Result<bool> {
        let i = self.idx(f)?;
        Ok(self.sccs[self.scc_of[i]].len() > 1 || self.callees[i].contains(&i))
    }

    /// Function names in bottom-up SCC order; names ordered within an SCC.
    pub fn bottom_up(&self) -> impl Iterator<Item = &str> {
        self.sccs
            .iter()
            .flat_map(|c| c.iter().map(|&f| self.names[f].as_str()))
    }
}

/// Height of `f` in the SCC-contracted call graph; leaves are 0.
pub fn call_graph_height(m: &Module, f: &str) -> Result<u32> {
    CallGraph::new(m).height(f)
}

/// Call sites in bottom-up SCC order, then block order, then instruction
/// order within each function.
pub fn enumerate_callsites(m: &Module) -> Vec<CallSite> {
    let cg = CallGraph::new(m);
    let mut out = Vec::new();
    for name in cg.bottom_up() {
        let f = &m.functions[name];
        for (b, i, site, callee, const_args) in f.calls() {
            out.push(CallSite {
                id: site,
                caller: f.name.clone(),
                block: b.id,
                instr_index: i,
                callee: callee.to_string(),
                const_args,
            });
        }
    }
    out
}
