//! Per-method control-flow graphs over single instructions.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write;

use crate::ir::{Method, MethodId, Op};

/// Instruction-level CFG. Node `i` is instruction `i`; entry is node 0.
///
/// Successor order is fixed: fall-through first, branch target second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cfg {
    pub method: MethodId,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
    branches: Vec<usize>,
}

impl Cfg {
    pub fn build(method: &Method) -> Cfg {
        let n = method.body.len();
        let mut successors = vec![Vec::new(); n];
        let mut branches = Vec::new();
        for ins in &method.body {
            let i = ins.index;
            let succ = &mut successors[i];
            match &ins.op {
                Op::If { target, .. } => {
                    branches.push(i);
                    succ.push(i + 1);
                    succ.push(method.labels[target]);
                }
                Op::Goto { target } => succ.push(method.labels[target]),
                Op::Return { .. } => {}
                _ if i + 1 < n => succ.push(i + 1),
                _ => {}
            }
        }
        let mut predecessors = vec![Vec::new(); n];
        for (from, succ) in successors.iter().enumerate() {
            for &to in succ {
                if !predecessors[to].contains(&from) {
                    predecessors[to].push(from);
                }
            }
        }
        for preds in &mut predecessors {
            preds.sort_unstable();
        }
        Cfg {
            method: method.id.clone(),
            successors,
            predecessors,
            branches,
        }
    }

    pub fn node_count(&self) -> usize {
        self.successors.len()
    }

    pub fn entry(&self) -> usize {
        0
    }

    pub fn successors(&self, node: usize) -> &[usize] {
        &self.successors[node]
    }

    /// Ascending by index.
    pub fn predecessors(&self, node: usize) -> &[usize] {
        &self.predecessors[node]
    }

    /// Indices of `If` instructions, ascending.
    pub fn branch_nodes(&self) -> &[usize] {
        &self.branches
    }

    pub fn edge_count(&self) -> usize {
        self.successors.iter().map(Vec::len).sum()
    }

    /// True iff a directed path (possibly empty) leads from `from` to `to`.
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        if from == to {
            return true;
        }
        let mut seen = vec![false; self.node_count()];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(n) = queue.pop_front() {
            for &s in &self.successors[n] {
                if s == to {
                    return true;
                }
                if !seen[s] {
                    seen[s] = true;
                    queue.push_back(s);
                }
            }
        }
        false
    }

    /// Every node from which `target` is reachable, `target` included.
    pub fn backward_reachable(&self, target: usize) -> Vec<bool> {
        let mut seen = vec![false; self.node_count()];
        let mut queue = VecDeque::from([target]);
        seen[target] = true;
        while let Some(n) = queue.pop_front() {
            for &p in &self.predecessors[n] {
                if !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        seen
    }

    /// Branches whose outcome decides whether `criterion` can still execute:
    /// the criterion is reachable from one successor and unreachable from the other.
    pub fn control_relevant_branches(&self, criterion: usize) -> BTreeSet<usize> {
        let reaching = self.backward_reachable(criterion);
        self.branches
            .iter()
            .copied()
            .filter(|&b| {
                let succ = &self.successors[b];
                succ.iter().any(|&s| reaching[s]) && succ.iter().any(|&s| !reaching[s])
            })
            .collect()
    }

    /// Graphviz rendering, one node per instruction.
    pub fn to_dot(&self, method: &Method) -> String {
        self.to_dot_highlighting(method, &BTreeSet::new())
    }

    /// As [`Cfg::to_dot`], with `marked` nodes filled.
    pub fn to_dot_highlighting(&self, method: &Method, marked: &BTreeSet<usize>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", self.method);
        let _ = writeln!(out, "  node [shape=box, fontname=monospace];");
        for ins in &method.body {
            let label = crate::ir::render_instruction(ins).replace('\\', "\\\\").replace('"', "\\\"");
            let style = if marked.contains(&ins.index) { ", style=filled, fillcolor=lightgrey" } else { "" };
            let _ = writeln!(out, "  n{} [label=\"{}: {}\"{style}];", ins.index, ins.index, label);
        }
        for (from, succ) in self.successors.iter().enumerate() {
            for &to in succ {
                if self.branches.binary_search(&from).is_ok() {
                    let tag = if to == from + 1 { "F" } else { "T" };
                    let _ = writeln!(out, "  n{from} -> n{to} [label=\"{tag}\"];");
                } else {
                    let _ = writeln!(out, "  n{from} -> n{to};");
                }
            }
        }
        out.push_str("}\n");
        out
    }
}
