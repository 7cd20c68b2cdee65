//! Program call graph and the per-API function call graphs (FCGs).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::ir::{Callee, MethodId, Program};
use crate::rules::SuspiciousApiSite;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallEdge {
    pub caller: MethodId,
    pub callee: MethodId,
    pub call_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CallGraph {
    pub nodes: BTreeSet<MethodId>,
    /// Sorted by (caller, callee, call index).
    pub edges: Vec<CallEdge>,
    pub externals: BTreeSet<MethodId>,
}

impl CallGraph {
    /// One edge per internal invoke. Calls resolve only by exact signature.
    pub fn build(program: &Program) -> CallGraph {
        let mut edges = Vec::new();
        let mut externals = BTreeSet::new();
        for (id, method) in &program.methods {
            for ins in &method.body {
                match ins.callee() {
                    Some(Callee::Internal(callee)) => edges.push(CallEdge {
                        caller: id.clone(),
                        callee: callee.clone(),
                        call_index: ins.index,
                    }),
                    Some(Callee::External(sig)) => {
                        externals.insert(sig.clone());
                    }
                    None => {}
                }
            }
        }
        edges.sort();
        CallGraph {
            nodes: program.methods.keys().cloned().collect(),
            edges,
            externals,
        }
    }

    pub fn callers_of<'a>(&'a self, callee: &'a MethodId) -> impl Iterator<Item = &'a CallEdge> + 'a {
        self.edges.iter().filter(move |e| &e.callee == callee)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCallGraph {
    pub api: String,
    pub nodes: BTreeSet<MethodId>,
    pub edges: Vec<CallEdge>,
    pub direct_callers: BTreeSet<MethodId>,
}

impl FunctionCallGraph {
    /// `caller -> callee` lines, one per distinct pair; the lone node when edgeless.
    pub fn edge_text(&self) -> String {
        let pairs: BTreeSet<(&MethodId, &MethodId)> = self.edges.iter().map(|e| (&e.caller, &e.callee)).collect();
        if pairs.is_empty() {
            return self
                .nodes
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join("\n");
        }
        pairs
            .into_iter()
            .map(|(a, b)| format!("{a} -> {b}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", self.api);
        for n in &self.nodes {
            let shape = if self.direct_callers.contains(n) { "doublecircle" } else { "ellipse" };
            let _ = writeln!(out, "  \"{n}\" [shape={shape}];");
        }
        let _ = writeln!(out, "  \"{}\" [shape=box];", self.api);
        for e in &self.edges {
            let _ = writeln!(out, "  \"{}\" -> \"{}\" [label=\"{}\"];", e.caller, e.callee, e.call_index);
        }
        for d in &self.direct_callers {
            let _ = writeln!(out, "  \"{d}\" -> \"{}\" [style=dashed];", self.api);
        }
        out.push_str("}\n");
        out
    }
}

/// Backward call closure of the sites' methods, split into weakly connected
/// components. Components are ordered by their smallest method id.
///
/// All sites must name the same API; an empty slice yields no graphs.
pub fn api_fcgs(callgraph: &CallGraph, sites: &[SuspiciousApiSite]) -> Vec<FunctionCallGraph> {
    let Some(first) = sites.first() else { return Vec::new() };
    assert!(
        sites.iter().all(|s| s.api_signature == first.api_signature),
        "api_fcgs expects sites of a single API"
    );
    let direct: BTreeSet<MethodId> = sites.iter().map(|s| s.method.clone()).collect();

    let mut closure = direct.clone();
    let mut queue: VecDeque<MethodId> = direct.iter().cloned().collect();
    while let Some(m) = queue.pop_front() {
        for e in callgraph.callers_of(&m) {
            if closure.insert(e.caller.clone()) {
                queue.push_back(e.caller.clone());
            }
        }
    }
    let edges: Vec<&CallEdge> = callgraph
        .edges
        .iter()
        .filter(|e| closure.contains(&e.caller) && closure.contains(&e.callee))
        .collect();

    // union-find over the closure
    let ids: Vec<&MethodId> = closure.iter().collect();
    let pos: BTreeMap<&MethodId, usize> = ids.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in &edges {
        let a = find(&mut parent, pos[&e.caller]);
        let b = find(&mut parent, pos[&e.callee]);
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<MethodId>> = BTreeMap::new();
    for (i, m) in ids.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().insert((*m).clone());
    }
    // roots are the minimum index of each component, so map order is smallest-id order
    groups
        .into_values()
        .map(|nodes| FunctionCallGraph {
            api: first.api_signature.clone(),
            edges: edges
                .iter()
                .filter(|e| nodes.contains(&e.caller))
                .map(|e| (*e).clone())
                .collect(),
            direct_callers: nodes.intersection(&direct).cloned().collect(),
            nodes,
        })
        .collect()
}
