use std::collections::{BTreeMap, BTreeSet};

use lamd::deps::{DependencyKind, DependencyRecord};
use lamd::ir::{Callee, Method, MethodId, Op, Program, Var};

/// Successors read straight off the instruction list.
pub fn successor_lists(method: &Method) -> Vec<Vec<usize>> {
    let n = method.body.len();
    let label = |l: &str| method.labels[l];
    method
        .body
        .iter()
        .enumerate()
        .map(|(i, ins)| {
            let mut succ = match &ins.op {
                Op::Return { .. } => vec![],
                Op::Goto { target } => vec![label(target)],
                Op::If { target, .. } => vec![i + 1, label(target)],
                _ if i + 1 < n => vec![i + 1],
                _ => vec![],
            };
            succ.sort_unstable();
            succ.dedup();
            succ
        })
        .collect()
}

/// Reflexive-transitive reachability by Floyd–Warshall.
pub fn closure_reach(succ: &[Vec<usize>]) -> Vec<Vec<bool>> {
    let n = succ.len();
    let mut r = vec![vec![false; n]; n];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = true;
        for &s in &succ[i] {
            row[s] = true;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if r[i][k] {
                for j in 0..n {
                    if r[k][j] {
                        r[i][j] = true;
                    }
                }
            }
        }
    }
    r
}

/// Branches with one successor that can reach `criterion` and one that cannot.
pub fn oracle_control_relevant(method: &Method, criterion: usize) -> BTreeSet<usize> {
    let succ = successor_lists(method);
    let reach = closure_reach(&succ);
    (0..method.body.len())
        .filter(|&b| matches!(method.body[b].op, Op::If { .. }))
        .filter(|&b| {
            succ[b].iter().any(|&s| reach[s][criterion]) && succ[b].iter().any(|&s| !reach[s][criterion])
        })
        .collect()
}

/// True iff some path from a successor of `from` arrives at `to` without
/// passing a definition of `var` before `to`.
fn def_clear(method: &Method, succ: &[Vec<usize>], from: usize, to: usize, var: &Var) -> bool {
    let mut seen = vec![false; method.body.len()];
    let mut stack: Vec<usize> = succ[from].clone();
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        if seen[n] || method.body[n].def() == Some(var) {
            continue;
        }
        seen[n] = true;
        stack.extend(succ[n].iter().copied());
    }
    false
}

/// Same as [`def_clear`] but the path may start at `from` itself.
fn def_clear_from_entry(method: &Method, succ: &[Vec<usize>], from: usize, to: usize, var: &Var) -> bool {
    if from == to {
        return true;
    }
    method.body[from].def() != Some(var) && def_clear(method, succ, from, to, var)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleSlice {
    pub indices: BTreeSet<usize>,
    pub unresolved_params: BTreeSet<Var>,
}

/// Fixpoint closure: start from the criterion and the branches deciding
/// whether it runs; keep adding any definition that reaches, along a
/// definition-free path, a variable read by an instruction already included.
pub fn oracle_slice(method: &Method, criterion: usize, variables: &BTreeSet<Var>) -> OracleSlice {
    let succ = successor_lists(method);
    let branches = oracle_control_relevant(method, criterion);
    let mut included: BTreeSet<usize> = branches.clone();
    included.insert(criterion);
    let mut criterion_defines_live = false;

    let reads = |u: usize, included_crit_fully: bool| -> BTreeSet<Var> {
        let ins = &method.body[u];
        if u == criterion {
            let mut v = variables.clone();
            if included_crit_fully {
                v.extend(ins.uses().into_iter().cloned());
            }
            v
        } else if let Op::If { cond, .. } = &ins.op {
            BTreeSet::from([cond.clone()])
        } else {
            ins.uses().into_iter().cloned().collect()
        }
    };

    loop {
        let mut changed = false;
        for d in 0..method.body.len() {
            let Some(x) = method.body[d].def() else { continue };
            if d == criterion && criterion_defines_live {
                continue;
            }
            if d != criterion && included.contains(&d) {
                continue;
            }
            let feeds = included
                .iter()
                .any(|&u| reads(u, criterion_defines_live).contains(x) && def_clear(method, &succ, d, u, x));
            if feeds {
                changed = true;
                if d == criterion {
                    criterion_defines_live = true;
                } else {
                    included.insert(d);
                }
            }
        }
        if !changed {
            break;
        }
    }

    let indices = included;

    let unresolved_params = method
        .params
        .iter()
        .filter(|p| {
            indices
                .iter()
                .any(|&u| reads(u, criterion_defines_live).contains(*p) && def_clear_from_entry(method, &succ, 0, u, p))
        })
        .cloned()
        .collect();
    OracleSlice {
        indices,
        unresolved_params,
    }
}

/// Dependency records by brute-force path search.
pub fn oracle_dependencies(
    method: &Method,
    slice: &BTreeSet<usize>,
    criterion: usize,
    variables: &BTreeSet<Var>,
) -> Vec<DependencyRecord> {
    let succ = successor_lists(method);
    let mut records = Vec::new();
    if !variables.is_empty() {
        records.push(DependencyRecord::new(DependencyKind::Direct, variables.iter().cloned()));
    }

    // definitions in the slice that feed the criterion through chains of uses
    let mut feeding: BTreeSet<usize> = BTreeSet::new();
    let mut frontier: Vec<(usize, Var)> = variables.iter().map(|v| (criterion, v.clone())).collect();
    while let Some((u, x)) = frontier.pop() {
        for &d in slice {
            if method.body[d].def() == Some(&x) && !feeding.contains(&d) && def_clear(method, &succ, d, u, &x) {
                feeding.insert(d);
                frontier.extend(method.body[d].uses().into_iter().map(|v| (d, v.clone())));
            }
        }
    }
    let transitive: BTreeSet<Var> = feeding
        .iter()
        .flat_map(|&d| method.body[d].uses())
        .filter(|v| !variables.contains(*v))
        .cloned()
        .collect();
    if !transitive.is_empty() {
        records.push(DependencyRecord::new(DependencyKind::Transitive, transitive));
    }

    let branches = oracle_control_relevant(method, criterion);
    for &i in slice {
        match &method.body[i].op {
            Op::If { cond, .. } if branches.contains(&i) => {
                records.push(DependencyRecord::new(DependencyKind::Conditional, [cond.clone()]));
            }
            Op::BinOp { dst, lhs, rhs, .. } => {
                let kind = match rhs {
                    Some(r) if r != lhs => DependencyKind::Parallel,
                    _ => DependencyKind::Derived,
                };
                let mut vars = vec![lhs.clone(), dst.clone()];
                vars.extend(rhs.iter().cloned());
                records.push(DependencyRecord::new(kind, vars));
            }
            Op::Assign { dst, src } => {
                records.push(DependencyRecord::new(DependencyKind::Derived, [src.clone(), dst.clone()]));
            }
            _ => {}
        }
    }
    records.sort();
    records
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleFcg {
    pub nodes: BTreeSet<MethodId>,
    pub direct_callers: BTreeSet<MethodId>,
}

/// Function call graphs of `api`: methods that can reach a direct caller
/// through calls, grouped by undirected connectivity among themselves and
/// ordered by smallest member.
pub fn oracle_fcgs(program: &Program, api: &str) -> Vec<OracleFcg> {
    let ids: Vec<&MethodId> = program.methods.keys().collect();
    let n = ids.len();
    let pos: BTreeMap<&MethodId, usize> = ids.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    let mut calls = vec![Vec::new(); n];
    let mut direct = vec![false; n];
    for (i, id) in ids.iter().enumerate() {
        for ins in &program.methods[*id].body {
            match ins.callee() {
                Some(Callee::Internal(c)) => calls[i].push(pos[c]),
                Some(Callee::External(sig)) if sig.to_string() == api => direct[i] = true,
                _ => {}
            }
        }
    }
    let reach = closure_reach(&calls);
    let member: Vec<bool> = (0..n).map(|i| (0..n).any(|j| direct[j] && reach[i][j])).collect();

    let mut undirected = vec![Vec::new(); n];
    for i in 0..n {
        for &j in &calls[i] {
            if member[i] && member[j] {
                undirected[i].push(j);
                undirected[j].push(i);
            }
        }
    }
    let connected = closure_reach(&undirected);
    let mut out: Vec<OracleFcg> = Vec::new();
    let mut assigned = vec![false; n];
    for i in (0..n).filter(|&i| member[i]) {
        if assigned[i] {
            continue;
        }
        let group: Vec<usize> = (0..n).filter(|&j| member[j] && connected[i][j]).collect();
        for &j in &group {
            assigned[j] = true;
        }
        out.push(OracleFcg {
            nodes: group.iter().map(|&j| ids[j].clone()).collect(),
            direct_callers: group.iter().filter(|&&j| direct[j]).map(|&j| ids[j].clone()).collect(),
        });
    }
    out
}
