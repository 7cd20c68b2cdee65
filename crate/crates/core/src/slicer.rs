//! Two-stage backward slicing from a call site, plus recursion into callers
//! for parameters the slice leaves unresolved.
//!
//! Stage 1 propagates the set of relevant variables backwards over the CFG
//! until it stabilises. A unit is relevant when it defines a variable that is
//! live below it, or when it is a branch that decides whether the criterion
//! runs; relevant units contribute their used variables. Stage 2 walks the
//! same region again and keeps the units that stage 1 marked relevant.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::callgraph::CallGraph;
use crate::cfg::Cfg;
use crate::ir::{render_instruction, InstrKind, Method, MethodId, Op, Program, Var};
use crate::rules::SuspiciousApiSite;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicingCriterion {
    pub method: MethodId,
    pub statement_index: usize,
    pub variables: BTreeSet<Var>,
}

impl SlicingCriterion {
    /// Criterion over every variable the invoke reads, receiver included.
    /// `None` when the instruction is not an invoke.
    pub fn at_invoke(method: &Method, index: usize) -> Option<SlicingCriterion> {
        let ins = method.body.get(index)?;
        if ins.kind() != InstrKind::Invoke {
            return None;
        }
        Some(SlicingCriterion {
            method: method.id.clone(),
            statement_index: index,
            variables: ins.uses().into_iter().cloned().collect(),
        })
    }

    /// Criterion restricted to `variables`, which must be read by the invoke.
    pub fn with_variables(method: &Method, index: usize, variables: BTreeSet<Var>) -> Option<SlicingCriterion> {
        let full = Self::at_invoke(method, index)?;
        variables.is_subset(&full.variables).then_some(SlicingCriterion {
            variables,
            ..full
        })
    }
}

/// Relevant variables live on entry to each visited unit.
pub type VarMap = BTreeMap<usize, BTreeSet<Var>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub method: MethodId,
    pub criterion: SlicingCriterion,
    pub indices: BTreeSet<usize>,
    pub unresolved_params: BTreeSet<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceLimits {
    pub max_depth: usize,
}

impl Default for SliceLimits {
    fn default() -> Self {
        SliceLimits { max_depth: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterSlice {
    pub root: Slice,
    /// Slices of caller methods, one per call site that binds an unresolved parameter.
    pub caller_slices: BTreeMap<MethodId, Vec<Slice>>,
    pub depth: usize,
    pub truncated: bool,
}

fn live_below(cfg: &Cfg, varmap: &VarMap, node: usize) -> BTreeSet<Var> {
    let mut out = BTreeSet::new();
    for s in cfg.successors(node) {
        if let Some(vars) = varmap.get(s) {
            out.extend(vars.iter().cloned());
        }
    }
    out
}

fn is_relevant(method: &Method, branches: &BTreeSet<usize>, node: usize, live: &BTreeSet<Var>) -> bool {
    let ins = method.instruction(node);
    match &ins.op {
        Op::If { .. } => branches.contains(&node),
        _ => ins.def().is_some_and(|d| live.contains(d)),
    }
}

/// Stage 1: variable retrieval.
pub fn retrieve_variables(cfg: &Cfg, method: &Method, criterion: &SlicingCriterion) -> VarMap {
    let crit = criterion.statement_index;
    let branches = cfg.control_relevant_branches(crit);
    let mut varmap = VarMap::new();
    let mut queue = VecDeque::from([crit]);
    let mut queued = vec![false; cfg.node_count()];
    queued[crit] = true;

    while let Some(node) = queue.pop_front() {
        queued[node] = false;
        let mut locals = live_below(cfg, &varmap, node);
        if is_relevant(method, &branches, node, &locals) {
            let ins = method.instruction(node);
            if let Some(d) = ins.def() {
                locals.remove(d);
            }
            locals.extend(ins.uses().into_iter().cloned());
        }
        if node == crit {
            locals.extend(criterion.variables.iter().cloned());
        }
        let first_visit = !varmap.contains_key(&node);
        let changed = varmap.get(&node) != Some(&locals);
        varmap.insert(node, locals);
        if first_visit || changed {
            for &p in cfg.predecessors(node) {
                if !queued[p] {
                    queued[p] = true;
                    queue.push_back(p);
                }
            }
        }
    }
    varmap
}

/// Stage 2: slice extraction over the units reached by stage 1.
pub fn extract_slice(cfg: &Cfg, method: &Method, criterion: &SlicingCriterion, varmap: &VarMap) -> Slice {
    let crit = criterion.statement_index;
    let branches = cfg.control_relevant_branches(crit);
    let mut indices = BTreeSet::from([crit]);
    let mut visited = vec![false; cfg.node_count()];
    let mut queue = VecDeque::new();
    for &p in cfg.predecessors(crit) {
        visited[p] = true;
        queue.push_back(p);
    }
    while let Some(node) = queue.pop_front() {
        let live = live_below(cfg, varmap, node);
        if is_relevant(method, &branches, node, &live) {
            indices.insert(node);
        }
        for &p in cfg.predecessors(node) {
            if !visited[p] {
                visited[p] = true;
                queue.push_back(p);
            }
        }
    }
    let unresolved_params = varmap
        .get(&cfg.entry())
        .map(|live| live.iter().filter(|v| method.is_param(v)).cloned().collect())
        .unwrap_or_default();
    Slice {
        method: method.id.clone(),
        criterion: criterion.clone(),
        indices,
        unresolved_params,
    }
}

/// Both stages on one method.
pub fn slice_method(method: &Method, criterion: &SlicingCriterion) -> Slice {
    let cfg = Cfg::build(method);
    let varmap = retrieve_variables(&cfg, method, criterion);
    extract_slice(&cfg, method, criterion, &varmap)
}

/// Slices `site` and, while parameters stay unresolved, every caller that
/// binds them, breadth first up to `limits.max_depth` levels.
///
/// Panics if `site` does not reference an invoke of `program`.
pub fn backward_slice(program: &Program, site: &SuspiciousApiSite, limits: SliceLimits) -> InterSlice {
    let method = program
        .method(&site.method)
        .unwrap_or_else(|| panic!("site method {} not in program", site.method));
    let criterion = SlicingCriterion::at_invoke(method, site.instruction_index)
        .unwrap_or_else(|| panic!("site {}:{} is not an invoke", site.method, site.instruction_index));
    backward_slice_from(program, method, &criterion, limits)
}

pub fn backward_slice_from(
    program: &Program,
    method: &Method,
    criterion: &SlicingCriterion,
    limits: SliceLimits,
) -> InterSlice {
    let callgraph = CallGraph::build(program);
    let root = slice_method(method, criterion);
    let mut visited = BTreeSet::from([root.method.clone()]);
    let mut caller_slices: BTreeMap<MethodId, Vec<Slice>> = BTreeMap::new();
    let mut truncated = false;
    let mut depth = 0;

    // (method, its unresolved parameters) awaiting resolution at the current level
    let mut level: Vec<(MethodId, BTreeSet<Var>)> = vec![(root.method.clone(), root.unresolved_params.clone())];
    let mut current = 0;
    while !level.is_empty() {
        // caller -> [(call index, bound argument variables)]
        let mut pending: BTreeMap<MethodId, BTreeMap<usize, BTreeSet<Var>>> = BTreeMap::new();
        for (callee, unresolved) in &level {
            if unresolved.is_empty() {
                continue;
            }
            let positions: Vec<usize> = program.methods[callee]
                .params
                .iter()
                .enumerate()
                .filter(|(_, p)| unresolved.contains(*p))
                .map(|(i, _)| i)
                .collect();
            for edge in callgraph.callers_of(callee) {
                if visited.contains(&edge.caller) {
                    continue;
                }
                let caller = &program.methods[&edge.caller];
                let Op::Invoke { args, .. } = &caller.instruction(edge.call_index).op else {
                    unreachable!("call graph edges point at invokes")
                };
                pending
                    .entry(edge.caller.clone())
                    .or_default()
                    .entry(edge.call_index)
                    .or_default()
                    .extend(positions.iter().map(|&i| args[i].clone()));
            }
        }
        if pending.is_empty() {
            break;
        }
        if current == limits.max_depth {
            truncated = true;
            break;
        }
        current += 1;
        let mut next = Vec::new();
        for (caller_id, sites) in pending {
            let caller = &program.methods[&caller_id];
            let mut slices = Vec::new();
            let mut unresolved = BTreeSet::new();
            for (call_index, vars) in sites {
                let crit = SlicingCriterion::with_variables(caller, call_index, vars)
                    .expect("bound arguments are read by the call");
                let slice = slice_method(caller, &crit);
                unresolved.extend(slice.unresolved_params.iter().cloned());
                slices.push(slice);
            }
            visited.insert(caller_id.clone());
            caller_slices.insert(caller_id.clone(), slices);
            next.push((caller_id, unresolved));
        }
        depth = current;
        level = next;
    }

    InterSlice {
        root,
        caller_slices,
        depth,
        truncated,
    }
}

fn render_slice(out: &mut String, heading: &str, slice: &Slice, method: &Method) {
    let cfg = Cfg::build(method);
    let params = method.params.iter().map(Var::as_str).collect::<Vec<_>>().join(", ");
    let _ = writeln!(out, "{heading} {} ({params})", slice.method);
    let vars = slice
        .criterion
        .variables
        .iter()
        .map(Var::as_str)
        .collect::<Vec<_>>()
        .join(", ");
    let _ = writeln!(out, "criterion: {} {{{vars}}}", slice.criterion.statement_index);
    for &i in &slice.indices {
        let ins = method.instruction(i);
        let text = render_instruction(ins);
        if ins.kind() == InstrKind::If {
            let succ = cfg
                .successors(i)
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            let _ = writeln!(out, "  {i}: {text}  -> [{succ}]");
        } else {
            let _ = writeln!(out, "  {i}: {text}");
        }
    }
    if !slice.unresolved_params.is_empty() {
        let unresolved = slice
            .unresolved_params
            .iter()
            .map(Var::as_str)
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(out, "unresolved parameters: {unresolved}");
    }
}

/// Canonical text of an inter-procedural slice: the root function first,
/// then caller slices in method order.
pub fn slice_to_text(inter: &InterSlice, program: &Program) -> String {
    let mut out = String::new();
    render_slice(&mut out, "function", &inter.root, &program.methods[&inter.root.method]);
    for (caller, slices) in &inter.caller_slices {
        for slice in slices {
            out.push('\n');
            render_slice(&mut out, "caller", slice, &program.methods[caller]);
        }
    }
    if inter.truncated {
        let _ = writeln!(out, "\n(caller resolution stopped at depth {})", inter.depth);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_fragment, parse_program};
    use crate::rules::{find_suspicious_sites, RuleSet};

    fn slice_at(src: &str, index: usize) -> (Method, VarMap, Slice) {
        let m = parse_fragment(src).unwrap();
        let crit = SlicingCriterion::at_invoke(&m, index).unwrap();
        let cfg = Cfg::build(&m);
        let vm = retrieve_variables(&cfg, &m, &crit);
        let s = extract_slice(&cfg, &m, &crit, &vm);
        (m, vm, s)
    }

    fn set(vars: &[&str]) -> BTreeSet<Var> {
        vars.iter().map(|v| Var::from(*v)).collect()
    }

    #[test]
    fn single_const_resolves_argument() {
        let (_, vm, s) = slice_at("method A.m/0 {\n r2 = const 5\n invoke X.m/1 (r2)\n}", 1);
        assert_eq!(vm[&1], set(&["r2"]));
        assert!(vm[&0].is_empty());
        assert_eq!(s.indices, BTreeSet::from([0, 1]));
    }

    #[test]
    fn binop_operands_live_above_assignment() {
        let (_, vm, _) = slice_at("method A.m/0 {\n r2 = add r3, r4\n invoke X.m/1 (r2)\n}", 1);
        assert_eq!(vm[&0], set(&["r3", "r4"]));
    }

    #[test]
    fn gating_branch_condition_is_retrieved() {
        // 0: r9 = const 1; 1: if r9 goto Skip; 2: invoke; 3: Skip: return
        let (_, vm, s) = slice_at(
            "method A.m/0 {\n r9 = const 1\n if r9 goto Skip\n invoke X.f/0 ()\nSkip:\n return\n}",
            2,
        );
        assert_eq!(vm[&1], set(&["r9"]));
        assert!(vm[&0].is_empty());
        assert_eq!(s.indices, BTreeSet::from([0, 1, 2]));
    }

    #[test]
    fn lone_criterion() {
        let (_, _, s) = slice_at("method A.m/0 {\n invoke X.f/0 ()\n}", 0);
        assert_eq!(s.indices, BTreeSet::from([0]));
    }

    #[test]
    fn unrelated_logging_excluded() {
        let src = "method A.m/1 (p) {
  r1 = const \"tag\"
  r2 = invoke android.util.Log.d/2 (r1, r1)
  r3 = const 7
  r4 = mul r3, r3
  r5 = add r4, p
  r6 = const \"log\"
  invoke android.util.Log.i/2 (r6, r1)
  invoke X.sink/1 (r5)
}";
        let (_, _, s) = slice_at(src, 7);
        assert_eq!(s.indices, BTreeSet::from([2, 3, 4, 7]));
        assert_eq!(s.unresolved_params, set(&["p"]));
    }

    #[test]
    fn rejoining_branch_excluded() {
        let src = "method A.m/1 (p) {
  r1 = const 1
  if p goto J
  r5 = const 3
J:
  invoke X.f/1 (r1)
}";
        let (_, _, s) = slice_at(src, 3);
        assert_eq!(s.indices, BTreeSet::from([0, 3]));
        assert!(s.unresolved_params.is_empty());
    }

    #[test]
    fn loop_carried_definition_is_found() {
        let src = "method A.m/0 {
  r1 = const 0
  r2 = const 1
L:
  r1 = add r1, r2
  r3 = const 9
  if r3 goto L
  invoke X.f/1 (r1)
}";
        let (_, vm, s) = slice_at(src, 5);
        // both arms of the back-branch reach the invoke, so it stays out
        assert_eq!(s.indices, BTreeSet::from([0, 1, 2, 5]));
        assert_eq!(vm[&4], set(&["r1", "r2"]));
    }

    const TWO_METHODS: &str = "method app.Main.run/0 {
  r0 = invoke app.Main.context/0 ()
  r1 = invoke [r0] android.telephony.TelephonyManager.getDeviceId/0 ()
  r2 = const \"unused\"
  invoke app.Main.helper/1 (r1)
  return
}
method app.Main.context/0 {
  r0 = const \"ctx\"
  return r0
}
method app.Main.helper/1 (imei) {
  r1 = invoke android.telephony.SmsManager.getDefault/0 ()
  r2 = const \"5554\"
  invoke [r1] android.telephony.SmsManager.sendTextMessage/5 (r2, r2, imei, r2, r2)
  return
}";

    #[test]
    fn caller_resolves_parameter() {
        let p = parse_program(TWO_METHODS).unwrap();
        let sites = find_suspicious_sites(&p, &RuleSet::bundled());
        let send = sites.iter().find(|s| s.api_signature.contains("sendText")).unwrap();
        let inter = backward_slice(&p, send, SliceLimits::default());
        assert_eq!(inter.root.unresolved_params, set(&["imei"]));
        let main: MethodId = "app.Main.run/0".parse().unwrap();
        let caller = &inter.caller_slices[&main];
        assert_eq!(caller.len(), 1);
        assert_eq!(caller[0].indices, BTreeSet::from([0, 1, 3]));
        assert_eq!(inter.depth, 1);
        assert!(!inter.truncated);
    }

    #[test]
    fn parameterless_site_has_no_callers() {
        let p = parse_program(TWO_METHODS).unwrap();
        let sites = find_suspicious_sites(&p, &RuleSet::bundled());
        let dev = sites.iter().find(|s| s.api_signature.contains("getDeviceId")).unwrap();
        let inter = backward_slice(&p, dev, SliceLimits::default());
        assert!(inter.caller_slices.is_empty());
        assert_eq!(inter.depth, 0);
    }

    #[test]
    fn zero_depth_truncates() {
        let p = parse_program(TWO_METHODS).unwrap();
        let sites = find_suspicious_sites(&p, &RuleSet::bundled());
        let send = sites.iter().find(|s| s.api_signature.contains("sendText")).unwrap();
        let inter = backward_slice(&p, send, SliceLimits { max_depth: 0 });
        assert!(inter.truncated);
        assert!(inter.caller_slices.is_empty());
    }

    #[test]
    fn recursive_cycle_terminates() {
        let src = "method c.A.a/1 (x) {
  invoke c.B.b/1 (x)
  invoke java.net.Socket.connect/1 (x)
  return
}
method c.B.b/1 (y) {
  invoke c.A.a/1 (y)
  return
}";
        let p = parse_program(src).unwrap();
        let sites = find_suspicious_sites(&p, &RuleSet::bundled());
        assert_eq!(sites.len(), 1);
        let inter = backward_slice(&p, &sites[0], SliceLimits::default());
        assert!(!inter.truncated);
        assert_eq!(inter.caller_slices.len(), 1);
        assert!(inter.caller_slices.contains_key(&"c.B.b/1".parse::<MethodId>().unwrap()));
    }

    #[test]
    fn text_rendering_is_stable() {
        let p = parse_program(TWO_METHODS).unwrap();
        let sites = find_suspicious_sites(&p, &RuleSet::bundled());
        let send = sites.iter().find(|s| s.api_signature.contains("sendText")).unwrap();
        let inter = backward_slice(&p, send, SliceLimits::default());
        let text = slice_to_text(&inter, &p);
        assert_eq!(
            text,
            "function app.Main.helper/1 (imei)
criterion: 2 {imei, r1, r2}
  0: r1 = invoke android.telephony.SmsManager.getDefault/0 ()
  1: r2 = const \"5554\"
  2: invoke [r1] android.telephony.SmsManager.sendTextMessage/5 (r2, r2, imei, r2, r2)
unresolved parameters: imei

caller app.Main.run/0 ()
criterion: 3 {r1}
  0: r0 = invoke app.Main.context/0 ()
  1: r1 = invoke [r0] android.telephony.TelephonyManager.getDeviceId/0 ()
  3: invoke app.Main.helper/1 (r1)
"
        );
        assert_eq!(text, slice_to_text(&backward_slice(&p, send, SliceLimits::default()), &p));
    }
}
