//! Uniform/divergent classification of SSA values.
//!
//! A value is Uniform when every active lane of a warp is guaranteed to
//! hold the same value at its definition. The analysis starts from seeds
//! (thread ids, atomics, constants, special registers, ...), then raises
//! values along def-use chains and through control dependence until a
//! fixed point. [`analyze_function_arguments`] lifts this across calls.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write;

use crate::cfg::{build_cdg, build_loop_forest, compute_dom_tree, ControlDependenceGraph, DomTree, PostDomTree};
use crate::ir::{BlockId, FuncKind, Function, Module, Op, SpecialReg, Terminator, Type, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Uniformity {
    Uniform,
    Divergent,
}

impl Uniformity {
    pub fn is_uniform(self) -> bool {
        self == Uniformity::Uniform
    }

    pub fn letter(self) -> char {
        match self {
            Uniformity::Uniform => 'U',
            Uniformity::Divergent => 'D',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchState {
    Uniform,
    Divergent,
    NonConditional,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UniformityMap {
    values: HashMap<Value, Uniformity>,
    branches: HashMap<BlockId, BranchState>,
    /// Values whose state is fixed by their opcode, not by their operands.
    seeds: HashMap<Value, Uniformity>,
    /// Values an `assume_uniform` forces to Uniform.
    forced: HashSet<Value>,
}

impl UniformityMap {
    pub fn get(&self, v: Value) -> Uniformity {
        self.values.get(&v).copied().unwrap_or(Uniformity::Divergent)
    }

    pub fn is_uniform(&self, v: Value) -> bool {
        self.get(v).is_uniform()
    }

    pub fn branch(&self, b: BlockId) -> BranchState {
        self.branches.get(&b).copied().unwrap_or(BranchState::NonConditional)
    }

    pub fn is_divergent_branch(&self, b: BlockId) -> bool {
        self.branch(b) == BranchState::Divergent
    }

    pub fn uniform_values(&self) -> HashSet<Value> {
        self.values
            .iter()
            .filter(|(_, u)| u.is_uniform())
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn forced(&self) -> &HashSet<Value> {
        &self.forced
    }

    fn raise(&mut self, v: Value) -> bool {
        if self.forced.contains(&v) {
            return false;
        }
        let slot = self.values.entry(v).or_insert(Uniformity::Uniform);
        if *slot == Uniformity::Divergent {
            false
        } else {
            *slot = Uniformity::Divergent;
            true
        }
    }
}

/// Interprocedural facts for one function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionSummary {
    pub uarg: Vec<Uniformity>,
    /// Per parameter; `None` for non-address parameters.
    pub uptr_out: Vec<Option<Uniformity>>,
    pub uret: Uniformity,
}

impl FunctionSummary {
    pub fn divergent(f: &Function) -> Self {
        FunctionSummary {
            uarg: vec![Uniformity::Divergent; f.params.len()],
            uptr_out: f
                .params
                .iter()
                .map(|p| (f.value_type(p.value) == Type::Addr).then_some(Uniformity::Divergent))
                .collect(),
            uret: Uniformity::Divergent,
        }
    }
}

pub type Summaries = BTreeMap<String, FunctionSummary>;

/// Per function, the values proven Uniform; the simulator checks these.
pub type UniformFacts = HashMap<String, HashSet<Value>>;

/// Initial states from opcodes, parameters and callee summaries.
pub fn seed_uniformity(f: &Function, summaries: &Summaries) -> UniformityMap {
    use Uniformity::*;
    let mut u = UniformityMap::default();
    let own = summaries.get(&f.name);
    for (i, p) in f.params.iter().enumerate() {
        let proven = own.is_some_and(|s| s.uarg[i].is_uniform()) && f.kind == FuncKind::Internal;
        let s = if p.uniform || proven { Uniform } else { Divergent };
        u.seeds.insert(p.value, s);
    }
    for b in &f.blocks {
        for phi in &b.phis {
            u.values.insert(phi.dest, Uniform);
        }
        for inst in &b.insts {
            let Some(r) = inst.result else { continue };
            let seed = match &inst.op {
                Op::Const(_) => Some(Uniform),
                Op::Special(SpecialReg::Tid) => Some(Divergent),
                Op::Special(_) => Some(Uniform),
                Op::AtomicAdd { .. } | Op::Shfl { .. } | Op::Load(_) => Some(Divergent),
                Op::Vote(..) | Op::ActiveMask | Op::Split { .. } => Some(Uniform),
                Op::Call { callee, .. } => Some(
                    summaries
                        .get(callee)
                        .map_or(Divergent, |s| s.uret),
                ),
                _ => None,
            };
            match seed {
                Some(s) => {
                    u.seeds.insert(r, s);
                }
                None => {
                    u.values.insert(r, Uniform);
                }
            }
        }
    }
    for (v, s) in &u.seeds {
        u.values.insert(*v, *s);
    }
    u
}

/// Blocks on some path from a successor of `b` up to and including its
/// immediate post-dominator (everything reachable when there is none).
fn sync_region(f: &Function, pd: &PostDomTree, b: BlockId) -> Vec<BlockId> {
    let stop = pd.ipdom(b);
    let mut seen: HashSet<BlockId> = HashSet::new();
    let mut stack: Vec<BlockId> = f.block(b).successors();
    while let Some(x) = stack.pop() {
        if !seen.insert(x) {
            continue;
        }
        if Some(x) != stop {
            stack.extend(f.block(x).successors());
        }
    }
    let mut v: Vec<BlockId> = seen.into_iter().collect();
    v.sort();
    v
}

/// Raise states to the fixed point of the data, sync and loop-exit rules.
pub fn propagate_uniformity(f: &Function, seeds: &UniformityMap, pd: &PostDomTree, d: &DomTree) -> UniformityMap {
    let mut u = UniformityMap {
        values: HashMap::new(),
        branches: HashMap::new(),
        seeds: seeds.seeds.clone(),
        forced: seeds.forced.clone(),
    };
    // Restart from the seeds so a rerun with new forced values is exact.
    for v in seeds.values.keys() {
        let s = u.seeds.get(v).copied().unwrap_or(Uniformity::Uniform);
        u.values.insert(*v, s);
    }
    for v in u.forced.clone() {
        u.values.insert(v, Uniformity::Uniform);
    }
    let preds = f.predecessors();
    let lf = build_loop_forest(f, d);
    let def_loop_uses = loop_escapes(f, &lf);
    loop {
        let mut changed = false;
        for b in &f.blocks {
            for phi in &b.phis {
                if phi.incoming.iter().any(|(_, v)| !u.is_uniform(*v)) {
                    changed |= u.raise(phi.dest);
                }
            }
            for inst in &b.insts {
                let Some(r) = inst.result else { continue };
                if u.seeds.contains_key(&r) {
                    continue;
                }
                if inst.op.operands().iter().any(|v| !u.is_uniform(*v)) {
                    changed |= u.raise(r);
                }
            }
        }
        // Sync rule: phis merging paths of a divergent branch.
        for b in &f.blocks {
            let Terminator::CondBr { cond, .. } = b.term else { continue };
            if u.is_uniform(cond) {
                continue;
            }
            for x in sync_region(f, pd, b.id) {
                if preds.get(&x).map_or(0, |p| p.len()) < 2 {
                    continue;
                }
                for phi in &f.block(x).phis {
                    changed |= u.raise(phi.dest);
                }
            }
        }
        // Loop-exit rule: lanes leave a loop with a divergent exit in
        // different iterations, so values carried out of it differ.
        for (l, escaping) in &def_loop_uses {
            let divergent_exit = lf.loops[*l].exiting_blocks(f).into_iter().any(|e| {
                matches!(f.block(e).term, Terminator::CondBr { cond, .. } if !u.is_uniform(cond))
            });
            if divergent_exit {
                for v in escaping {
                    changed |= u.raise(*v);
                }
            }
        }
        if !changed {
            break;
        }
    }
    for b in &f.blocks {
        let s = match b.term {
            Terminator::CondBr { cond, .. } | Terminator::Pred { cond, .. } => {
                if u.is_uniform(cond) {
                    BranchState::Uniform
                } else {
                    BranchState::Divergent
                }
            }
            _ => BranchState::NonConditional,
        };
        u.branches.insert(b.id, s);
    }
    u
}

/// For each loop, the values defined inside it that are read outside it.
fn loop_escapes(f: &Function, lf: &crate::cfg::LoopForest) -> Vec<(usize, Vec<Value>)> {
    let defs = f.def_blocks();
    let mut out = Vec::new();
    for (i, l) in lf.loops.iter().enumerate() {
        let inside: HashSet<Value> = defs
            .iter()
            .filter(|(_, bs)| bs.iter().any(|b| l.contains(*b)))
            .map(|(v, _)| *v)
            .collect();
        let mut escaping: HashSet<Value> = HashSet::new();
        for b in &f.blocks {
            if l.contains(b.id) {
                continue;
            }
            for phi in &b.phis {
                escaping.extend(phi.incoming.iter().map(|(_, v)| *v).filter(|v| inside.contains(v)));
            }
            for inst in &b.insts {
                escaping.extend(inst.op.operands().into_iter().filter(|v| inside.contains(v)));
            }
            escaping.extend(b.term.operands().into_iter().filter(|v| inside.contains(v)));
        }
        let mut v: Vec<Value> = escaping.into_iter().collect();
        v.sort();
        if !v.is_empty() {
            out.push((i, v));
        }
    }
    out
}

/// Force every `assume_uniform` operand to Uniform and rerun propagation.
pub fn apply_annotations(f: &Function, u: &UniformityMap, pd: &PostDomTree, d: &DomTree) -> UniformityMap {
    let mut seeded = u.clone();
    for b in &f.blocks {
        for inst in &b.insts {
            if let Op::AssumeUniform(v) = inst.op {
                seeded.forced.insert(v);
            }
        }
    }
    if seeded.forced == u.forced {
        return u.clone();
    }
    propagate_uniformity(f, &seeded, pd, d)
}

/// Seed, propagate and (optionally) apply annotations for one function.
pub fn analyze_function(f: &Function, summaries: &Summaries, annotations: bool) -> UniformityMap {
    let d = compute_dom_tree(f);
    let pd = PostDomTree::with_virtual_exit(f);
    let seeds = seed_uniformity(f, summaries);
    let u = propagate_uniformity(f, &seeds, &pd, &d);
    if annotations {
        apply_annotations(f, &u, &pd, &d)
    } else {
        u
    }
}

/// Result of the interprocedural fixed point.
#[derive(Clone, Debug, Default)]
pub struct ModuleUniformity {
    pub summaries: Summaries,
    pub maps: BTreeMap<String, UniformityMap>,
    /// Rounds of the outer loop, including the final round with no change.
    pub iterations: usize,
}

impl ModuleUniformity {
    pub fn map(&self, func: &str) -> &UniformityMap {
        &self.maps[func]
    }

    pub fn facts(&self) -> UniformFacts {
        self.maps
            .iter()
            .map(|(k, m)| (k.clone(), m.uniform_values()))
            .collect()
    }
}

fn callees(f: &Function) -> Vec<String> {
    let mut out = Vec::new();
    for b in &f.blocks {
        for i in &b.insts {
            match &i.op {
                Op::Call { callee, .. } => out.push(callee.clone()),
                Op::Wspawn { func, .. } => out.push(func.clone()),
                _ => {}
            }
        }
    }
    out
}

/// Functions ordered by reverse postorder of the call graph's SCC
/// condensation: callers before callees.
pub fn call_graph_order(m: &Module) -> Vec<usize> {
    let n = m.functions.len();
    let index: HashMap<&str, usize> = m.functions.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
    let succ: Vec<Vec<usize>> = m
        .functions
        .iter()
        .map(|f| callees(f).iter().filter_map(|c| index.get(c.as_str()).copied()).collect())
        .collect();
    // Tarjan's algorithm yields SCCs in reverse topological order.
    struct T<'a> {
        succ: &'a [Vec<usize>],
        idx: Vec<Option<usize>>,
        low: Vec<usize>,
        on: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        sccs: Vec<Vec<usize>>,
    }
    fn visit(t: &mut T, v: usize) {
        t.idx[v] = Some(t.next);
        t.low[v] = t.next;
        t.next += 1;
        t.stack.push(v);
        t.on[v] = true;
        for &w in &t.succ[v] {
            match t.idx[w] {
                None => {
                    visit(t, w);
                    t.low[v] = t.low[v].min(t.low[w]);
                }
                Some(iw) if t.on[w] => t.low[v] = t.low[v].min(iw),
                _ => {}
            }
        }
        if Some(t.low[v]) == t.idx[v] {
            let mut scc = Vec::new();
            loop {
                let w = t.stack.pop().unwrap();
                t.on[w] = false;
                scc.push(w);
                if w == v {
                    break;
                }
            }
            scc.sort();
            t.sccs.push(scc);
        }
    }
    let mut t = T {
        succ: &succ,
        idx: vec![None; n],
        low: vec![0; n],
        on: vec![false; n],
        stack: Vec::new(),
        next: 0,
        sccs: Vec::new(),
    };
    // Roots first: kernels, then the rest in module order.
    let mut roots: Vec<usize> = (0..n).filter(|i| m.functions[*i].is_kernel()).collect();
    roots.extend((0..n).filter(|i| !m.functions[*i].is_kernel()));
    for r in roots {
        if t.idx[r].is_none() {
            visit(&mut t, r);
        }
    }
    t.sccs.into_iter().rev().flatten().collect()
}

/// Algorithm 1: interprocedural argument/return/pointer-out analysis.
pub fn analyze_function_arguments(m: &Module, annotations: bool) -> ModuleUniformity {
    use Uniformity::*;
    let order = call_graph_order(m);
    let mut summaries: Summaries = m
        .functions
        .iter()
        .map(|f| (f.name.clone(), FunctionSummary::divergent(f)))
        .collect();
    let mut maps: BTreeMap<String, UniformityMap> = BTreeMap::new();
    let cdgs: HashMap<&str, ControlDependenceGraph> = m
        .functions
        .iter()
        .map(|f| (f.name.as_str(), build_cdg(f, &PostDomTree::with_virtual_exit(f))))
        .collect();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let before = summaries.clone();
        for &fi in &order {
            let f = &m.functions[fi];
            // AnalyzeArgument: every call site passes a Uniform actual under
            // Uniform control.
            if f.kind == FuncKind::Internal {
                for i in 0..f.params.len() {
                    if summaries[&f.name].uarg[i].is_uniform() {
                        continue;
                    }
                    if call_sites_uniform(m, &f.name, i, &maps, &cdgs) {
                        summaries.get_mut(&f.name).unwrap().uarg[i] = Uniform;
                    }
                }
            }
            let u = analyze_function(f, &summaries, annotations);
            let cdg = &cdgs[f.name.as_str()];
            let s = summaries.get_mut(&f.name).unwrap();
            if s.uret == Divergent && returns_uniform(f, &u, cdg) {
                s.uret = Uniform;
            }
            for (i, p) in f.params.iter().enumerate() {
                if s.uptr_out[i] == Some(Divergent) && pointee_stores_uniform(f, p.value, &u, cdg) {
                    s.uptr_out[i] = Some(Uniform);
                }
            }
            maps.insert(f.name.clone(), u);
        }
        if summaries == before {
            break;
        }
    }
    ModuleUniformity {
        summaries,
        maps,
        iterations,
    }
}

/// Full module analysis; identical to the Algorithm 1 driver.
pub fn analyze_module(m: &Module, annotations: bool) -> ModuleUniformity {
    analyze_function_arguments(m, annotations)
}

fn under_uniform_control(u: &UniformityMap, cdg: &ControlDependenceGraph, b: BlockId) -> bool {
    cdg.ancestors(b).into_iter().all(|a| !u.is_divergent_branch(a))
}

fn call_sites_uniform(
    m: &Module,
    callee: &str,
    arg: usize,
    maps: &BTreeMap<String, UniformityMap>,
    cdgs: &HashMap<&str, ControlDependenceGraph>,
) -> bool {
    for g in &m.functions {
        for b in &g.blocks {
            for inst in &b.insts {
                let Op::Call { callee: c, args } = &inst.op else { continue };
                if c != callee {
                    continue;
                }
                let Some(u) = maps.get(&g.name) else { return false };
                if !u.is_uniform(args[arg]) || !under_uniform_control(u, &cdgs[g.name.as_str()], b.id) {
                    return false;
                }
            }
        }
    }
    true
}

fn returns_uniform(f: &Function, u: &UniformityMap, cdg: &ControlDependenceGraph) -> bool {
    let rets: Vec<(BlockId, Option<Value>)> = f
        .blocks
        .iter()
        .filter_map(|b| match b.term {
            Terminator::Ret(v) => Some((b.id, v)),
            _ => None,
        })
        .collect();
    let multi = rets.len() > 1;
    rets.into_iter().all(|(b, v)| {
        v.map_or(true, |v| u.is_uniform(v)) && (!multi || under_uniform_control(u, cdg, b))
    })
}

/// Every store through a pointer derived from `param` writes a Uniform
/// value under Uniform control; atomics through it disqualify.
fn pointee_stores_uniform(f: &Function, param: Value, u: &UniformityMap, cdg: &ControlDependenceGraph) -> bool {
    let mut derived: HashSet<Value> = HashSet::from([param]);
    loop {
        let before = derived.len();
        for b in &f.blocks {
            for phi in &b.phis {
                if phi.incoming.iter().any(|(_, v)| derived.contains(v)) {
                    derived.insert(phi.dest);
                }
            }
            for inst in &b.insts {
                let from = match &inst.op {
                    Op::AddrAdd(p, _) | Op::Mov(p) => derived.contains(p),
                    Op::Select(_, a, c) | Op::Cmov(_, a, c) => derived.contains(a) || derived.contains(c),
                    _ => false,
                };
                if from {
                    derived.insert(inst.result.unwrap());
                }
            }
        }
        if derived.len() == before {
            break;
        }
    }
    for b in &f.blocks {
        for inst in &b.insts {
            match &inst.op {
                Op::Store { value, ptr } if derived.contains(ptr) => {
                    if !u.is_uniform(*value) || !under_uniform_control(u, cdg, b.id) {
                        return false;
                    }
                }
                Op::AtomicAdd { ptr, .. } if derived.contains(ptr) => return false,
                Op::Call { args, .. } if args.iter().any(|a| derived.contains(a)) => return false,
                _ => {}
            }
        }
    }
    true
}

/// Conservative classification of a Lowered function, used when a lowered
/// file is simulated without its pre-lowering analysis. Copy-assigned
/// variables are Divergent; everything else follows seeds and operands.
pub fn analyze_lowered(f: &Function, summaries: &Summaries) -> UniformityMap {
    let mut u = seed_uniformity(f, summaries);
    for b in &f.blocks {
        for inst in &b.insts {
            if let (Op::Mov(_) | Op::Cmov(..), Some(r)) = (&inst.op, inst.result) {
                u.seeds.insert(r, Uniformity::Divergent);
                u.values.insert(r, Uniformity::Divergent);
            }
        }
    }
    loop {
        let mut changed = false;
        for b in &f.blocks {
            for inst in &b.insts {
                let Some(r) = inst.result else { continue };
                if u.seeds.contains_key(&r) {
                    continue;
                }
                if inst.op.operands().iter().any(|v| !u.is_uniform(*v)) {
                    changed |= u.raise(r);
                }
            }
        }
        if !changed {
            break;
        }
    }
    u
}

/// `analyze --dump uniformity` text: one `%value: U|D` line per definition
/// in definition order, then each function's summary.
pub fn dump(m: &Module, mu: &ModuleUniformity) -> String {
    let mut out = String::new();
    for f in &m.functions {
        let u = &mu.maps[&f.name];
        let _ = writeln!(out, "@{}", f.name);
        let mut emit = |v: Value| {
            let _ = writeln!(out, "  %{}: {}", f.value_name(v), u.get(v).letter());
        };
        for p in &f.params {
            emit(p.value);
        }
        for b in &f.blocks {
            for phi in &b.phis {
                emit(phi.dest);
            }
            for inst in &b.insts {
                if let Some(r) = inst.result {
                    emit(r);
                }
            }
        }
        let s = &mu.summaries[&f.name];
        let args: Vec<String> = s.uarg.iter().map(|x| x.letter().to_string()).collect();
        let ptrs: Vec<String> = s
            .uptr_out
            .iter()
            .map(|x| x.map_or("-".to_string(), |x| x.letter().to_string()))
            .collect();
        let _ = writeln!(
            out,
            "  summary: uarg=[{}] uptrout=[{}] uret={}",
            args.join(","),
            ptrs.join(","),
            s.uret.letter()
        );
    }
    let _ = writeln!(out, "iterations: {}", mu.iterations);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn analyze(text: &str) -> (Module, ModuleUniformity) {
        let m = parse_module(text).unwrap();
        let mu = analyze_module(&m, true);
        (m, mu)
    }

    fn state(m: &Module, mu: &ModuleUniformity, func: &str, v: &str) -> Uniformity {
        let f = m.function(func).unwrap();
        mu.map(func).get(f.lookup_value(v).unwrap())
    }

    #[test]
    fn seeds_and_data_rule() {
        let (m, mu) = analyze(
            "kernel @k(%p: addr) {\nA:\n  %t = tid\n  %c = const 5\n  %b = add %t, %c\n  %o = atomic_add %p, %c\n  %n = nwid\n  %x = add %n, %c\n  ret\n}",
        );
        assert_eq!(state(&m, &mu, "k", "t"), Uniformity::Divergent);
        assert_eq!(state(&m, &mu, "k", "c"), Uniformity::Uniform);
        assert_eq!(state(&m, &mu, "k", "b"), Uniformity::Divergent);
        assert_eq!(state(&m, &mu, "k", "o"), Uniformity::Divergent);
        assert_eq!(state(&m, &mu, "k", "x"), Uniformity::Uniform);
    }

    #[test]
    fn sync_rule_marks_join_phi() {
        let text = |cond: &str| {
            format!(
                "kernel @k(%n: i32 uniform) {{\nA:\n  %t = tid\n  %c = icmp slt {cond}, %n\n  br %c, ^B, ^C\nB:\n  %one = const 1\n  br ^D\nC:\n  %two = const 2\n  br ^D\nD:\n  %r = phi [%one, ^B], [%two, ^C]\n  ret\n}}"
            )
        };
        let (m, mu) = analyze(&text("%t"));
        assert_eq!(state(&m, &mu, "k", "r"), Uniformity::Divergent);
        let (m, mu) = analyze(&text("%n"));
        assert_eq!(state(&m, &mu, "k", "r"), Uniformity::Uniform);
    }

    #[test]
    fn annotation_makes_branch_uniform() {
        let text = "kernel @k(%n: i32) {\nA:\n  assume_uniform %n\n  %z = const 0\n  %c = icmp slt %z, %n\n  br %c, ^B, ^C\nB:\n  br ^C\nC:\n  ret\n}";
        let m = parse_module(text).unwrap();
        let on = analyze_module(&m, true);
        let off = analyze_module(&m, false);
        let a = m.functions[0].block_by_label("A").unwrap();
        assert_eq!(on.map("k").branch(a), BranchState::Uniform);
        assert_eq!(off.map("k").branch(a), BranchState::Divergent);
    }

    #[test]
    fn vote_escaping_divergent_loop_is_divergent() {
        let (m, mu) = analyze(
            "kernel @k() {
A:
  %t = tid
  %z = const 0
  %one = const 1
  br ^H
H:
  %i = phi [%z, ^A], [%i2, ^H]
  %c = icmp slt %i, %t
  %v = vote.ballot %c
  %i2 = add %i, %one
  br %c, ^H, ^X
X:
  %w = add %v, %one
  ret
}",
        );
        assert_eq!(state(&m, &mu, "k", "w"), Uniformity::Divergent);
    }

    #[test]
    fn uret_and_uarg() {
        let (m, mu) = analyze(
            "kernel @k() {\nA:\n  %a = const 1\n  %r = call @f(%a)\n  %s = call @f(%a)\n  ret\n}\ninternal func @f(%x: i32) {\nA:\n  %y = add %x, %x\n  ret %y\n}",
        );
        assert_eq!(mu.summaries["f"].uarg, vec![Uniformity::Uniform]);
        assert_eq!(mu.summaries["f"].uret, Uniformity::Uniform);
        assert_eq!(state(&m, &mu, "k", "r"), Uniformity::Uniform);
    }
}
