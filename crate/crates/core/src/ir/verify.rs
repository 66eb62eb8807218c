use std::collections::{HashMap, HashSet};
use std::fmt;

use super::*;
use crate::cfg::compute_dom_tree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    DuplicateFunction,
    KernelCount,
    EmptyFunction,
    PhiInEntry,
    PhiEdgeMismatch,
    MultipleDefinitions,
    UseNotDominated,
    UndefinedValue,
    StageViolation,
    TypeMismatch,
    UnknownCallee,
    ArityMismatch,
    Recursion,
    SplitAdjacency,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub function: String,
    pub block: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} in @{}", self.kind, self.function)?;
        if let Some(b) = &self.block {
            write!(f, " ^{b}")?;
        }
        write!(f, ": {}", self.message)
    }
}

struct Sink<'a> {
    func: &'a Function,
    out: Vec<Violation>,
}

impl Sink<'_> {
    fn push(&mut self, kind: ViolationKind, block: Option<BlockId>, message: impl Into<String>) {
        self.out.push(Violation {
            kind,
            function: self.func.name.clone(),
            block: block.map(|b| self.func.label(b).to_string()),
            message: message.into(),
        });
    }
}

pub fn verify_module(m: &Module) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for f in &m.functions {
        if !seen.insert(f.name.as_str()) {
            out.push(Violation {
                kind: ViolationKind::DuplicateFunction,
                function: f.name.clone(),
                block: None,
                message: "function defined twice".into(),
            });
        }
    }
    let kernels = m.functions.iter().filter(|f| f.is_kernel()).count();
    if kernels != 1 {
        out.push(Violation {
            kind: ViolationKind::KernelCount,
            function: String::new(),
            block: None,
            message: format!("expected exactly one kernel, found {kernels}"),
        });
    }
    for f in &m.functions {
        out.extend(verify_function_in(m, f));
    }
    out.extend(check_recursion(m));
    out
}

/// Checks one function in isolation; call targets are not resolved.
pub fn verify_function(f: &Function, stage: Stage) -> Vec<Violation> {
    let m = Module {
        stage,
        functions: Vec::new(),
    };
    let mut sink = Sink {
        func: f,
        out: Vec::new(),
    };
    check_body(&m, f, &mut sink, false);
    sink.out
}

fn verify_function_in(m: &Module, f: &Function) -> Vec<Violation> {
    let mut sink = Sink {
        func: f,
        out: Vec::new(),
    };
    check_body(m, f, &mut sink, true);
    sink.out
}

fn check_body(m: &Module, f: &Function, sink: &mut Sink, resolve_calls: bool) {
    use ViolationKind::*;
    if f.blocks.is_empty() {
        sink.push(EmptyFunction, None, "function has no blocks");
        return;
    }
    let stage = m.stage;
    let preds = f.predecessors();
    let entry = f.entry();
    if preds.get(&entry).is_some_and(|p| !p.is_empty()) {
        sink.push(PhiEdgeMismatch, Some(entry), "entry block has predecessors");
    }

    // Definitions: where, and whether every def is a copy.
    let mut defs: HashMap<Value, Vec<(BlockId, usize)>> = HashMap::new();
    let mut non_mov_def: HashSet<Value> = HashSet::new();
    for p in &f.params {
        defs.entry(p.value).or_default().push((entry, 0));
        non_mov_def.insert(p.value);
    }
    for b in &f.blocks {
        for phi in &b.phis {
            defs.entry(phi.dest).or_default().push((b.id, 0));
            non_mov_def.insert(phi.dest);
        }
        for (i, inst) in b.insts.iter().enumerate() {
            if let Some(r) = inst.result {
                defs.entry(r).or_default().push((b.id, i + 1));
                if !matches!(inst.op, Op::Mov(_)) {
                    non_mov_def.insert(r);
                }
            }
        }
    }
    // Values defined only by copies in a Lowered function are mutable
    // variables; SSA dominance does not apply to them.
    let mut variables: HashSet<Value> = HashSet::new();
    for (v, ds) in &defs {
        if ds.len() > 1 {
            if stage == Stage::Lowered && !non_mov_def.contains(v) {
                variables.insert(*v);
            } else {
                sink.push(
                    MultipleDefinitions,
                    Some(ds[1].0),
                    format!("%{} defined {} times", f.value_name(*v), ds.len()),
                );
            }
        } else if stage == Stage::Lowered && !non_mov_def.contains(v) {
            variables.insert(*v);
        }
    }

    let dom = compute_dom_tree(f);
    let dominated = |v: Value, block: BlockId, pos: usize| -> Option<bool> {
        if variables.contains(&v) {
            return Some(true);
        }
        let (db, dpos) = *defs.get(&v)?.first()?;
        Some(if db == block {
            dpos < pos
        } else {
            dom.dominates(db, block)
        })
    };
    let check_use = |sink: &mut Sink, v: Value, block: BlockId, pos: usize| {
        if !dom.is_reachable(block) {
            return;
        }
        match dominated(v, block, pos) {
            None => sink.push(
                UndefinedValue,
                Some(block),
                format!("%{} is used but never defined", f.value_name(v)),
            ),
            Some(false) => sink.push(
                UseNotDominated,
                Some(block),
                format!("use of %{} is not dominated by its definition", f.value_name(v)),
            ),
            Some(true) => {}
        }
    };

    for b in &f.blocks {
        let bpreds: HashSet<BlockId> = preds.get(&b.id).into_iter().flatten().copied().collect();
        if b.id == entry && !b.phis.is_empty() {
            sink.push(PhiInEntry, Some(b.id), "entry block has phis");
        }
        if stage == Stage::Lowered && !b.phis.is_empty() {
            sink.push(StageViolation, Some(b.id), "phi in a lowered module");
        }
        for phi in &b.phis {
            let listed: Vec<BlockId> = phi.incoming.iter().map(|(p, _)| *p).collect();
            let listed_set: HashSet<BlockId> = listed.iter().copied().collect();
            if listed_set != bpreds || listed.len() != listed_set.len() {
                sink.push(
                    PhiEdgeMismatch,
                    Some(b.id),
                    format!(
                        "phi %{} incoming blocks do not match predecessors",
                        f.value_name(phi.dest)
                    ),
                );
            }
            for (p, v) in &phi.incoming {
                if f.has_block(*p) && bpreds.contains(p) {
                    check_use(sink, *v, *p, usize::MAX);
                }
            }
        }
        for (i, inst) in b.insts.iter().enumerate() {
            let pos = i + 1;
            for v in inst.op.operands() {
                check_use(sink, v, b.id, pos);
            }
            if stage == Stage::High && inst.op.is_lowered_only() {
                sink.push(
                    StageViolation,
                    Some(b.id),
                    format!("'{}' in a high-stage module", inst.op.mnemonic()),
                );
            }
            if stage == Stage::Lowered && inst.op.is_high_only() {
                sink.push(
                    StageViolation,
                    Some(b.id),
                    format!("'{}' in a lowered module", inst.op.mnemonic()),
                );
            }
            check_types(f, inst, b.id, sink);
            if resolve_calls {
                check_call(m, f, inst, b.id, sink);
            }
        }
        for v in b.term.operands() {
            check_use(sink, v, b.id, usize::MAX);
        }
        match &b.term {
            Terminator::Pred { mask, .. } => {
                if stage == Stage::High {
                    sink.push(StageViolation, Some(b.id), "'pred' in a high-stage module");
                }
                if f.value_type(*mask) == Type::Addr {
                    sink.push(TypeMismatch, Some(b.id), "pred mask is an address");
                }
            }
            Terminator::CondBr { cond, .. } if f.value_type(*cond) == Type::Addr => {
                sink.push(TypeMismatch, Some(b.id), "branch condition is an address");
            }
            _ => {}
        }
        check_split_adjacency(f, b, sink);
    }
}

fn check_types(f: &Function, inst: &Inst, b: BlockId, sink: &mut Sink) {
    let want_addr = |v: &Value| f.value_type(*v) == Type::Addr;
    let bad = match &inst.op {
        Op::Load(p) | Op::AddrAdd(p, _) => !want_addr(p),
        Op::Store { ptr, .. } | Op::AtomicAdd { ptr, .. } => !want_addr(ptr),
        Op::Split { cond, .. } | Op::Select(cond, ..) | Op::Cmov(cond, ..) => want_addr(cond),
        Op::Binary(BinOp::Udiv, _, d) => want_addr(d),
        _ => false,
    };
    if bad {
        sink.push(
            ViolationKind::TypeMismatch,
            Some(b),
            format!("operand types do not fit '{}'", inst.op.mnemonic()),
        );
    }
}

fn check_call(m: &Module, f: &Function, inst: &Inst, b: BlockId, sink: &mut Sink) {
    let (callee, arity) = match &inst.op {
        Op::Call { callee, args } => (callee, args.len()),
        Op::Wspawn { func, .. } => (func, 0),
        _ => return,
    };
    match m.function(callee) {
        None => sink.push(
            ViolationKind::UnknownCallee,
            Some(b),
            format!("call to undefined function @{callee}"),
        ),
        Some(g) if g.params.len() != arity => sink.push(
            ViolationKind::ArityMismatch,
            Some(b),
            format!("@{callee} takes {} arguments, given {arity}", g.params.len()),
        ),
        Some(_) => {}
    }
    let _ = f;
}

/// `split` must sit immediately before a conditional branch on the same
/// value (or, for `split.neg`, on the value's negation), and a divergent
/// terminator must not be separated from its split.
fn check_split_adjacency(f: &Function, b: &Block, sink: &mut Sink) {
    for (i, inst) in b.insts.iter().enumerate() {
        let Op::Split { cond, negate } = inst.op else {
            continue;
        };
        let last = i + 1 == b.insts.len();
        let ok = match (&b.term, last) {
            (Terminator::CondBr { cond: bc, .. }, true) => {
                if negate {
                    is_negation_of(f, *bc, cond)
                } else {
                    *bc == cond
                }
            }
            _ => false,
        };
        if !ok {
            sink.push(
                ViolationKind::SplitAdjacency,
                Some(b.id),
                format!(
                    "'{}' on %{} is not immediately followed by a matching conditional branch",
                    inst.op.mnemonic(),
                    f.value_name(cond)
                ),
            );
        }
    }
}

/// True when `v` is defined as `xor x, one` (either operand order) with
/// `one` a constant 1 or -1.
pub(crate) fn is_negation_of(f: &Function, v: Value, x: Value) -> bool {
    let def = |val: Value| {
        f.blocks
            .iter()
            .flat_map(|b| b.insts.iter())
            .find(|i| i.result == Some(val))
    };
    let is_one = |val: Value| {
        matches!(def(val), Some(Inst { op: Op::Const(1 | -1), .. }))
    };
    match def(v) {
        Some(Inst {
            op: Op::Binary(BinOp::Xor, a, b),
            ..
        }) => (*a == x && is_one(*b)) || (*b == x && is_one(*a)),
        _ => false,
    }
}

fn check_recursion(m: &Module) -> Vec<Violation> {
    let callees = |f: &Function| -> Vec<String> {
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
    };
    let Some(k) = m.kernel() else {
        return Vec::new();
    };
    // DFS from the kernel; a back edge to a function on the stack is a cycle.
    let mut out = Vec::new();
    let mut state: HashMap<&str, u8> = HashMap::new();
    let mut stack: Vec<(&str, Vec<String>, usize)> = vec![(&k.name, callees(k), 0)];
    state.insert(&k.name, 1);
    while let Some(top) = stack.last_mut() {
        if top.2 < top.1.len() {
            let c = top.1[top.2].clone();
            top.2 += 1;
            let Some(g) = m.function(&c) else { continue };
            match state.get(g.name.as_str()) {
                Some(1) => out.push(Violation {
                    kind: ViolationKind::Recursion,
                    function: g.name.clone(),
                    block: None,
                    message: "call graph cycle reachable from the kernel".into(),
                }),
                Some(_) => {}
                None => {
                    state.insert(&g.name, 1);
                    stack.push((&g.name, callees(g), 0));
                }
            }
        } else {
            state.insert(top.0, 2);
            stack.pop();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(text: &str) -> Vec<ViolationKind> {
        verify_module(&parse_module(text).unwrap())
            .into_iter()
            .map(|v| v.kind)
            .collect()
    }

    #[test]
    fn diamond_is_clean() {
        let k = kinds(
            "kernel @k(%c: i1) {\nA:\n  br %c, ^B, ^C\nB:\n  %x = const 1\n  br ^D\nC:\n  %y = const 2\n  br ^D\nD:\n  %z = phi [%x, ^B], [%y, ^C]\n  ret\n}",
        );
        assert!(k.is_empty(), "{k:?}");
    }

    #[test]
    fn phi_with_non_predecessor() {
        let k = kinds(
            "kernel @k(%c: i1) {\nA:\n  br %c, ^B, ^C\nB:\n  %x = const 1\n  br ^D\nC:\n  br ^D\nD:\n  %z = phi [%x, ^B], [%x, ^A]\n  ret\n}",
        );
        assert!(k.contains(&ViolationKind::PhiEdgeMismatch));
    }

    #[test]
    fn join_in_high_stage() {
        let k = kinds("kernel @k() {\nA:\n  %c = const 0\n  join %c\n  ret\n}");
        assert_eq!(k, vec![ViolationKind::StageViolation]);
    }

    #[test]
    fn use_not_dominated() {
        let k = kinds(
            "kernel @k(%c: i1) {\nA:\n  br %c, ^B, ^C\nB:\n  %x = const 1\n  br ^C\nC:\n  %y = add %x, %x\n  ret\n}",
        );
        assert!(k.contains(&ViolationKind::UseNotDominated));
    }

    #[test]
    fn split_must_be_adjacent() {
        let text = ".stage lowered\nkernel @k() {\nA:\n  %t = tid\n  %z = const 0\n  %c = icmp eq %t, %z\n  %s = split %c\n  %d = mov %c\n  br %d, ^B, ^C\nB:\n  br ^C\nC:\n  join %s\n  ret\n}";
        assert_eq!(kinds(text), vec![ViolationKind::SplitAdjacency]);
        let neg = ".stage lowered\nkernel @k() {\nA:\n  %t = tid\n  %z = const 0\n  %c = icmp eq %t, %z\n  %one = const 1\n  %n = xor %c, %one\n  %s = split.neg %c\n  br %n, ^B, ^C\nB:\n  br ^C\nC:\n  join %s\n  ret\n}";
        assert!(kinds(neg).is_empty());
    }

    #[test]
    fn recursion_is_rejected() {
        let k = kinds(
            "kernel @k() {\nA:\n  call @f()\n  ret\n}\nfunc @f() {\nA:\n  call @f()\n  ret\n}",
        );
        assert_eq!(k, vec![ViolationKind::Recursion]);
    }

    #[test]
    fn load_needs_address() {
        let k = kinds("kernel @k() {\nA:\n  %x = const 4\n  %y = load %x\n  ret\n}");
        assert_eq!(k, vec![ViolationKind::TypeMismatch]);
    }
}
