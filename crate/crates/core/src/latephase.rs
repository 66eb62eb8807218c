//! Late-phase hazards and their repair.
//!
//! Back-end style rewrites that run after divergence lowering can silently
//! break the split/branch contract: inverting a branch, rematerializing its
//! predicate into a fresh register, or expanding a `cmov` back into control
//! flow. `perturb` applies one such rewrite at a seeded site;
//! `repair_divergence` restores the contract.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cfg::{compute_dom_tree, PostDomTree};
use crate::ir::is_negation_of;
use crate::ir::{infer_types, BinOp, BlockId, Function, Inst, Module, Op, Terminator, Type, Value};
use crate::uniformity::UniformFacts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbMode {
    InvertBranch,
    RematerializePredicate,
    ExpandSelect,
}

impl PerturbMode {
    pub const ALL: [PerturbMode; 3] = [
        PerturbMode::InvertBranch,
        PerturbMode::RematerializePredicate,
        PerturbMode::ExpandSelect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbMode::InvertBranch => "invert-branch",
            PerturbMode::RematerializePredicate => "rematerialize-predicate",
            PerturbMode::ExpandSelect => "expand-select",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PerturbError {
    #[error("no applicable site for {}", .0.name())]
    NoApplicableSite(PerturbMode),
}

/// Where a perturbation was applied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbSite {
    pub func: String,
    pub block: String,
}

fn ends_in_split(f: &Function, b: BlockId) -> bool {
    matches!(f.block(b).insts.last(), Some(Inst { op: Op::Split { .. }, .. }))
}

fn sites(m: &Module, mode: PerturbMode) -> Vec<(usize, BlockId, usize)> {
    let mut out = Vec::new();
    for (fi, f) in m.functions.iter().enumerate() {
        for b in &f.blocks {
            match mode {
                PerturbMode::InvertBranch => {
                    if b.term.is_conditional() && matches!(b.term, Terminator::CondBr { .. }) {
                        out.push((fi, b.id, 0));
                    }
                }
                PerturbMode::RematerializePredicate => {
                    if b.term.is_conditional() && ends_in_split(f, b.id) {
                        out.push((fi, b.id, 0));
                    }
                }
                PerturbMode::ExpandSelect => {
                    for (k, i) in b.insts.iter().enumerate() {
                        if matches!(i.op, Op::Cmov(..)) {
                            out.push((fi, b.id, k));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Apply one `mode` rewrite at a site chosen by `seed`.
pub fn perturb(m: &mut Module, mode: PerturbMode, seed: u64) -> Result<PerturbSite, PerturbError> {
    let all = sites(m, mode);
    if all.is_empty() {
        return Err(PerturbError::NoApplicableSite(mode));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fi, b, k) = all[rng.gen_range(0..all.len())];
    let f = &mut m.functions[fi];
    let site = PerturbSite {
        func: f.name.clone(),
        block: f.label(b).to_string(),
    };
    match mode {
        PerturbMode::InvertBranch => invert_branch(f, b),
        PerturbMode::RematerializePredicate => rematerialize(f, b),
        PerturbMode::ExpandSelect => expand_select(f, b, k),
    }
    Ok(site)
}

/// `br %c, T, E` becomes `br (%c ^ 1), E, T`; the negation lands before any
/// trailing split, whose operand is left alone.
fn invert_branch(f: &mut Function, b: BlockId) {
    let Terminator::CondBr { cond, then_dest, else_dest } = f.block(b).term.clone() else {
        return;
    };
    let one = f.new_value("one", Type::I32);
    let nc = f.new_value("nc", Type::I1);
    let at = f.block(b).insts.len() - usize::from(ends_in_split(f, b));
    let insts = &mut f.block_mut(b).insts;
    insts.insert(at, Inst::new(Some(one), Op::Const(1)));
    insts.insert(at + 1, Inst::new(Some(nc), Op::Binary(BinOp::Xor, cond, one)));
    f.block_mut(b).term = Terminator::CondBr {
        cond: nc,
        then_dest: else_dest,
        else_dest: then_dest,
    };
    infer_types(f);
}

/// Copy the branch condition into a fresh value between split and branch.
fn rematerialize(f: &mut Function, b: BlockId) {
    let Terminator::CondBr { cond, .. } = f.block(b).term else {
        return;
    };
    let c2 = f.new_value("remat", Type::I1);
    f.block_mut(b).insts.push(Inst::new(Some(c2), Op::Mov(cond)));
    if let Terminator::CondBr { cond, .. } = &mut f.block_mut(b).term {
        *cond = c2;
    }
    infer_types(f);
}

/// `%r = cmov %c, %x, %y` becomes a branch diamond with a copy on each arm.
fn expand_select(f: &mut Function, b: BlockId, k: usize) {
    let inst = f.block(b).insts[k].clone();
    let (Some(r), Op::Cmov(c, x, y)) = (inst.result, inst.op) else {
        return;
    };
    let base = f.label(b).to_string();
    let t = f.new_block_after(b, &format!("{base}.sel.t"));
    let e = f.new_block_after(t, &format!("{base}.sel.f"));
    let j = f.new_block_after(e, &format!("{base}.sel.j"));
    let rest = f.block_mut(b).insts.split_off(k + 1);
    f.block_mut(b).insts.pop();
    let term = std::mem::replace(
        &mut f.block_mut(b).term,
        Terminator::CondBr {
            cond: c,
            then_dest: t,
            else_dest: e,
        },
    );
    for s in term.successors() {
        f.rename_phi_pred(s, b, j);
    }
    f.block_mut(t).insts.push(Inst::new(Some(r), Op::Mov(x)));
    f.block_mut(t).term = Terminator::Br(j);
    f.block_mut(e).insts.push(Inst::new(Some(r), Op::Mov(y)));
    f.block_mut(e).term = Terminator::Br(j);
    f.block_mut(j).insts = rest;
    f.block_mut(j).term = term;
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RepairReport {
    /// Splits whose negate flag was set or cleared.
    pub flipped: usize,
    /// Branches rewritten to read the split operand directly.
    pub unified: usize,
    /// Split/join pairs synthesized for uninstrumented divergent branches.
    pub synthesized: usize,
    /// Divergent branches left without a split (no dominated reconvergence
    /// point).
    pub unrepaired: Vec<String>,
}

impl RepairReport {
    pub fn changed(&self) -> bool {
        self.flipped + self.unified + self.synthesized > 0
    }

    pub fn merge(&mut self, o: RepairReport) {
        self.flipped += o.flipped;
        self.unified += o.unified;
        self.synthesized += o.synthesized;
        self.unrepaired.extend(o.unrepaired);
    }
}

/// Repair every function of a Lowered module; `facts` lists values known to
/// be warp-uniform (anything else is treated as divergent).
pub fn repair_module(m: &mut Module, facts: &UniformFacts) -> RepairReport {
    let mut rep = RepairReport::default();
    for f in &mut m.functions {
        let u = facts.get(&f.name).cloned().unwrap_or_default();
        rep.merge(repair_divergence(f, &u));
    }
    rep
}

fn single_defs(f: &Function) -> std::collections::HashMap<Value, Op> {
    let mut count: std::collections::HashMap<Value, usize> = Default::default();
    let mut ops = std::collections::HashMap::new();
    for b in &f.blocks {
        for i in &b.insts {
            if let Some(r) = i.result {
                *count.entry(r).or_default() += 1;
                ops.insert(r, i.op.clone());
            }
        }
        for p in &b.phis {
            *count.entry(p.dest).or_default() += 2;
        }
    }
    ops.retain(|v, _| count[v] == 1);
    ops
}

/// Follow single-definition copies (`mov`, `xor x, 0`) back to their source.
fn resolve(defs: &std::collections::HashMap<Value, Op>, mut v: Value) -> Value {
    let is_zero = |x: Value| matches!(defs.get(&x), Some(Op::Const(0)));
    for _ in 0..defs.len() + 1 {
        match defs.get(&v) {
            Some(Op::Mov(s)) => v = *s,
            Some(Op::Binary(BinOp::Xor, a, z)) if is_zero(*z) => v = *a,
            Some(Op::Binary(BinOp::Xor, z, a)) if is_zero(*z) => v = *a,
            _ => break,
        }
    }
    v
}

/// The operand `a` when `v` resolves to `xor a, ±1`.
fn negated_operand(f: &Function, defs: &std::collections::HashMap<Value, Op>, v: Value) -> Option<(Value, Value)> {
    let v = resolve(defs, v);
    match defs.get(&v) {
        Some(Op::Binary(BinOp::Xor, a, b)) => {
            if is_negation_of(f, v, *a) {
                Some((v, *a))
            } else if is_negation_of(f, v, *b) {
                Some((v, *b))
            } else {
                None
            }
        }
        _ => None,
    }
}

/// Uniform facts closed under pure single-definition operations.
fn uniform_closure(f: &Function, facts: &HashSet<Value>) -> HashSet<Value> {
    let defs = single_defs(f);
    let mut u = facts.clone();
    loop {
        let mut grew = false;
        for (v, op) in &defs {
            if u.contains(v) {
                continue;
            }
            let pure = matches!(
                op,
                Op::Binary(..) | Op::Const(_) | Op::Icmp(..) | Op::Mov(_) | Op::Cmov(..) | Op::AddrAdd(..) | Op::Select(..)
            );
            if pure && op.operands().iter().all(|o| u.contains(o)) {
                u.insert(*v);
                grew = true;
            }
        }
        if !grew {
            return u;
        }
    }
}

/// Restore the split/branch contract in one Lowered function. The branch
/// is authoritative: the split is re-pointed and its negate flag set so that
/// its "then" lanes are exactly the lanes the branch sends to its true
/// target. Applying it twice changes nothing the second time, and clean
/// pipeline output is left untouched.
pub fn repair_divergence(f: &mut Function, uniform: &HashSet<Value>) -> RepairReport {
    let mut rep = RepairReport::default();
    let defs = single_defs(f);
    let ids: Vec<BlockId> = f.blocks.iter().map(|b| b.id).collect();
    for &b in &ids {
        let Terminator::CondBr { cond: bc, .. } = f.block(b).term else {
            continue;
        };
        let insts = &f.block(b).insts;
        let Some(pos) = insts.iter().rposition(|i| matches!(i.op, Op::Split { .. })) else {
            continue;
        };
        // A split followed only by copies still belongs to this branch.
        if !insts[pos + 1..]
            .iter()
            .all(|i| matches!(i.op, Op::Mov(_) | Op::Binary(BinOp::Xor, ..) | Op::Const(_)))
        {
            continue;
        }
        let Op::Split { cond: sc, negate } = insts[pos].op else {
            unreachable!()
        };
        let (src, target) = (resolve(&defs, sc), resolve(&defs, bc));
        let (new_split, new_neg, new_branch) = if target == src {
            (sc, false, sc)
        } else if let Some((nv, a)) = negated_operand(f, &defs, bc).filter(|(_, a)| resolve(&defs, *a) == src) {
            (a, true, nv)
        } else if let Some((_, a)) = negated_operand(f, &defs, sc).filter(|(_, a)| resolve(&defs, *a) == target) {
            (a, false, a)
        } else {
            continue;
        };
        if new_neg != negate {
            rep.flipped += 1;
        }
        if new_branch != bc || new_split != sc || pos + 1 != insts.len() {
            rep.unified += 1;
        }
        let blk = f.block_mut(b);
        let mut split = blk.insts.remove(pos);
        split.op = Op::Split {
            cond: new_split,
            negate: new_neg,
        };
        blk.insts.push(split);
        if let Terminator::CondBr { cond, .. } = &mut blk.term {
            *cond = new_branch;
        }
    }
    synthesize(f, uniform, &mut rep);
    rep
}

/// Give every divergent conditional branch without a split one, joined at
/// its immediate post-dominator.
fn synthesize(f: &mut Function, uniform: &HashSet<Value>, rep: &mut RepairReport) {
    let u = uniform_closure(f, uniform);
    let bare: Vec<(BlockId, Value)> = f
        .blocks
        .iter()
        .filter_map(|b| match b.term {
            Terminator::CondBr { cond, then_dest, else_dest }
                if then_dest != else_dest && !u.contains(&cond) && !ends_in_split(f, b.id) =>
            {
                Some((b.id, cond))
            }
            _ => None,
        })
        .collect();
    if bare.is_empty() {
        return;
    }
    let d = compute_dom_tree(f);
    let pd = PostDomTree::with_virtual_exit(f);
    for (b, cond) in bare {
        match pd.ipdom(b).filter(|ip| Some(*ip) != pd.exit() && d.dominates(b, *ip)) {
            Some(ip) => {
                let tok = f.new_value("tok", Type::I32);
                f.block_mut(b).insts.push(Inst::new(Some(tok), Op::Split { cond, negate: false }));
                f.block_mut(ip).insts.insert(0, Inst::new(None, Op::Join(tok)));
                rep.synthesized += 1;
            }
            None => rep.unrepaired.push(f.label(b).to_string()),
        }
    }
}
