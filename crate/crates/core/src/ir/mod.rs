//! SSA kernel IR: modules, functions, blocks and instructions.
//!
//! Values and blocks are referenced through small index handles. A function
//! owns its value table; block handles are stable ids that survive block
//! insertion and removal, so passes can hold them across mutation.

mod parse;
mod print;
mod verify;

use std::collections::{HashMap, HashSet};
use std::fmt;

pub use parse::{parse_module, ParseError};
pub use print::{function_text, print_module};
pub use verify::{verify_function, verify_module, Violation, ViolationKind};
pub(crate) use verify::is_negation_of;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Type {
    I32,
    I1,
    Addr,
}

impl Type {
    pub fn name(self) -> &'static str {
        match self {
            Type::I32 => "i32",
            Type::I1 => "i1",
            Type::Addr => "addr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    High,
    Lowered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FuncKind {
    /// The launch entry point; external linkage.
    Kernel,
    External,
    Internal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Udiv,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub const ALL: [BinOp; 9] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Udiv,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Udiv => "udiv",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Slt,
    Sle,
    Sgt,
    Sge,
    Ult,
}

impl CmpOp {
    pub const ALL: [CmpOp; 7] = [
        CmpOp::Eq,
        CmpOp::Ne,
        CmpOp::Slt,
        CmpOp::Sle,
        CmpOp::Sgt,
        CmpOp::Sge,
        CmpOp::Ult,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            CmpOp::Eq => "eq",
            CmpOp::Ne => "ne",
            CmpOp::Slt => "slt",
            CmpOp::Sle => "sle",
            CmpOp::Sgt => "sgt",
            CmpOp::Sge => "sge",
            CmpOp::Ult => "ult",
        }
    }
}

/// Hardware-backed special registers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpecialReg {
    Tid,
    Ntid,
    Wid,
    Nwid,
    CoreId,
}

impl SpecialReg {
    pub fn mnemonic(self) -> &'static str {
        match self {
            SpecialReg::Tid => "tid",
            SpecialReg::Ntid => "ntid",
            SpecialReg::Wid => "wid",
            SpecialReg::Nwid => "nwid",
            SpecialReg::CoreId => "coreid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VoteKind {
    All,
    Any,
    Ballot,
}

impl VoteKind {
    pub fn mnemonic(self) -> &'static str {
        match self {
            VoteKind::All => "vote.all",
            VoteKind::Any => "vote.any",
            VoteKind::Ballot => "vote.ballot",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Binary(BinOp, Value, Value),
    Const(i32),
    Icmp(CmpOp, Value, Value),
    /// `select cond, if_true, if_false` (High only).
    Select(Value, Value, Value),
    Special(SpecialReg),
    Load(Value),
    Store { value: Value, ptr: Value },
    AddrAdd(Value, Value),
    AtomicAdd { ptr: Value, value: Value },
    Vote(VoteKind, Value),
    Shfl { value: Value, lane: Value },
    Call { callee: String, args: Vec<Value> },
    AssumeUniform(Value),
    Barrier { id: u32, warps: u32 },
    Split { cond: Value, negate: bool },
    Join(Value),
    Tmc(Value),
    ActiveMask,
    Wspawn { count: Value, func: String },
    /// `cmov cond, if_true, if_false` (Lowered only).
    Cmov(Value, Value, Value),
    /// Plain copy; produced by phi demotion (Lowered only).
    Mov(Value),
}

impl Op {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Op::Binary(op, ..) => op.mnemonic(),
            Op::Const(_) => "const",
            Op::Icmp(..) => "icmp",
            Op::Select(..) => "select",
            Op::Special(r) => r.mnemonic(),
            Op::Load(_) => "load",
            Op::Store { .. } => "store",
            Op::AddrAdd(..) => "addr.add",
            Op::AtomicAdd { .. } => "atomic_add",
            Op::Vote(k, _) => k.mnemonic(),
            Op::Shfl { .. } => "shfl",
            Op::Call { .. } => "call",
            Op::AssumeUniform(_) => "assume_uniform",
            Op::Barrier { .. } => "barrier",
            Op::Split { negate: false, .. } => "split",
            Op::Split { negate: true, .. } => "split.neg",
            Op::Join(_) => "join",
            Op::Tmc(_) => "tmc",
            Op::ActiveMask => "activemask",
            Op::Wspawn { .. } => "wspawn",
            Op::Cmov(..) => "cmov",
            Op::Mov(_) => "mov",
        }
    }

    pub fn operands(&self) -> Vec<Value> {
        match self {
            Op::Binary(_, a, b) | Op::Icmp(_, a, b) | Op::AddrAdd(a, b) => vec![*a, *b],
            Op::Select(c, a, b) | Op::Cmov(c, a, b) => vec![*c, *a, *b],
            Op::Const(_) | Op::Special(_) | Op::Barrier { .. } | Op::ActiveMask => vec![],
            Op::Load(p) => vec![*p],
            Op::Store { value, ptr } => vec![*value, *ptr],
            Op::AtomicAdd { ptr, value } => vec![*ptr, *value],
            Op::Vote(_, c) => vec![*c],
            Op::Shfl { value, lane } => vec![*value, *lane],
            Op::Call { args, .. } => args.clone(),
            Op::AssumeUniform(v) | Op::Join(v) | Op::Tmc(v) | Op::Mov(v) => vec![*v],
            Op::Split { cond, .. } => vec![*cond],
            Op::Wspawn { count, .. } => vec![*count],
        }
    }

    pub fn for_each_operand_mut(&mut self, mut f: impl FnMut(&mut Value)) {
        match self {
            Op::Binary(_, a, b) | Op::Icmp(_, a, b) | Op::AddrAdd(a, b) => {
                f(a);
                f(b);
            }
            Op::Select(c, a, b) | Op::Cmov(c, a, b) => {
                f(c);
                f(a);
                f(b);
            }
            Op::Const(_) | Op::Special(_) | Op::Barrier { .. } | Op::ActiveMask => {}
            Op::Load(p) => f(p),
            Op::Store { value, ptr } => {
                f(value);
                f(ptr);
            }
            Op::AtomicAdd { ptr, value } => {
                f(ptr);
                f(value);
            }
            Op::Vote(_, c) => f(c),
            Op::Shfl { value, lane } => {
                f(value);
                f(lane);
            }
            Op::Call { args, .. } => args.iter_mut().for_each(f),
            Op::AssumeUniform(v) | Op::Join(v) | Op::Tmc(v) | Op::Mov(v) => f(v),
            Op::Split { cond, .. } => f(cond),
            Op::Wspawn { count, .. } => f(count),
        }
    }

    /// Opcodes only legal once divergence control has been inserted.
    pub fn is_lowered_only(&self) -> bool {
        matches!(
            self,
            Op::Split { .. }
                | Op::Join(_)
                | Op::Tmc(_)
                | Op::ActiveMask
                | Op::Wspawn { .. }
                | Op::Cmov(..)
                | Op::Mov(_)
        )
    }

    pub fn is_high_only(&self) -> bool {
        matches!(self, Op::Select(..))
    }

    pub fn has_side_effects(&self) -> bool {
        matches!(
            self,
            Op::Store { .. }
                | Op::AtomicAdd { .. }
                | Op::Call { .. }
                | Op::AssumeUniform(_)
                | Op::Barrier { .. }
                | Op::Split { .. }
                | Op::Join(_)
                | Op::Tmc(_)
                | Op::Wspawn { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inst {
    pub result: Option<Value>,
    pub op: Op,
}

impl Inst {
    pub fn new(result: Option<Value>, op: Op) -> Self {
        Inst { result, op }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phi {
    pub dest: Value,
    pub incoming: Vec<(BlockId, Value)>,
}

impl Phi {
    pub fn value_from(&self, pred: BlockId) -> Option<Value> {
        self.incoming
            .iter()
            .find(|(b, _)| *b == pred)
            .map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Terminator {
    Br(BlockId),
    CondBr {
        cond: Value,
        then_dest: BlockId,
        else_dest: BlockId,
    },
    Ret(Option<Value>),
    /// Loop predicate: keep lanes with `cond` set and branch to `body`, or
    /// restore `mask` and leave through `exit` once no lane remains.
    Pred {
        cond: Value,
        mask: Value,
        body: BlockId,
        exit: BlockId,
    },
}

impl Terminator {
    pub fn successors(&self) -> Vec<BlockId> {
        match self {
            Terminator::Br(b) => vec![*b],
            Terminator::CondBr {
                then_dest,
                else_dest,
                ..
            } => vec![*then_dest, *else_dest],
            Terminator::Ret(_) => vec![],
            Terminator::Pred { body, exit, .. } => vec![*body, *exit],
        }
    }

    pub fn operands(&self) -> Vec<Value> {
        match self {
            Terminator::Br(_) | Terminator::Ret(None) => vec![],
            Terminator::CondBr { cond, .. } => vec![*cond],
            Terminator::Ret(Some(v)) => vec![*v],
            Terminator::Pred { cond, mask, .. } => vec![*cond, *mask],
        }
    }

    pub fn for_each_operand_mut(&mut self, mut f: impl FnMut(&mut Value)) {
        match self {
            Terminator::Br(_) | Terminator::Ret(None) => {}
            Terminator::CondBr { cond, .. } => f(cond),
            Terminator::Ret(Some(v)) => f(v),
            Terminator::Pred { cond, mask, .. } => {
                f(cond);
                f(mask);
            }
        }
    }

    /// Replace every edge to `from` with an edge to `to`.
    pub fn retarget(&mut self, from: BlockId, to: BlockId) {
        let fix = |b: &mut BlockId| {
            if *b == from {
                *b = to;
            }
        };
        match self {
            Terminator::Br(b) => fix(b),
            Terminator::CondBr {
                then_dest,
                else_dest,
                ..
            } => {
                fix(then_dest);
                fix(else_dest);
            }
            Terminator::Ret(_) => {}
            Terminator::Pred { body, exit, .. } => {
                fix(body);
                fix(exit);
            }
        }
    }

    pub fn is_conditional(&self) -> bool {
        match self {
            Terminator::CondBr {
                then_dest,
                else_dest,
                ..
            } => then_dest != else_dest,
            Terminator::Pred { .. } => true,
            _ => false,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Terminator::Br(_) | Terminator::CondBr { .. } => "br",
            Terminator::Ret(_) => "ret",
            Terminator::Pred { .. } => "pred",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub id: BlockId,
    pub label: String,
    pub phis: Vec<Phi>,
    pub insts: Vec<Inst>,
    pub term: Terminator,
}

impl Block {
    pub fn successors(&self) -> Vec<BlockId> {
        self.term.successors()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Param {
    pub value: Value,
    pub uniform: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValueData {
    pub name: String,
    pub ty: Type,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub kind: FuncKind,
    pub params: Vec<Param>,
    /// Layout order; the first block is the entry.
    pub blocks: Vec<Block>,
    values: Vec<ValueData>,
    value_names: HashMap<String, Value>,
    labels: HashSet<String>,
    next_block: u32,
}

impl Function {
    pub fn new(name: impl Into<String>, kind: FuncKind) -> Self {
        Function {
            name: name.into(),
            kind,
            params: Vec::new(),
            blocks: Vec::new(),
            values: Vec::new(),
            value_names: HashMap::new(),
            labels: HashSet::new(),
            next_block: 0,
        }
    }

    pub fn is_kernel(&self) -> bool {
        self.kind == FuncKind::Kernel
    }

    pub fn entry(&self) -> BlockId {
        self.blocks[0].id
    }

    pub fn num_values(&self) -> usize {
        self.values.len()
    }

    pub fn value_name(&self, v: Value) -> &str {
        &self.values[v.0 as usize].name
    }

    pub fn value_type(&self, v: Value) -> Type {
        self.values[v.0 as usize].ty
    }

    pub fn set_value_type(&mut self, v: Value, ty: Type) {
        self.values[v.0 as usize].ty = ty;
    }

    pub fn lookup_value(&self, name: &str) -> Option<Value> {
        self.value_names.get(name).copied()
    }

    /// Allocate a value named `hint`, or `hint.N` when the name is taken.
    pub fn new_value(&mut self, hint: &str, ty: Type) -> Value {
        let name = fresh_name(hint, |n| self.value_names.contains_key(n));
        let v = Value(self.values.len() as u32);
        self.value_names.insert(name.clone(), v);
        self.values.push(ValueData { name, ty });
        v
    }

    /// Allocate an empty block (terminated by `ret`) at the end of the layout.
    pub fn new_block(&mut self, hint: &str) -> BlockId {
        self.alloc_block(hint)
    }

    /// Allocate an empty block placed directly after `after` in the layout.
    pub fn new_block_after(&mut self, after: BlockId, hint: &str) -> BlockId {
        let id = self.alloc_block(hint);
        let b = self.blocks.pop().unwrap();
        let pos = self.index_of(after).map(|i| i + 1).unwrap_or(self.blocks.len());
        self.blocks.insert(pos, b);
        id
    }

    fn alloc_block(&mut self, hint: &str) -> BlockId {
        let label = fresh_name(hint, |n| self.labels.contains(n));
        self.labels.insert(label.clone());
        let id = BlockId(self.next_block);
        self.next_block += 1;
        self.blocks.push(Block {
            id,
            label,
            phis: Vec::new(),
            insts: Vec::new(),
            term: Terminator::Ret(None),
        });
        id
    }

    pub fn index_of(&self, id: BlockId) -> Option<usize> {
        self.blocks.iter().position(|b| b.id == id)
    }

    pub fn block(&self, id: BlockId) -> &Block {
        self.blocks
            .iter()
            .find(|b| b.id == id)
            .unwrap_or_else(|| panic!("no block {:?} in @{}", id, self.name))
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut Block {
        let name = self.name.clone();
        self.blocks
            .iter_mut()
            .find(|b| b.id == id)
            .unwrap_or_else(|| panic!("no block {:?} in @{}", id, name))
    }

    pub fn has_block(&self, id: BlockId) -> bool {
        self.blocks.iter().any(|b| b.id == id)
    }

    pub fn label(&self, id: BlockId) -> &str {
        &self.block(id).label
    }

    pub fn block_by_label(&self, label: &str) -> Option<BlockId> {
        self.blocks.iter().find(|b| b.label == label).map(|b| b.id)
    }

    /// Remove blocks from the layout and drop phi incomings that named them.
    pub fn remove_blocks(&mut self, dead: &HashSet<BlockId>) {
        for b in self.blocks.iter().filter(|b| dead.contains(&b.id)) {
            self.labels.remove(&b.label);
        }
        self.blocks.retain(|b| !dead.contains(&b.id));
        for b in &mut self.blocks {
            for phi in &mut b.phis {
                phi.incoming.retain(|(p, _)| !dead.contains(p));
            }
        }
    }

    pub fn predecessors(&self) -> HashMap<BlockId, Vec<BlockId>> {
        let mut preds: HashMap<BlockId, Vec<BlockId>> =
            self.blocks.iter().map(|b| (b.id, Vec::new())).collect();
        for b in &self.blocks {
            let mut succs = b.successors();
            succs.dedup();
            for s in succs {
                preds.entry(s).or_default().push(b.id);
            }
        }
        preds
    }

    /// Every use of `from` (phis, instructions, terminators) now reads `to`.
    pub fn replace_all_uses(&mut self, from: Value, to: Value) {
        let fix = |v: &mut Value| {
            if *v == from {
                *v = to;
            }
        };
        for b in &mut self.blocks {
            for phi in &mut b.phis {
                for (_, v) in &mut phi.incoming {
                    fix(v);
                }
            }
            for inst in &mut b.insts {
                inst.op.for_each_operand_mut(fix);
            }
            b.term.for_each_operand_mut(fix);
        }
    }

    /// Insert an empty block on the edge `from -> to` and return it.
    pub fn split_edge(&mut self, from: BlockId, to: BlockId, hint: &str) -> BlockId {
        let mid = self.new_block_after(from, hint);
        self.block_mut(mid).term = Terminator::Br(to);
        self.block_mut(from).term.retarget(to, mid);
        self.rename_phi_pred(to, from, mid);
        mid
    }

    /// Rename phi incoming edges from `old_pred` to `new_pred` in block `block`.
    pub fn rename_phi_pred(&mut self, block: BlockId, old_pred: BlockId, new_pred: BlockId) {
        for phi in &mut self.block_mut(block).phis {
            for (p, _) in &mut phi.incoming {
                if *p == old_pred {
                    *p = new_pred;
                }
            }
        }
    }

    /// Map from value to its defining block (params map to the entry).
    pub fn def_blocks(&self) -> HashMap<Value, Vec<BlockId>> {
        let mut defs: HashMap<Value, Vec<BlockId>> = HashMap::new();
        if !self.blocks.is_empty() {
            for p in &self.params {
                defs.entry(p.value).or_default().push(self.entry());
            }
        }
        for b in &self.blocks {
            for phi in &b.phis {
                defs.entry(phi.dest).or_default().push(b.id);
            }
            for inst in &b.insts {
                if let Some(r) = inst.result {
                    defs.entry(r).or_default().push(b.id);
                }
            }
        }
        defs
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.phis.len() + b.insts.len() + 1)
            .sum()
    }
}

fn join_types(a: Type, b: Type) -> Type {
    match (a, b) {
        (Type::Addr, _) | (_, Type::Addr) => Type::Addr,
        (Type::I1, Type::I1) => Type::I1,
        _ => Type::I32,
    }
}

/// Recompute result types of every definition to a fixed point.
///
/// Types are ordered `i1 < i32 < addr`; phis and copies take the join of
/// their inputs, so a phi mixing an address with a zero constant is an
/// address.
pub fn infer_types(f: &mut Function) {
    let params: HashSet<Value> = f.params.iter().map(|p| p.value).collect();
    let mut defined: HashSet<Value> = HashSet::new();
    for b in &f.blocks {
        defined.extend(b.phis.iter().map(|p| p.dest));
        defined.extend(b.insts.iter().filter_map(|i| i.result));
    }
    for v in &defined {
        if !params.contains(v) {
            f.values[v.0 as usize].ty = Type::I1;
        }
    }
    loop {
        let mut changed = false;
        for bi in 0..f.blocks.len() {
            for pi in 0..f.blocks[bi].phis.len() {
                let phi = &f.blocks[bi].phis[pi];
                let ty = phi
                    .incoming
                    .iter()
                    .map(|(_, v)| f.value_type(*v))
                    .fold(Type::I1, join_types);
                let d = phi.dest;
                changed |= f.raise_type(d, ty);
            }
            for ii in 0..f.blocks[bi].insts.len() {
                let inst = &f.blocks[bi].insts[ii];
                let Some(r) = inst.result else { continue };
                let t = |v: &Value| f.value_type(*v);
                let ty = match &inst.op {
                    Op::Binary(_, a, b) => {
                        if t(a) == Type::I1 && t(b) == Type::I1 {
                            Type::I1
                        } else {
                            Type::I32
                        }
                    }
                    Op::Icmp(..) | Op::Vote(VoteKind::All | VoteKind::Any, _) => Type::I1,
                    Op::Select(_, a, b) | Op::Cmov(_, a, b) => join_types(t(a), t(b)),
                    Op::AddrAdd(..) => Type::Addr,
                    Op::Shfl { value, .. } => t(value),
                    Op::Mov(v) => t(v),
                    _ => Type::I32,
                };
                changed |= f.raise_type(r, ty);
            }
        }
        if !changed {
            break;
        }
    }
}

impl Function {
    fn raise_type(&mut self, v: Value, ty: Type) -> bool {
        let cur = self.values[v.0 as usize].ty;
        let joined = join_types(cur, ty);
        if joined != cur {
            self.values[v.0 as usize].ty = joined;
            true
        } else {
            false
        }
    }
}

fn fresh_name(hint: &str, taken: impl Fn(&str) -> bool) -> String {
    if !hint.is_empty() && !taken(hint) {
        return hint.to_string();
    }
    let base = if hint.is_empty() { "v" } else { hint };
    // Strip an existing numeric suffix so clones of clones stay short.
    let base = match base.rsplit_once('.') {
        Some((stem, tail)) if !stem.is_empty() && tail.chars().all(|c| c.is_ascii_digit()) => {
            stem
        }
        _ => base,
    };
    (1..)
        .map(|n| format!("{base}.{n}"))
        .find(|n| !taken(n))
        .unwrap()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Module {
    pub stage: Stage,
    pub functions: Vec<Function>,
}

impl Module {
    pub fn new(stage: Stage) -> Self {
        Module {
            stage,
            functions: Vec::new(),
        }
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn kernel(&self) -> Option<&Function> {
        self.functions.iter().find(|f| f.is_kernel())
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_module(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_names_avoid_collisions() {
        let mut f = Function::new("f", FuncKind::Internal);
        let a = f.new_value("x", Type::I32);
        let b = f.new_value("x", Type::I32);
        let c = f.new_value("x.1", Type::I32);
        assert_eq!(f.value_name(a), "x");
        assert_eq!(f.value_name(b), "x.1");
        assert_eq!(f.value_name(c), "x.2");
    }

    #[test]
    fn blocks_insert_after_anchor() {
        let mut f = Function::new("f", FuncKind::Internal);
        let a = f.new_block("a");
        let c = f.new_block("c");
        let b = f.new_block_after(a, "b");
        let order: Vec<_> = f.blocks.iter().map(|b| b.id).collect();
        assert_eq!(order, vec![a, b, c]);
        assert_eq!(f.label(b), "b");
    }
}
