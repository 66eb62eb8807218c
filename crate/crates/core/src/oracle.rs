//! Scalar per-thread reference interpreter for High-stage modules.
//!
//! Each thread runs on its own with its own phi resolution; nothing here
//! touches the lockstep simulator or any compiler pass. Threads run in
//! ascending id order until they reach a barrier, a warp intrinsic or
//! their end, so atomics within a phase apply in thread order.
//!
//! `vote`/`shfl` need the values of warp peers. They are evaluated only
//! when every live peer stopped at the same intrinsic after executing the
//! same block sequence since the last barrier; anything else is rejected
//! as unsupported rather than guessed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::config::PipelineConfig;
use crate::ir::{
    BinOp, Block, BlockId, CmpOp, Function, Module, Op, SpecialReg, Stage, Terminator, Value, VoteKind,
};
use crate::runtime::{Outcome, RuntimeError};

struct Code<'m> {
    funcs: Vec<&'m Function>,
    by_name: HashMap<&'m str, usize>,
    block_index: Vec<HashMap<BlockId, usize>>,
}

impl<'m> Code<'m> {
    fn new(m: &'m Module) -> Self {
        let funcs: Vec<&Function> = m.functions.iter().collect();
        let by_name = funcs.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
        let block_index = funcs
            .iter()
            .map(|f| f.blocks.iter().enumerate().map(|(i, b)| (b.id, i)).collect())
            .collect();
        Code {
            funcs,
            by_name,
            block_index,
        }
    }

    fn block(&self, func: usize, block: usize) -> &'m Block {
        &self.funcs[func].blocks[block]
    }
}

struct Frame {
    func: usize,
    block: usize,
    ip: usize,
    env: Vec<i32>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Status {
    Run,
    Barrier { id: u32, warps: u32 },
    WarpOp,
    Halted,
}

struct Thread {
    frames: Vec<Frame>,
    status: Status,
    ret: Option<i32>,
    trace: u64,
    steps: u64,
}

struct Machine<'m> {
    code: Code<'m>,
    cfg: &'m PipelineConfig,
    memory: Vec<i32>,
    threads: Vec<Thread>,
}

/// Run the kernel of `m` with one scalar thread per SIMT lane.
pub fn run_oracle(
    m: &Module,
    cfg: &PipelineConfig,
    args: &[i32],
    mem_init: &[i32],
) -> Result<Outcome, RuntimeError> {
    if m.stage != Stage::High {
        return Err(RuntimeError::Unsupported("the reference interpreter runs high-stage modules".into()));
    }
    let kernel = m
        .kernel()
        .ok_or_else(|| RuntimeError::BadLaunch("module has no kernel".into()))?;
    if kernel.params.len() != args.len() {
        return Err(RuntimeError::BadLaunch(format!(
            "kernel @{} takes {} arguments, given {}",
            kernel.name,
            kernel.params.len(),
            args.len()
        )));
    }
    if mem_init.len() > cfg.mem_words {
        return Err(RuntimeError::BadLaunch("initial memory larger than mem_words".into()));
    }
    let code = Code::new(m);
    let k = code.by_name[kernel.name.as_str()];
    let mut memory = vec![0; cfg.mem_words];
    memory[..mem_init.len()].copy_from_slice(mem_init);
    let threads = (0..cfg.total_threads())
        .map(|_| {
            let mut env = vec![0; kernel.num_values()];
            for (p, a) in kernel.params.iter().zip(args) {
                env[p.value.0 as usize] = *a;
            }
            Thread {
                frames: vec![Frame {
                    func: k,
                    block: 0,
                    ip: 0,
                    env,
                }],
                status: Status::Run,
                ret: None,
                trace: 0,
                steps: 0,
            }
        })
        .collect();
    let mut machine = Machine {
        code,
        cfg,
        memory,
        threads,
    };
    machine.run()?;
    Ok(Outcome {
        memory: machine.memory,
        rets: machine.threads.iter().map(|t| t.ret).collect(),
    })
}

fn mix(h: u64, a: usize, b: usize) -> u64 {
    let mut x = h ^ ((a as u64) << 32 | b as u64);
    x = x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^ (x >> 29)
}

impl Machine<'_> {
    fn run(&mut self) -> Result<(), RuntimeError> {
        let w = self.cfg.warp_size as usize;
        loop {
            for t in 0..self.threads.len() {
                if self.threads[t].status == Status::Run {
                    self.run_thread(t)?;
                }
            }
            if self.threads.iter().all(|t| t.status == Status::Halted) {
                return Ok(());
            }
            let mut progressed = false;
            for warp in 0..self.cfg.warp_count as usize {
                let range = warp * w..(warp + 1) * w;
                if self.threads[range.clone()].iter().any(|t| t.status == Status::WarpOp) {
                    self.warp_op(range)?;
                    progressed = true;
                }
            }
            if progressed {
                continue;
            }
            if !self.release_barriers() {
                return Err(RuntimeError::Deadlock);
            }
        }
    }

    /// Release every barrier id whose arrived-warp count reached its target.
    fn release_barriers(&mut self) -> bool {
        let w = self.cfg.warp_size as usize;
        // id -> (required warps, arrived warp indices)
        let mut arrived: BTreeMap<u32, (u32, Vec<usize>)> = BTreeMap::new();
        for warp in 0..self.cfg.warp_count as usize {
            let live: Vec<&Thread> = self.threads[warp * w..(warp + 1) * w]
                .iter()
                .filter(|t| t.status != Status::Halted)
                .collect();
            let Some(first) = live.first() else { continue };
            if let Status::Barrier { id, warps } = first.status {
                if live.iter().all(|t| matches!(t.status, Status::Barrier { id: i, .. } if i == id)) {
                    let e = arrived.entry(id).or_insert((warps, Vec::new()));
                    e.0 = e.0.max(warps);
                    e.1.push(warp);
                }
            }
        }
        let mut released = false;
        for (_, (need, warps)) in arrived {
            if warps.len() as u32 >= need {
                released = true;
                for warp in warps {
                    for t in &mut self.threads[warp * w..(warp + 1) * w] {
                        if t.status != Status::Halted {
                            t.status = Status::Run;
                            t.trace = 0;
                            t.frames.last_mut().unwrap().ip += 1;
                        }
                    }
                }
            }
        }
        released
    }

    fn warp_op(&mut self, range: std::ops::Range<usize>) -> Result<(), RuntimeError> {
        let w = self.cfg.warp_size as usize;
        let base = range.start;
        let live: Vec<usize> = range.filter(|t| self.threads[*t].status != Status::Halted).collect();
        let unsupported = || {
            RuntimeError::Unsupported("vote/shfl reached by warp peers along different paths".into())
        };
        let key = |t: &Thread| {
            let fr = t.frames.last().unwrap();
            (t.status, t.trace, t.frames.len(), fr.func, fr.block, fr.ip)
        };
        let k0 = key(&self.threads[live[0]]);
        if live.len() != w || live.iter().any(|t| key(&self.threads[*t]) != k0) {
            return Err(unsupported());
        }
        let fr = self.threads[live[0]].frames.last().unwrap();
        let inst = &self.code.block(fr.func, fr.block).insts[fr.ip];
        let read = |t: usize, v: Value| self.threads[t].frames.last().unwrap().env[v.0 as usize];
        let results: Vec<i32> = match &inst.op {
            Op::Vote(kind, c) => {
                let bits: Vec<(usize, bool)> = live.iter().map(|t| (t - base, read(*t, *c) != 0)).collect();
                let r = match kind {
                    VoteKind::All => bits.iter().all(|(_, b)| *b) as i32,
                    VoteKind::Any => bits.iter().any(|(_, b)| *b) as i32,
                    VoteKind::Ballot => bits
                        .iter()
                        .filter(|(_, b)| *b)
                        .fold(0u64, |acc, (l, _)| acc | 1 << l) as i32,
                };
                vec![r; live.len()]
            }
            Op::Shfl { value, lane } => live
                .iter()
                .map(|t| {
                    let src = read(*t, *lane) as u32 as usize;
                    if src < w && live.contains(&(base + src)) {
                        read(base + src, *value)
                    } else {
                        0
                    }
                })
                .collect(),
            _ => unreachable!("warp op status on a scalar instruction"),
        };
        let dest = inst.result;
        for (t, r) in live.into_iter().zip(results) {
            let th = &mut self.threads[t];
            let fr = th.frames.last_mut().unwrap();
            if let Some(d) = dest {
                fr.env[d.0 as usize] = r;
            }
            fr.ip += 1;
            th.status = Status::Run;
        }
        Ok(())
    }

    fn run_thread(&mut self, t: usize) -> Result<(), RuntimeError> {
        let w = self.cfg.warp_size as usize;
        let limit = self.cfg.step_limit;
        let nthreads = self.threads.len();
        loop {
            let th = &mut self.threads[t];
            th.steps += 1;
            if th.steps > limit {
                return Err(RuntimeError::StepLimit(limit));
            }
            let fr = th.frames.last_mut().unwrap();
            let f = self.code.funcs[fr.func];
            let block = &f.blocks[fr.block];
            if fr.ip < block.insts.len() {
                let inst = &block.insts[fr.ip];
                let env = &mut fr.env;
                let get = |v: &Value| env[v.0 as usize];
                let value: Option<i32> = match &inst.op {
                    Op::Binary(op, a, b) => Some(binary(*op, get(a), get(b), &f.name)?),
                    Op::Const(c) => Some(*c),
                    Op::Icmp(op, a, b) => Some(compare(*op, get(a), get(b)) as i32),
                    Op::Select(c, a, b) => Some(if get(c) != 0 { get(a) } else { get(b) }),
                    Op::Special(r) => Some(match r {
                        SpecialReg::Tid => t as i32,
                        SpecialReg::Ntid => nthreads as i32,
                        SpecialReg::Wid => (t / w) as i32,
                        SpecialReg::Nwid => self.cfg.warp_count as i32,
                        SpecialReg::CoreId => 0,
                    }),
                    Op::Load(p) => {
                        let a = addr(get(p), self.memory.len())?;
                        Some(self.memory[a])
                    }
                    Op::Store { value, ptr } => {
                        let a = addr(get(ptr), self.memory.len())?;
                        self.memory[a] = get(value);
                        None
                    }
                    Op::AddrAdd(p, o) => Some(get(p).wrapping_add(get(o))),
                    Op::AtomicAdd { ptr, value } => {
                        let a = addr(get(ptr), self.memory.len())?;
                        let old = self.memory[a];
                        self.memory[a] = old.wrapping_add(get(value));
                        Some(old)
                    }
                    Op::Vote(..) | Op::Shfl { .. } => {
                        th.status = Status::WarpOp;
                        return Ok(());
                    }
                    Op::Call { callee, args } => {
                        let ci = *self.code.by_name.get(callee.as_str()).ok_or_else(|| {
                            RuntimeError::BadLaunch(format!("call to unknown @{callee}"))
                        })?;
                        let g = self.code.funcs[ci];
                        let mut genv = vec![0; g.num_values()];
                        for (p, a) in g.params.iter().zip(args) {
                            genv[p.value.0 as usize] = get(a);
                        }
                        th.trace = mix(th.trace, ci, usize::MAX);
                        th.frames.push(Frame {
                            func: ci,
                            block: 0,
                            ip: 0,
                            env: genv,
                        });
                        continue;
                    }
                    Op::AssumeUniform(_) => None,
                    Op::Barrier { id, warps } => {
                        if *warps > self.cfg.warp_count {
                            return Err(RuntimeError::BarrierCount {
                                wanted: *warps,
                                available: self.cfg.warp_count,
                            });
                        }
                        th.status = Status::Barrier { id: *id, warps: *warps };
                        return Ok(());
                    }
                    other => {
                        return Err(RuntimeError::Unsupported(format!(
                            "'{}' in a high-stage module",
                            other.mnemonic()
                        )))
                    }
                };
                if let (Some(r), Some(v)) = (inst.result, value) {
                    fr.env[r.0 as usize] = v;
                }
                fr.ip += 1;
                continue;
            }
            let next = match &block.term {
                Terminator::Br(b) => *b,
                Terminator::CondBr {
                    cond,
                    then_dest,
                    else_dest,
                } => {
                    if fr.env[cond.0 as usize] != 0 {
                        *then_dest
                    } else {
                        *else_dest
                    }
                }
                Terminator::Ret(v) => {
                    let rv = v.map(|v| fr.env[v.0 as usize]);
                    th.frames.pop();
                    match th.frames.last_mut() {
                        None => {
                            th.ret = rv;
                            th.status = Status::Halted;
                            return Ok(());
                        }
                        Some(caller) => {
                            let cf = self.code.funcs[caller.func];
                            let inst = &cf.blocks[caller.block].insts[caller.ip];
                            if let Some(r) = inst.result {
                                caller.env[r.0 as usize] = rv.unwrap_or(0);
                            }
                            caller.ip += 1;
                            th.trace = mix(th.trace, caller.func, usize::MAX - 1);
                            continue;
                        }
                    }
                }
                Terminator::Pred { .. } => {
                    return Err(RuntimeError::Unsupported("'pred' in a high-stage module".into()))
                }
            };
            // Enter `next`: phis read their incoming values in parallel.
            let from = block.id;
            let ni = self.code.block_index[fr.func][&next];
            let nb = &f.blocks[ni];
            let vals: Vec<i32> = nb
                .phis
                .iter()
                .map(|p| {
                    p.value_from(from)
                        .map(|v| fr.env[v.0 as usize])
                        .ok_or_else(|| RuntimeError::Unsupported(format!("phi in ^{} lacks an edge", nb.label)))
                })
                .collect::<Result<_, _>>()?;
            for (p, v) in nb.phis.iter().zip(vals) {
                fr.env[p.dest.0 as usize] = v;
            }
            fr.block = ni;
            fr.ip = 0;
            th.trace = mix(th.trace, fr.func, ni);
        }
    }
}

fn addr(a: i32, size: usize) -> Result<usize, RuntimeError> {
    if a < 0 || a as usize >= size {
        Err(RuntimeError::OutOfBounds {
            addr: a as i64,
            size,
        })
    } else {
        Ok(a as usize)
    }
}

fn binary(op: BinOp, a: i32, b: i32, func: &str) -> Result<i32, RuntimeError> {
    Ok(match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => a.wrapping_mul(b),
        BinOp::Udiv => {
            if b == 0 {
                return Err(RuntimeError::DivideByZero { func: func.to_string() });
            }
            ((a as u32) / (b as u32)) as i32
        }
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
        BinOp::Shl => ((a as u32) << (b as u32 & 31)) as i32,
        BinOp::Shr => ((a as u32) >> (b as u32 & 31)) as i32,
    })
}

fn compare(op: CmpOp, a: i32, b: i32) -> bool {
    match op {
        CmpOp::Eq => a == b,
        CmpOp::Ne => a != b,
        CmpOp::Slt => a < b,
        CmpOp::Sle => a <= b,
        CmpOp::Sgt => a > b,
        CmpOp::Sge => a >= b,
        CmpOp::Ult => (a as u32) < (b as u32),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diff {
    Match,
    /// Human-readable lines for the first differing words and threads.
    Mismatch(Vec<String>),
}

impl Diff {
    pub fn is_match(&self) -> bool {
        matches!(self, Diff::Match)
    }
}

impl fmt::Display for Diff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diff::Match => write!(f, "Match"),
            Diff::Mismatch(lines) => {
                write!(f, "Mismatch")?;
                for l in lines {
                    write!(f, "\n  {l}")?;
                }
                Ok(())
            }
        }
    }
}

const DIFF_LINES: usize = 16;

/// Bit-exact comparison of two outcomes.
pub fn diff_outcomes(a: &Outcome, b: &Outcome) -> Diff {
    let mut lines = Vec::new();
    if a.memory.len() != b.memory.len() {
        lines.push(format!("memory size {} vs {}", a.memory.len(), b.memory.len()));
    }
    if a.rets.len() != b.rets.len() {
        lines.push(format!("thread count {} vs {}", a.rets.len(), b.rets.len()));
    }
    for (i, (x, y)) in a.memory.iter().zip(&b.memory).enumerate() {
        if x != y && lines.len() < DIFF_LINES {
            lines.push(format!("mem[{i:#x}]: {:#010x} vs {:#010x}", *x as u32, *y as u32));
        }
    }
    let show = |r: &Option<i32>| r.map_or("-".to_string(), |v| v.to_string());
    for (i, (x, y)) in a.rets.iter().zip(&b.rets).enumerate() {
        if x != y && lines.len() < DIFF_LINES {
            lines.push(format!("thread {i} ret: {} vs {}", show(x), show(y)));
        }
    }
    if lines.is_empty() {
        Diff::Match
    } else {
        Diff::Mismatch(lines)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn cfg(warps: u32, lanes: u32) -> PipelineConfig {
        PipelineConfig {
            mem_words: 256,
            ..PipelineConfig::default()
        }
        .with_warps(warps, lanes)
    }

    #[test]
    fn saxpy_per_thread() {
        let m = parse_module(
            "kernel @saxpy(%a: i32 uniform, %x: addr, %y: addr, %out: addr) {
entry:
  %t = tid
  %px = addr.add %x, %t
  %py = addr.add %y, %t
  %po = addr.add %out, %t
  %vx = load %px
  %vy = load %py
  %ax = mul %a, %vx
  %r = add %ax, %vy
  store %r, %po
  ret
}",
        )
        .unwrap();
        let mut mem = vec![0; 24];
        for i in 0..8 {
            mem[i] = i as i32 + 1;
            mem[8 + i] = 100 * i as i32;
        }
        let out = run_oracle(&m, &cfg(2, 4), &[3, 0, 8, 16], &mem).unwrap();
        for i in 0..8 {
            assert_eq!(out.memory[16 + i], 3 * (i as i32 + 1) + 100 * i as i32);
        }
    }

    #[test]
    fn skipped_barrier_deadlocks() {
        let m = parse_module(
            "kernel @k() {
entry:
  %t = tid
  %z = const 0
  %c = icmp eq %t, %z
  br %c, ^skip, ^wait
wait:
  barrier 0, 2
  br ^skip
skip:
  barrier 1, 2
  ret
}",
        )
        .unwrap();
        assert_eq!(run_oracle(&m, &cfg(2, 4), &[], &[]), Err(RuntimeError::Deadlock));
    }

    #[test]
    fn vote_and_shfl_in_lockstep() {
        let m = parse_module(
            "kernel @k(%out: addr) {
entry:
  %t = tid
  %one = const 1
  %odd = and %t, %one
  %c = icmp eq %odd, %one
  %b = vote.ballot %c
  %n = add %t, %one
  %s = shfl %t, %n
  %p = addr.add %out, %t
  %q = add %b, %s
  store %q, %p
  ret
}",
        )
        .unwrap();
        let out = run_oracle(&m, &cfg(1, 4), &[0], &[]).unwrap();
        // ballot of odd lanes = 0b1010; shfl reads lane+1, 0 past the end.
        assert_eq!(&out.memory[..4], &[10 + 1, 10 + 2, 10 + 3, 10]);
    }

    #[test]
    fn vote_on_divergent_paths_is_rejected() {
        let m = parse_module(
            "kernel @k() {
entry:
  %t = tid
  %z = const 0
  %c = icmp eq %t, %z
  br %c, ^a, ^b
a:
  %v = vote.any %c
  br ^b
b:
  ret
}",
        )
        .unwrap();
        assert!(matches!(run_oracle(&m, &cfg(1, 4), &[], &[]), Err(RuntimeError::Unsupported(_))));
    }

    #[test]
    fn diff_reports_address() {
        let a = Outcome {
            memory: vec![1, 2, 3],
            rets: vec![None],
        };
        let mut b = a.clone();
        assert!(diff_outcomes(&a, &b).is_match());
        b.memory[2] = 9;
        match diff_outcomes(&a, &b) {
            Diff::Mismatch(l) => assert!(l.len() == 1 && l[0].contains("0x2")),
            Diff::Match => panic!(),
        }
    }
}
