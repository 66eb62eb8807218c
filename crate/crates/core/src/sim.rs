//! Lockstep warp simulator for Lowered modules.
//!
//! Each warp runs one instruction per scheduling turn, round-robin by warp
//! id. Lanes share a pc and an IPDOM stack; `split`/`join`/`pred`/`tmc`
//! are the only ways the active mask changes. Every structural assumption
//! the compiler makes (token depth, arm masks at reconvergence, loop mask
//! restore, refinement) is checked as the program runs.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::config::PipelineConfig;
use crate::ir::{BinOp, Block, BlockId, CmpOp, Function, Module, Op, SpecialReg, Stage, Terminator, Value, VoteKind};
use crate::runtime::{Outcome, RuntimeError};
use crate::uniformity::UniformFacts;

pub type Mask = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Launch {
    /// Every warp starts at the kernel entry with a full mask.
    Kernel,
    /// Warp 0 starts with lane 0 only; other warps enter via `wspawn`.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    AwaitingElse,
    ElseRunning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Entry {
    Unanimous { orig: Mask },
    Divergent {
        orig: Mask,
        else_mask: Mask,
        else_block: usize,
        phase: Phase,
    },
}

impl Entry {
    fn orig(&self) -> Mask {
        match *self {
            Entry::Unanimous { orig } | Entry::Divergent { orig, .. } => orig,
        }
    }
}

struct Frame {
    func: usize,
    block: usize,
    ip: usize,
    /// `regs[value * width + lane]`
    regs: Vec<i32>,
    /// IPDOM depth at call; the callee must return at the same depth.
    depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Active,
    AtBarrier { id: u32, warps: u32 },
    Halted,
}

struct Warp {
    id: usize,
    mask: Mask,
    stack: Vec<Entry>,
    frames: Vec<Frame>,
    status: Status,
    steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub dyn_instrs: u64,
    pub per_opcode: BTreeMap<String, u64>,
    pub splits_executed: u64,
    pub joins_executed: u64,
    pub preds_executed: u64,
    pub max_ipdom_depth: u64,
    pub barriers_hit: u64,
    /// Sum over executed instructions of the active lane count.
    pub active_lanes: u64,
    pub warp_size: u32,
}

impl MetricsReport {
    pub fn simd_efficiency(&self) -> f64 {
        if self.dyn_instrs == 0 {
            return 1.0;
        }
        self.active_lanes as f64 / (self.warp_size as f64 * self.dyn_instrs as f64)
    }

    /// Canonical JSON: sorted keys, six-decimal floats.
    pub fn to_json(&self) -> String {
        let ops: Vec<String> = self.per_opcode.iter().map(|(k, v)| format!("\"{k}\": {v}")).collect();
        format!(
            "{{\"barriers_hit\": {}, \"dyn_instrs\": {}, \"joins_executed\": {}, \"max_ipdom_depth\": {}, \"per_opcode\": {{{}}}, \"preds_executed\": {}, \"simd_efficiency\": {:.6}, \"splits_executed\": {}}}",
            self.barriers_hit,
            self.dyn_instrs,
            self.joins_executed,
            self.max_ipdom_depth,
            ops.join(", "),
            self.preds_executed,
            self.simd_efficiency(),
            self.splits_executed
        )
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub outcome: Outcome,
    pub metrics: MetricsReport,
}

/// A warp starting a block, recorded when tracing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub warp: usize,
    pub func: String,
    pub block: String,
    pub mask: Mask,
}

/// Lane 0 is the rightmost character.
pub fn mask_string(mask: Mask, width: usize) -> String {
    (0..width).rev().map(|l| if mask >> l & 1 == 1 { '1' } else { '0' }).collect()
}

struct Code<'m> {
    funcs: Vec<&'m Function>,
    by_name: HashMap<&'m str, usize>,
    block_index: Vec<HashMap<BlockId, usize>>,
    /// Per function, values whose definitions must agree across lanes.
    uniform: Vec<HashSet<Value>>,
}

struct Machine<'m> {
    code: Code<'m>,
    cfg: &'m PipelineConfig,
    width: usize,
    full: Mask,
    memory: Vec<i32>,
    warps: Vec<Warp>,
    rets: Vec<Option<i32>>,
    args: Vec<i32>,
    metrics: MetricsReport,
    trace: Option<Vec<TraceEvent>>,
}

fn lanes(mask: Mask) -> impl Iterator<Item = usize> {
    (0..64).filter(move |l| mask >> l & 1 == 1)
}

/// Run a Lowered module. `facts` lists, per function, the values the
/// compiler proved warp-uniform; each is checked at its definition.
pub fn run_simt(
    m: &Module,
    cfg: &PipelineConfig,
    args: &[i32],
    mem_init: &[i32],
    launch: Launch,
    facts: &UniformFacts,
) -> Result<SimResult, RuntimeError> {
    simulate(m, cfg, args, mem_init, launch, facts, false).map(|(r, _)| r)
}

/// Like [`run_simt`], also returning every block entry with its mask.
pub fn run_simt_traced(
    m: &Module,
    cfg: &PipelineConfig,
    args: &[i32],
    mem_init: &[i32],
    launch: Launch,
    facts: &UniformFacts,
) -> Result<(SimResult, Vec<TraceEvent>), RuntimeError> {
    simulate(m, cfg, args, mem_init, launch, facts, true)
}

fn simulate(
    m: &Module,
    cfg: &PipelineConfig,
    args: &[i32],
    mem_init: &[i32],
    launch: Launch,
    facts: &UniformFacts,
    trace: bool,
) -> Result<(SimResult, Vec<TraceEvent>), RuntimeError> {
    if m.stage != Stage::Lowered {
        return Err(RuntimeError::Unsupported("the lockstep simulator runs lowered modules".into()));
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
    let funcs: Vec<&Function> = m.functions.iter().collect();
    let code = Code {
        by_name: funcs.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect(),
        block_index: funcs
            .iter()
            .map(|f| f.blocks.iter().enumerate().map(|(i, b)| (b.id, i)).collect())
            .collect(),
        uniform: funcs
            .iter()
            .map(|f| facts.get(&f.name).cloned().unwrap_or_default())
            .collect(),
        funcs,
    };
    let width = cfg.warp_size as usize;
    let full = if width == 64 { !0 } else { (1u64 << width) - 1 };
    let mut memory = vec![0; cfg.mem_words];
    memory[..mem_init.len()].copy_from_slice(mem_init);
    let k = code.by_name[kernel.name.as_str()];
    let mut machine = Machine {
        width,
        full,
        memory,
        warps: Vec::new(),
        rets: vec![None; cfg.total_threads()],
        args: args.to_vec(),
        metrics: MetricsReport {
            warp_size: cfg.warp_size,
            ..MetricsReport::default()
        },
        code,
        cfg,
        trace: trace.then(Vec::new),
    };
    for w in 0..cfg.warp_count as usize {
        let mut warp = Warp {
            id: w,
            mask: 0,
            stack: Vec::new(),
            frames: Vec::new(),
            status: Status::Halted,
            steps: 0,
        };
        if launch == Launch::Kernel || w == 0 {
            warp.mask = if launch == Launch::Kernel { full } else { 1 };
            warp.status = Status::Active;
            warp.frames.push(machine.entry_frame(k, 0));
        }
        machine.warps.push(warp);
    }
    machine.run()?;
    Ok((
        SimResult {
            outcome: Outcome {
                memory: machine.memory,
                rets: machine.rets,
            },
            metrics: machine.metrics,
        },
        machine.trace.unwrap_or_default(),
    ))
}

impl<'m> Machine<'m> {
    fn entry_frame(&self, func: usize, depth: usize) -> Frame {
        let f = self.code.funcs[func];
        let mut regs = vec![0; f.num_values() * self.width];
        if f.params.len() == self.args.len() {
            for (p, a) in f.params.iter().zip(&self.args) {
                let base = p.value.0 as usize * self.width;
                regs[base..base + self.width].fill(*a);
            }
        }
        Frame {
            func,
            block: 0,
            ip: 0,
            regs,
            depth,
        }
    }

    fn run(&mut self) -> Result<(), RuntimeError> {
        loop {
            let mut ran = false;
            for w in 0..self.warps.len() {
                if self.warps[w].status == Status::Active {
                    self.step(w)?;
                    ran = true;
                }
            }
            if ran {
                continue;
            }
            if self.warps.iter().all(|w| w.status == Status::Halted) {
                return Ok(());
            }
            if !self.release_barriers() {
                return Err(RuntimeError::Deadlock);
            }
        }
    }

    fn release_barriers(&mut self) -> bool {
        let mut arrived: BTreeMap<u32, (u32, Vec<usize>)> = BTreeMap::new();
        for (i, w) in self.warps.iter().enumerate() {
            if let Status::AtBarrier { id, warps } = w.status {
                let e = arrived.entry(id).or_insert((warps, Vec::new()));
                e.0 = e.0.max(warps);
                e.1.push(i);
            }
        }
        let mut released = false;
        for (_, (need, ws)) in arrived {
            if ws.len() as u32 >= need {
                released = true;
                for i in ws {
                    let w = &mut self.warps[i];
                    w.status = Status::Active;
                    w.frames.last_mut().unwrap().ip += 1;
                }
            }
        }
        released
    }

    fn invariant(&self, w: usize, what: &str) -> RuntimeError {
        let warp = &self.warps[w];
        let fr = warp.frames.last().unwrap();
        let f = self.code.funcs[fr.func];
        RuntimeError::Invariant(format!(
            "{what} (warp {}, @{} ^{})",
            warp.id, f.name, f.blocks[fr.block].label
        ))
    }

    /// Masks only refine inside a region: every active lane belongs to the
    /// original mask of each enclosing stack entry.
    fn check_refinement(&self, w: usize) -> Result<(), RuntimeError> {
        let warp = &self.warps[w];
        if warp.stack.iter().any(|e| warp.mask & !e.orig() != 0) {
            return Err(self.invariant(w, "active lane outside an enclosing region"));
        }
        Ok(())
    }

    fn check_uniform(&self, w: usize, func: usize, v: Value) -> Result<(), RuntimeError> {
        if self.code.uniform[func].contains(&v) {
            self.check_flagged(w, func, v)
        } else {
            Ok(())
        }
    }

    /// The value of `v` shared by all active lanes, or an invariant error.
    fn warp_value(&self, w: usize, v: Value, what: &str) -> Result<i32, RuntimeError> {
        let warp = &self.warps[w];
        let fr = warp.frames.last().unwrap();
        let base = v.0 as usize * self.width;
        let mut vals = lanes(warp.mask).map(|l| fr.regs[base + l]);
        let first = vals.next().unwrap_or(0);
        if vals.any(|x| x != first) {
            return Err(self.invariant(w, &format!("{what} differs across lanes")));
        }
        Ok(first)
    }

    fn step(&mut self, w: usize) -> Result<(), RuntimeError> {
        let limit = self.cfg.step_limit;
        let width = self.width;
        let nthreads = self.rets.len();
        let code = &self.code;
        {
            let warp = &mut self.warps[w];
            warp.steps += 1;
            if warp.steps > limit {
                return Err(RuntimeError::StepLimit(limit));
            }
        }
        let (func, bi, ip) = {
            let fr = self.warps[w].frames.last().unwrap();
            (fr.func, fr.block, fr.ip)
        };
        let f = code.funcs[func];
        let block: &'m Block = &f.blocks[bi];
        let mask = self.warps[w].mask;
        self.metrics.dyn_instrs += 1;
        self.metrics.active_lanes += mask.count_ones() as u64;
        let op_name = if ip < block.insts.len() {
            block.insts[ip].op.mnemonic()
        } else {
            block.term.mnemonic()
        };
        *self.metrics.per_opcode.entry(op_name.to_string()).or_default() += 1;
        if ip == 0 {
            if let Some(t) = &mut self.trace {
                t.push(TraceEvent {
                    warp: self.warps[w].id,
                    func: f.name.clone(),
                    block: block.label.clone(),
                    mask,
                });
            }
        }

        if ip >= block.insts.len() {
            return self.terminator(w, func, block);
        }
        let inst = &block.insts[ip];
        let warp_id = self.warps[w].id;
        match &inst.op {
            Op::Split { cond, negate } => {
                let c = self.lane_bits(w, *cond);
                let t = if *negate { mask & !c } else { mask & c };
                let e = mask & !t;
                let entry = if t == 0 || e == 0 {
                    Entry::Unanimous { orig: mask }
                } else {
                    let Terminator::CondBr { else_dest, .. } = block.term else {
                        return Err(self.invariant(w, "split not followed by a conditional branch"));
                    };
                    Entry::Divergent {
                        orig: mask,
                        else_mask: e,
                        else_block: code.block_index[func][&else_dest],
                        phase: Phase::AwaitingElse,
                    }
                };
                self.warps[w].stack.push(entry);
                let depth = self.warps[w].stack.len() as i32;
                // Both arms read the token, so write it before narrowing.
                if let Some(r) = inst.result {
                    self.write_all(w, r, |_| depth);
                }
                if t != 0 && e != 0 {
                    self.warps[w].mask = t;
                }
                self.metrics.splits_executed += 1;
                self.metrics.max_ipdom_depth = self.metrics.max_ipdom_depth.max(depth as u64);
                self.warps[w].frames.last_mut().unwrap().ip += 1;
                return self.check_refinement(w);
            }
            Op::Join(tok) => {
                self.metrics.joins_executed += 1;
                let got = self.warp_value(w, *tok, "join token")?;
                let warp = &self.warps[w];
                let Some(top) = warp.stack.last().copied() else {
                    return Err(RuntimeError::JoinEmptyStack { warp: warp_id as u32 });
                };
                if got as i64 != warp.stack.len() as i64 {
                    return Err(RuntimeError::JoinTokenMismatch {
                        warp: warp_id as u32,
                        got: got as i64,
                        depth: warp.stack.len(),
                    });
                }
                match top {
                    Entry::Unanimous { orig } => {
                        if mask != orig {
                            return Err(self.invariant(w, "lanes missing at a unanimous join"));
                        }
                        let warp = &mut self.warps[w];
                        warp.stack.pop();
                        warp.frames.last_mut().unwrap().ip += 1;
                    }
                    Entry::Divergent {
                        orig,
                        else_mask,
                        else_block,
                        phase: Phase::AwaitingElse,
                    } => {
                        if mask != orig & !else_mask {
                            return Err(self.invariant(w, "taken arm reached its join with the wrong mask"));
                        }
                        let warp = &mut self.warps[w];
                        warp.mask = else_mask;
                        *warp.stack.last_mut().unwrap() = Entry::Divergent {
                            orig,
                            else_mask,
                            else_block,
                            phase: Phase::ElseRunning,
                        };
                        let fr = warp.frames.last_mut().unwrap();
                        fr.block = else_block;
                        fr.ip = 0;
                    }
                    Entry::Divergent {
                        orig,
                        else_mask,
                        phase: Phase::ElseRunning,
                        ..
                    } => {
                        if mask != else_mask {
                            return Err(self.invariant(w, "else arm reached its join with the wrong mask"));
                        }
                        let warp = &mut self.warps[w];
                        warp.stack.pop();
                        warp.mask = orig;
                        warp.frames.last_mut().unwrap().ip += 1;
                    }
                }
                return self.check_refinement(w);
            }
            Op::Tmc(m) => {
                let v = self.warp_value(w, *m, "tmc operand")?;
                let warp = &mut self.warps[w];
                warp.mask = v as u32 as u64 & self.full;
                warp.frames.last_mut().unwrap().ip += 1;
                if warp.mask == 0 {
                    if !warp.stack.is_empty() {
                        return Err(self.invariant(w, "warp halted with open splits"));
                    }
                    warp.status = Status::Halted;
                    return Ok(());
                }
                return self.check_refinement(w);
            }
            Op::Barrier { id, warps } => {
                if *warps > self.cfg.warp_count {
                    return Err(RuntimeError::BarrierCount {
                        wanted: *warps,
                        available: self.cfg.warp_count,
                    });
                }
                self.metrics.barriers_hit += 1;
                self.warps[w].status = Status::AtBarrier { id: *id, warps: *warps };
                return Ok(());
            }
            Op::Call { callee, args } => {
                let ci = *code
                    .by_name
                    .get(callee.as_str())
                    .ok_or_else(|| RuntimeError::BadLaunch(format!("call to unknown @{callee}")))?;
                let g = code.funcs[ci];
                let depth = self.warps[w].stack.len();
                let mut frame = self.entry_frame(ci, depth);
                {
                    let caller = self.warps[w].frames.last().unwrap();
                    for (p, a) in g.params.iter().zip(args) {
                        let (pb, ab) = (p.value.0 as usize * width, a.0 as usize * width);
                        for l in lanes(mask) {
                            frame.regs[pb + l] = caller.regs[ab + l];
                        }
                    }
                }
                self.warps[w].frames.push(frame);
                for p in &g.params {
                    if p.uniform {
                        self.check_flagged(w, ci, p.value)?;
                    }
                    self.check_uniform(w, ci, p.value)?;
                }
                return Ok(());
            }
            Op::Wspawn { count, func: target } => {
                let n = self.warp_value(w, *count, "wspawn count")?;
                if n < 0 || n as u32 > self.cfg.warp_count {
                    return Err(RuntimeError::BadLaunch(format!(
                        "wspawn of {n} warps with {} available",
                        self.cfg.warp_count
                    )));
                }
                let ti = *code
                    .by_name
                    .get(target.as_str())
                    .ok_or_else(|| RuntimeError::BadLaunch(format!("wspawn of unknown @{target}")))?;
                for i in 0..n as usize {
                    if i != w && self.warps[i].status == Status::Halted && self.warps[i].frames.is_empty() {
                        let frame = self.entry_frame(ti, 0);
                        let warp = &mut self.warps[i];
                        warp.frames.push(frame);
                        warp.mask = 1;
                        warp.status = Status::Active;
                    }
                }
                self.warps[w].frames.last_mut().unwrap().ip += 1;
                return Ok(());
            }
            Op::Vote(kind, c) => {
                let bits = self.lane_bits(w, *c) & mask;
                let r = match kind {
                    VoteKind::All => (bits == mask) as i32,
                    VoteKind::Any => (bits != 0) as i32,
                    VoteKind::Ballot => bits as u32 as i32,
                };
                if let Some(d) = inst.result {
                    self.write_all(w, d, |_| r);
                }
            }
            Op::Shfl { value, lane } => {
                let fr = self.warps[w].frames.last().unwrap();
                let (vb, lb) = (value.0 as usize * width, lane.0 as usize * width);
                let vals: Vec<i32> = (0..width)
                    .map(|l| {
                        let src = fr.regs[lb + l] as u32 as usize;
                        if src < width && mask >> src & 1 == 1 {
                            fr.regs[vb + src]
                        } else {
                            0
                        }
                    })
                    .collect();
                if let Some(d) = inst.result {
                    self.write_all(w, d, |l| vals[l]);
                }
            }
            Op::ActiveMask => {
                if let Some(d) = inst.result {
                    self.write_all(w, d, |_| mask as u32 as i32);
                }
            }
            Op::Store { value, ptr } => {
                for l in lanes(mask) {
                    let fr = self.warps[w].frames.last().unwrap();
                    let (v, p) = (fr.regs[value.0 as usize * width + l], fr.regs[ptr.0 as usize * width + l]);
                    let a = addr(p, self.memory.len())?;
                    self.memory[a] = v;
                }
            }
            Op::AtomicAdd { ptr, value } => {
                for l in lanes(mask) {
                    let fr = self.warps[w].frames.last().unwrap();
                    let (v, p) = (fr.regs[value.0 as usize * width + l], fr.regs[ptr.0 as usize * width + l]);
                    let a = addr(p, self.memory.len())?;
                    let old = self.memory[a];
                    self.memory[a] = old.wrapping_add(v);
                    if let Some(d) = inst.result {
                        let fr = self.warps[w].frames.last_mut().unwrap();
                        fr.regs[d.0 as usize * width + l] = old;
                    }
                }
            }
            Op::Load(p) => {
                let d = inst.result.expect("load has a result");
                for l in lanes(mask) {
                    let fr = self.warps[w].frames.last().unwrap();
                    let a = addr(fr.regs[p.0 as usize * width + l], self.memory.len())?;
                    let v = self.memory[a];
                    self.warps[w].frames.last_mut().unwrap().regs[d.0 as usize * width + l] = v;
                }
            }
            Op::AssumeUniform(_) => {}
            op => {
                let d = inst.result.expect("scalar op has a result");
                let warp_size = self.cfg.warp_size as usize;
                let nwid = self.cfg.warp_count as i32;
                let fr = self.warps[w].frames.last_mut().unwrap();
                for l in lanes(mask) {
                    let get = |v: &Value| fr.regs[v.0 as usize * width + l];
                    let r = match op {
                        Op::Binary(b, x, y) => binary(*b, get(x), get(y), &f.name)?,
                        Op::Const(c) => *c,
                        Op::Icmp(c, x, y) => compare(*c, get(x), get(y)) as i32,
                        Op::Select(c, x, y) | Op::Cmov(c, x, y) => {
                            if get(c) != 0 {
                                get(x)
                            } else {
                                get(y)
                            }
                        }
                        Op::Special(s) => match s {
                            SpecialReg::Tid => (warp_id * warp_size + l) as i32,
                            SpecialReg::Ntid => nthreads as i32,
                            SpecialReg::Wid => warp_id as i32,
                            SpecialReg::Nwid => nwid,
                            SpecialReg::CoreId => 0,
                        },
                        Op::AddrAdd(p, o) => get(p).wrapping_add(get(o)),
                        Op::Mov(x) => get(x),
                        other => {
                            return Err(RuntimeError::Unsupported(format!(
                                "'{}' in the simulator",
                                other.mnemonic()
                            )))
                        }
                    };
                    fr.regs[d.0 as usize * width + l] = r;
                }
            }
        }
        if let Some(d) = inst.result {
            self.check_uniform(w, func, d)?;
        }
        self.warps[w].frames.last_mut().unwrap().ip += 1;
        Ok(())
    }

    fn check_flagged(&self, w: usize, func: usize, v: Value) -> Result<(), RuntimeError> {
        let warp = &self.warps[w];
        let fr = warp.frames.last().unwrap();
        let base = v.0 as usize * self.width;
        let mut vals = lanes(warp.mask).map(|l| fr.regs[base + l]);
        if let Some(first) = vals.next() {
            if vals.any(|x| x != first) {
                let f = self.code.funcs[func];
                return Err(RuntimeError::UniformityViolation {
                    func: f.name.clone(),
                    value: f.value_name(v).to_string(),
                    warp: warp.id as u32,
                });
            }
        }
        Ok(())
    }

    fn lane_bits(&self, w: usize, v: Value) -> Mask {
        let warp = &self.warps[w];
        let fr = warp.frames.last().unwrap();
        let base = v.0 as usize * self.width;
        lanes(warp.mask)
            .filter(|l| fr.regs[base + l] != 0)
            .fold(0, |m, l| m | 1 << l)
    }

    fn write_all(&mut self, w: usize, d: Value, val: impl Fn(usize) -> i32) {
        let width = self.width;
        let warp = &mut self.warps[w];
        let mask = warp.mask;
        let fr = warp.frames.last_mut().unwrap();
        for l in lanes(mask) {
            fr.regs[d.0 as usize * width + l] = val(l);
        }
    }

    fn goto(&mut self, w: usize, func: usize, target: BlockId) {
        let bi = self.code.block_index[func][&target];
        let fr = self.warps[w].frames.last_mut().unwrap();
        fr.block = bi;
        fr.ip = 0;
    }

    fn terminator(&mut self, w: usize, func: usize, block: &Block) -> Result<(), RuntimeError> {
        let mask = self.warps[w].mask;
        match block.term {
            Terminator::Br(b) => self.goto(w, func, b),
            Terminator::CondBr {
                cond,
                then_dest,
                else_dest,
            } => {
                let c = self.lane_bits(w, cond);
                if c == mask {
                    self.goto(w, func, then_dest);
                } else if c == 0 {
                    self.goto(w, func, else_dest);
                } else {
                    let f = self.code.funcs[func];
                    return Err(RuntimeError::UncontrolledDivergence {
                        func: f.name.clone(),
                        block: block.label.clone(),
                        warp: self.warps[w].id as u32,
                    });
                }
            }
            Terminator::Pred {
                cond,
                mask: m0,
                body,
                exit,
            } => {
                self.metrics.preds_executed += 1;
                let n = self.lane_bits(w, cond);
                if n != 0 {
                    self.warps[w].mask = n;
                    self.goto(w, func, body);
                } else {
                    let saved = self.warp_value(w, m0, "loop mask")? as u32 as u64 & self.full;
                    if mask & !saved != 0 {
                        return Err(self.invariant(w, "loop lanes outside the preheader mask"));
                    }
                    self.warps[w].mask = saved;
                    self.goto(w, func, exit);
                }
                self.check_refinement(w)?;
            }
            Terminator::Ret(v) => {
                let width = self.width;
                let warp = &mut self.warps[w];
                let fr = warp.frames.pop().unwrap();
                if warp.stack.len() != fr.depth {
                    return Err(RuntimeError::Invariant(format!(
                        "@{} returned with {} open splits",
                        self.code.funcs[func].name,
                        warp.stack.len() - fr.depth.min(warp.stack.len())
                    )));
                }
                match warp.frames.last_mut() {
                    None => {
                        for l in lanes(mask) {
                            let t = warp.id * width + l;
                            self.rets[t] = v.map(|v| fr.regs[v.0 as usize * width + l]);
                        }
                        warp.status = Status::Halted;
                    }
                    Some(caller) => {
                        let cf = self.code.funcs[caller.func];
                        let inst = &cf.blocks[caller.block].insts[caller.ip];
                        if let Some(r) = inst.result {
                            for l in lanes(mask) {
                                caller.regs[r.0 as usize * width + l] =
                                    v.map(|v| fr.regs[v.0 as usize * width + l]).unwrap_or(0);
                            }
                        }
                        caller.ip += 1;
                        let cfunc = caller.func;
                        if let Some(r) = inst.result {
                            self.check_uniform(w, cfunc, r)?;
                        }
                    }
                }
            }
        }
        Ok(())
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
