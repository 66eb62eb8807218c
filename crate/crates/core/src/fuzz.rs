//! Seeded generator of structured kernels and the differential fuzz loop.
//!
//! Kernels keep four per-thread variables in a scratch buffer (`buf[4·tid +
//! k]`), so only loop counters need phis. Control is a random nest of
//! if / if-else / while up to depth 3 over a mix of lane-dependent and
//! warp-uniform conditions; every loop has a per-lane trip bound below 4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::harness::{compare_lowered, CompareError};
use crate::ir::parse_module;
use crate::latephase::{perturb, PerturbMode};
use crate::pipeline::lower;

const MAX_DEPTH: usize = 3;

struct Block {
    label: String,
    body: Vec<String>,
    term: String,
}

struct Gen {
    rng: ChaCha8Rng,
    blocks: Vec<Block>,
    next: usize,
    barrier: bool,
}

impl Gen {
    fn fresh(&mut self, hint: &str) -> String {
        self.next += 1;
        format!("{hint}{}", self.next)
    }

    fn emit(&mut self, line: String) {
        self.blocks.last_mut().unwrap().body.push(line);
    }

    fn label(&self) -> String {
        self.blocks.last().unwrap().label.clone()
    }

    /// Close the current block with `term` and open `label`.
    fn start(&mut self, term: String, label: &str) {
        self.blocks.last_mut().unwrap().term = term;
        self.blocks.push(Block {
            label: label.to_string(),
            body: Vec::new(),
            term: String::new(),
        });
    }

    fn slot_ptr(&mut self, k: usize) -> String {
        let o = self.fresh("o");
        let p = self.fresh("p");
        self.emit(format!("%{o} = add %base, %k{k}"));
        self.emit(format!("%{p} = addr.add %buf, %{o}"));
        p
    }

    fn load_slot(&mut self, k: usize) -> String {
        let p = self.slot_ptr(k);
        let v = self.fresh("v");
        self.emit(format!("%{v} = load %{p}"));
        v
    }

    fn load_any(&mut self) -> String {
        let k = self.rng.gen_range(0..4);
        self.load_slot(k)
    }

    fn operand(&mut self) -> String {
        match self.rng.gen_range(0..5) {
            0 => "t".into(),
            1 => format!("k{}", self.rng.gen_range(0..8)),
            2 => "w".into(),
            _ => self.load_any(),
        }
    }

    fn assign(&mut self) {
        let a = self.operand();
        let b = self.operand();
        let r = self.fresh("r");
        if self.rng.gen_bool(0.15) {
            let c = self.cond();
            self.emit(format!("%{r} = select %{c}, %{a}, %{b}"));
        } else {
            let op = ["add", "sub", "mul", "xor", "and", "or"][self.rng.gen_range(0..6)];
            self.emit(format!("%{r} = {op} %{a}, %{b}"));
        }
        let k = self.rng.gen_range(0..4);
        let p = self.slot_ptr(k);
        self.emit(format!("store %{r}, %{p}"));
    }

    fn cond(&mut self) -> String {
        let c = self.fresh("c");
        let (lhs, bits) = match self.rng.gen_range(0..4) {
            0 => ("t".to_string(), 3),
            1 => ("w".to_string(), 1),
            2 => ("n".to_string(), 1),
            _ => (self.load_any(), 1),
        };
        let m = self.fresh("m");
        self.emit(format!("%{m} = and %{lhs}, %k{bits}"));
        let rhs = self.rng.gen_range(0..=bits);
        self.emit(format!("%{c} = icmp eq %{m}, %k{rhs}"));
        c
    }

    fn stmts(&mut self, depth: usize) {
        let n = if depth == 0 { self.rng.gen_range(2..=4) } else { self.rng.gen_range(1..=3) };
        for _ in 0..n {
            self.stmt(depth);
        }
    }

    fn stmt(&mut self, depth: usize) {
        let kind = if depth >= MAX_DEPTH { 0 } else { self.rng.gen_range(0..6) };
        match kind {
            0 | 1 => self.assign(),
            2 => {
                let c = self.cond();
                let (t, j) = (self.fresh("then"), self.fresh("join"));
                self.start(format!("br %{c}, ^{t}, ^{j}"), &t);
                self.stmts(depth + 1);
                self.start(format!("br ^{j}"), &j);
            }
            3 => {
                let c = self.cond();
                let (t, e, j) = (self.fresh("then"), self.fresh("else"), self.fresh("join"));
                self.start(format!("br %{c}, ^{t}, ^{e}"), &t);
                self.stmts(depth + 1);
                self.start(format!("br ^{j}"), &e);
                self.stmts(depth + 1);
                self.start(format!("br ^{j}"), &j);
            }
            4 => self.while_loop(depth),
            _ if depth == 0 && !self.barrier => {
                self.barrier = true;
                self.emit("barrier 0, 1".into());
            }
            _ => self.assign(),
        }
    }

    fn while_loop(&mut self, depth: usize) {
        let src = match self.rng.gen_range(0..3) {
            0 => "n".to_string(),
            1 => "t".to_string(),
            _ => self.load_any(),
        };
        let bound = self.fresh("b");
        self.emit(format!("%{bound} = and %{src}, %k3"));
        let (h, body, exit) = (self.fresh("head"), self.fresh("body"), self.fresh("exit"));
        let (i, i2, c) = (self.fresh("i"), self.fresh("i"), self.fresh("c"));
        let pre = self.label();
        self.start(format!("br ^{h}"), &h);
        let hi = self.blocks.len() - 1;
        self.emit(format!("%{c} = icmp slt %{i}, %{bound}"));
        self.start(format!("br %{c}, ^{body}, ^{exit}"), &body);
        self.stmts(depth + 1);
        self.emit(format!("%{i2} = add %{i}, %k1"));
        let latch = self.label();
        self.blocks[hi]
            .body
            .insert(0, format!("%{i} = phi [%k0, ^{pre}], [%{i2}, ^{latch}]"));
        self.start(format!("br ^{h}"), &exit);
    }
}

/// Text of the kernel generated from `seed`.
pub fn generate_kernel(seed: u64) -> String {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        blocks: vec![Block {
            label: "entry".into(),
            body: Vec::new(),
            term: String::new(),
        }],
        next: 0,
        barrier: false,
    };
    g.emit("%t = tid".into());
    g.emit("%w = wid".into());
    for k in 0..8 {
        g.emit(format!("%k{k} = const {k}"));
    }
    g.emit("%base = shl %t, %k2".into());
    g.stmts(0);
    g.blocks.last_mut().unwrap().term = "ret".into();
    let mut s = format!("# fuzz kernel, seed {seed}\nkernel @fuzz(%buf: addr, %n: i32 uniform) {{\n");
    for b in &g.blocks {
        s.push_str(&format!("{}:\n", b.label));
        for l in &b.body {
            s.push_str(&format!("  {l}\n"));
        }
        s.push_str(&format!("  {}\n", b.term));
    }
    s.push_str("}\n");
    s
}

/// Seed of the `index`-th kernel of a fuzz run.
pub fn kernel_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FuzzStatus {
    Match,
    Mismatch(String),
    Error(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuzzEntry {
    pub index: usize,
    pub seed: u64,
    pub status: FuzzStatus,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuzzReport {
    pub seed: u64,
    pub entries: Vec<FuzzEntry>,
}

impl FuzzReport {
    pub fn matches(&self) -> usize {
        self.entries.iter().filter(|e| e.status == FuzzStatus::Match).count()
    }

    pub fn mismatches(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e.status, FuzzStatus::Mismatch(_))).count()
    }

    pub fn all_match(&self) -> bool {
        self.matches() == self.entries.len()
    }

    /// Sorted-key JSON with one entry per kernel.
    pub fn to_json(&self) -> String {
        let entries: Vec<String> = self
            .entries
            .iter()
            .map(|e| {
                let (status, detail) = match &e.status {
                    FuzzStatus::Match => ("match", String::new()),
                    FuzzStatus::Mismatch(d) => ("mismatch", d.clone()),
                    FuzzStatus::Error(d) => ("error", d.clone()),
                };
                format!(
                    "    {{\"detail\": {}, \"index\": {}, \"seed\": {}, \"status\": \"{status}\"}}",
                    json_string(&detail),
                    e.index,
                    e.seed
                )
            })
            .collect();
        format!(
            "{{\n  \"count\": {},\n  \"kernels\": [\n{}\n  ],\n  \"matches\": {},\n  \"seed\": {}\n}}",
            self.entries.len(),
            entries.join(",\n"),
            self.matches(),
            self.seed
        )
    }
}

fn json_string(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Extra stages between lowering and simulation.
#[derive(Clone, Copy, Debug, Default)]
pub struct FuzzOptions {
    /// Perturb every lowered kernel (seeded by its own seed) before running.
    pub perturb: Option<PerturbMode>,
    /// Repair after perturbing.
    pub repair: bool,
}

fn check_one(seed: u64, cfg: &PipelineConfig, opts: &FuzzOptions) -> FuzzStatus {
    let m = match parse_module(&generate_kernel(seed)) {
        Ok(m) => m,
        Err(e) => return FuzzStatus::Error(format!("generator produced bad text: {e}")),
    };
    let mut lowered = match lower(&m, cfg) {
        Ok(l) => l,
        Err(e) => return FuzzStatus::Error(e.to_string()),
    };
    if let Some(mode) = opts.perturb {
        if perturb(&mut lowered.module, mode, seed).is_ok() && opts.repair {
            crate::latephase::repair_module(&mut lowered.module, &lowered.facts);
        }
    }
    match compare_lowered(&m, lowered, cfg) {
        Ok(c) if c.diff.is_match() => FuzzStatus::Match,
        Ok(c) => FuzzStatus::Mismatch(c.diff.to_string()),
        Err(CompareError::Sim(e)) if opts.perturb.is_some() => FuzzStatus::Mismatch(format!("simulator: {e}")),
        Err(e) => FuzzStatus::Error(e.to_string()),
    }
}

pub fn fuzz_kernels(seed: u64, count: usize, cfg: &PipelineConfig) -> FuzzReport {
    fuzz_kernels_with(seed, count, cfg, &FuzzOptions::default())
}

/// Generate and compare `count` kernels in parallel; entries come back in
/// index order.
pub fn fuzz_kernels_with(seed: u64, count: usize, cfg: &PipelineConfig, opts: &FuzzOptions) -> FuzzReport {
    let entries = (0..count)
        .into_par_iter()
        .map(|index| {
            let s = kernel_seed(seed, index);
            FuzzEntry {
                index,
                seed: s,
                status: check_one(s, cfg, opts),
            }
        })
        .collect();
    FuzzReport { seed, entries }
}
