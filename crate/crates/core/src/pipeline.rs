//! Pass ordering, per-pass bookkeeping and the end-to-end lowering driver.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::cfg::{build_cdg, build_loop_forest, compute_dom_tree, compute_postdom_tree};
use crate::config::PipelineConfig;
use crate::diverge::{check_nesting, classify_branches, demote_phis, transform_branch, transform_loop, DivergencePlan};
use crate::ir::{verify_module, Function, Module, Op, Stage, Terminator};
use crate::normalize::{canonicalize_loops, merge_returns, normalize_selects, remove_unreachable, simplify_cfg, structurize};
use crate::reconstruct::{reconstruct_cfg, ReconReport};
use crate::uniformity::{analyze_module, ModuleUniformity, UniformFacts};

/// Pass names accepted by `stop_after`, in execution order.
pub const PASSES: [&str; 10] = [
    "simplify",
    "selects",
    "loops",
    "structurize",
    "recon",
    "uniformity",
    "classify",
    "transform_loop",
    "diverge",
    "demote",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("unknown pass '{0}'")]
    UnknownPass(String),
    #[error("input is not a high-stage module")]
    NotHigh,
    #[error("input does not verify: {0}")]
    Verify(String),
    #[error("pass {pass} failed: {message}")]
    Pass { pass: String, message: String },
}

/// Static counts after one pass, plus the opcode-level difference from
/// before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassRecord {
    pub pass: String,
    pub blocks: usize,
    pub insts: usize,
    pub inserted: usize,
    pub removed: usize,
    pub splits: usize,
    pub joins: usize,
    pub preds: usize,
}

impl PassRecord {
    fn to_json(&self) -> String {
        format!(
            "{{\"blocks\": {}, \"inserted\": {}, \"insts\": {}, \"joins\": {}, \"pass\": \"{}\", \"preds\": {}, \"removed\": {}, \"splits\": {}}}",
            self.blocks, self.inserted, self.insts, self.joins, self.pass, self.preds, self.removed, self.splits
        )
    }
}

pub fn pass_log_json(log: &[PassRecord]) -> String {
    let items: Vec<String> = log.iter().map(|r| format!("  {}", r.to_json())).collect();
    format!("[\n{}\n]", items.join(",\n"))
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub module: Module,
    pub log: Vec<PassRecord>,
    /// Values the simulator must find uniform; empty before `uniformity`.
    pub facts: UniformFacts,
    pub uniformity: Option<ModuleUniformity>,
    pub recon: BTreeMap<String, ReconReport>,
    pub plans: BTreeMap<String, DivergencePlan>,
    /// Per function, labels of uniform branches promoted to splits.
    pub promoted: BTreeMap<String, Vec<String>>,
}

fn opcode_histogram(m: &Module) -> BTreeMap<&'static str, usize> {
    let mut h = BTreeMap::new();
    for f in &m.functions {
        for b in &f.blocks {
            *h.entry("phi").or_default() += b.phis.len();
            for i in &b.insts {
                *h.entry(i.op.mnemonic()).or_default() += 1;
            }
            *h.entry(b.term.mnemonic()).or_default() += 1;
        }
    }
    h
}

/// Static split, join and pred counts of a module.
pub fn divergence_counts(m: &Module) -> (usize, usize, usize) {
    let (mut s, mut j, mut p) = (0, 0, 0);
    for f in &m.functions {
        for b in &f.blocks {
            for i in &b.insts {
                match i.op {
                    Op::Split { .. } => s += 1,
                    Op::Join(_) => j += 1,
                    _ => {}
                }
            }
            if matches!(b.term, Terminator::Pred { .. }) {
                p += 1;
            }
        }
    }
    (s, j, p)
}

fn record(pass: &str, before: &BTreeMap<&'static str, usize>, m: &Module) -> PassRecord {
    let after = opcode_histogram(m);
    let keys: BTreeSet<&str> = before.keys().chain(after.keys()).copied().collect();
    let (mut inserted, mut removed) = (0, 0);
    for k in keys {
        let (a, b) = (before.get(k).copied().unwrap_or(0), after.get(k).copied().unwrap_or(0));
        inserted += b.saturating_sub(a);
        removed += a.saturating_sub(b);
    }
    let (splits, joins, preds) = divergence_counts(m);
    PassRecord {
        pass: pass.to_string(),
        blocks: m.functions.iter().map(|f| f.blocks.len()).sum(),
        insts: m.functions.iter().map(Function::instruction_count).sum(),
        inserted,
        removed,
        splits,
        joins,
        preds,
    }
}

fn pass_err(pass: &str, message: impl ToString) -> PipelineError {
    PipelineError::Pass {
        pass: pass.to_string(),
        message: message.to_string(),
    }
}

fn check_high(pass: &str, m: &Module) -> Result<(), PipelineError> {
    match verify_module(m).first() {
        Some(v) => Err(pass_err(pass, format!("output does not verify: {v}"))),
        None => Ok(()),
    }
}

/// Run the middle-end on a High module, stopping after `stop_after` if
/// given. The input is not modified.
pub fn run_pipeline(
    input: &Module,
    cfg: &PipelineConfig,
    stop_after: Option<&str>,
) -> Result<PipelineResult, PipelineError> {
    let last = match stop_after {
        Some(p) => PASSES
            .iter()
            .position(|q| *q == p)
            .ok_or_else(|| PipelineError::UnknownPass(p.to_string()))?,
        None => PASSES.len() - 1,
    };
    if input.stage != Stage::High {
        return Err(PipelineError::NotHigh);
    }
    if let Some(v) = verify_module(input).first() {
        return Err(PipelineError::Verify(v.to_string()));
    }
    let mut m = input.clone();
    let mut res = PipelineResult {
        module: Module::new(Stage::High),
        log: Vec::new(),
        facts: UniformFacts::new(),
        uniformity: None,
        recon: BTreeMap::new(),
        plans: BTreeMap::new(),
        promoted: BTreeMap::new(),
    };
    for (i, &pass) in PASSES.iter().enumerate().take(last + 1) {
        let before = opcode_histogram(&m);
        match pass {
            "simplify" => {
                for f in &mut m.functions {
                    remove_unreachable(f);
                    merge_returns(f);
                    simplify_cfg(f);
                }
                check_high(pass, &m)?;
            }
            "selects" => {
                for f in &mut m.functions {
                    normalize_selects(f, cfg.zicond);
                }
                check_high(pass, &m)?;
            }
            "loops" => {
                for f in &mut m.functions {
                    canonicalize_loops(f);
                }
                check_high(pass, &m)?;
            }
            "structurize" => {
                for f in &mut m.functions {
                    structurize(f).map_err(|e| pass_err(pass, e))?;
                    canonicalize_loops(f);
                }
                check_high(pass, &m)?;
            }
            "recon" => {
                if cfg.recon {
                    let mu = analyze_module(&m, cfg.annotations);
                    for f in &mut m.functions {
                        let pd = compute_postdom_tree(f).map_err(|e| pass_err(pass, e))?;
                        let cdg = build_cdg(f, &pd);
                        let lf = build_loop_forest(f, &compute_dom_tree(f));
                        let r = reconstruct_cfg(f, mu.map(&f.name), &cdg, &lf);
                        res.recon.insert(f.name.clone(), r);
                    }
                    check_high(pass, &m)?;
                }
            }
            "uniformity" => {
                let mu = analyze_module(&m, cfg.annotations);
                res.facts = mu.facts();
                res.uniformity = Some(mu);
            }
            "classify" => {
                let mu = res.uniformity.as_ref().expect("uniformity ran");
                for f in &m.functions {
                    let pd = compute_postdom_tree(f).map_err(|e| pass_err(pass, e))?;
                    let lf = build_loop_forest(f, &compute_dom_tree(f));
                    res.plans.insert(f.name.clone(), classify_branches(f, mu.map(&f.name), &pd, &lf));
                }
            }
            "transform_loop" => {
                for f in &mut m.functions {
                    transform_loop(f, &res.plans[&f.name]).map_err(|e| pass_err(pass, e))?;
                }
            }
            "diverge" => {
                for f in &mut m.functions {
                    let r = transform_branch(f, &res.plans[&f.name]).map_err(|e| pass_err(pass, e))?;
                    let labels = r.promoted.iter().map(|b| f.label(*b).to_string()).collect();
                    res.promoted.insert(f.name.clone(), labels);
                }
            }
            "demote" => {
                for f in &mut m.functions {
                    demote_phis(f);
                }
                m.stage = Stage::Lowered;
                if let Some(v) = verify_module(&m).first() {
                    return Err(pass_err(pass, format!("output does not verify: {v}")));
                }
                for f in &m.functions {
                    let uniform = res.facts.get(&f.name).cloned().unwrap_or_default();
                    if let Some(v) = check_nesting(f, &uniform).first() {
                        return Err(pass_err(pass, v));
                    }
                }
            }
            _ => unreachable!("pass list covers {}", PASSES[i]),
        }
        res.log.push(record(pass, &before, &m));
    }
    res.module = m;
    Ok(res)
}

/// Lower a High module all the way, with the default pass list.
pub fn lower(input: &Module, cfg: &PipelineConfig) -> Result<PipelineResult, PipelineError> {
    run_pipeline(input, cfg, None)
}
