//! Divergence-management insertion: classify divergent branches and loops,
//! insert split/join and loop predicates, then demote phis to copies.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::cfg::{build_loop_forest, compute_dom_tree, is_reachable, DomTree, LoopForest, PostDomTree};
use crate::ir::{infer_types, BlockId, Function, Inst, Op, Phi, Terminator, Type, Value};
use crate::ssa::rebuild_ssa;
use crate::uniformity::{BranchState, UniformityMap};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DivergeError {
    #[error("@{func}: latch ^{latch} does not branch to its header and exit")]
    MalformedLoop { func: String, latch: String },
    #[error("@{func}: post-dominator ^{ip} is not reachable from ^{block}")]
    UnreachableIpdom { func: String, block: String, ip: String },
    #[error("@{func}: cannot nest split/join consistently at ^{block}")]
    Unstructured { func: String, block: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DivergencePlan {
    /// Branch block -> its immediate post-dominator.
    pub branches: BTreeMap<BlockId, BlockId>,
    /// Latch block -> its immediate post-dominator (the loop exit).
    pub loops: BTreeMap<BlockId, BlockId>,
}

impl DivergencePlan {
    pub fn is_empty(&self) -> bool {
        self.branches.is_empty() && self.loops.is_empty()
    }
}

pub fn classify_branches(f: &Function, u: &UniformityMap, pd: &PostDomTree, lf: &LoopForest) -> DivergencePlan {
    let mut plan = DivergencePlan::default();
    for b in &f.blocks {
        if !b.term.is_conditional() || u.branch(b.id) != BranchState::Divergent {
            continue;
        }
        let Some(ip) = pd.ipdom(b.id) else { continue };
        let latch_of = lf.loops.iter().filter(|l| l.latches.contains(&b.id)).max_by_key(|l| l.depth);
        match latch_of {
            Some(l) if !l.contains(ip) => {
                plan.loops.insert(b.id, ip);
            }
            _ => {
                if is_reachable(f, b.id, ip) {
                    plan.branches.insert(b.id, ip);
                }
            }
        }
    }
    plan
}

/// Predicate every divergent loop: save the mask in the preheader, turn the
/// latch branch into `pred`, restore the mask at the top of the exit.
pub fn transform_loop(f: &mut Function, plan: &DivergencePlan) -> Result<(), DivergeError> {
    let lf = build_loop_forest(f, &compute_dom_tree(f));
    for &latch in plan.loops.keys() {
        let malformed = || DivergeError::MalformedLoop {
            func: f.name.clone(),
            latch: f.label(latch).to_string(),
        };
        let l = lf
            .loops
            .iter()
            .filter(|l| l.latches.contains(&latch))
            .max_by_key(|l| l.depth)
            .ok_or_else(malformed)?;
        let pre = l.preheader.ok_or_else(malformed)?;
        let Terminator::CondBr {
            cond,
            then_dest,
            else_dest,
        } = f.block(latch).term.clone()
        else {
            return Err(malformed());
        };
        if then_dest != l.header || l.contains(else_dest) {
            return Err(malformed());
        }
        let m0 = f.new_value("m0", Type::I32);
        f.block_mut(pre).insts.push(Inst::new(Some(m0), Op::ActiveMask));
        f.block_mut(latch).term = Terminator::Pred {
            cond,
            mask: m0,
            body: then_dest,
            exit: else_dest,
        };
        f.block_mut(else_dest).insts.insert(0, Inst::new(None, Op::Tmc(m0)));
    }
    Ok(())
}

/// Why the abstract split stack is inconsistent.
#[derive(Debug)]
enum WalkFail {
    /// Paths reaching `at` disagree on these open targets; `preds` holds
    /// each incoming edge's source with its state.
    Mismatch {
        at: BlockId,
        targets: Vec<BlockId>,
        preds: Vec<(BlockId, Stack)>,
    },
    /// A join target is buried under another open split.
    Buried(BlockId),
}

/// Open splits as (reconvergence target, split block), innermost last.
type Stack = Vec<(BlockId, BlockId)>;

struct Walk {
    /// Stack of open splits on entry to each block.
    entry: HashMap<BlockId, Stack>,
}

fn targets(s: &Stack) -> Vec<BlockId> {
    s.iter().map(|(t, _)| *t).collect()
}

fn count(s: &Stack, t: BlockId) -> usize {
    s.iter().filter(|(x, _)| *x == t).count()
}

/// Targets whose multiplicity differs between any two states.
fn stack_diff<'a>(states: impl Iterator<Item = &'a Stack> + Clone) -> Vec<BlockId> {
    let mut ts: Vec<BlockId> = states.clone().flat_map(|s| s.iter().map(|(t, _)| *t)).collect();
    ts.sort();
    ts.dedup();
    let mut out: Vec<BlockId> = ts
        .into_iter()
        .filter(|&t| {
            let mut cs = states.clone().map(|s| count(s, t));
            let first = cs.next();
            cs.any(|c| Some(c) != first)
        })
        .collect();
    if out.is_empty() {
        // Same multisets, different order.
        out = states.flat_map(targets).collect();
        out.sort();
        out.dedup();
    }
    out
}

/// Abstract execution over the forward CFG: a split pushes its target, a
/// block pops every target naming it.
fn walk(f: &Function, d: &DomTree, splits: &BTreeMap<BlockId, BlockId>) -> Result<Walk, WalkFail> {
    let mut entry: HashMap<BlockId, Stack> = HashMap::new();
    let mut out: HashMap<BlockId, Stack> = HashMap::new();
    let preds = f.predecessors();
    for b in d.rpo() {
        let incoming: Vec<(BlockId, Stack)> = preds
            .get(&b)
            .map(|ps| {
                ps.iter()
                    .filter(|p| !d.dominates(b, **p))
                    .filter_map(|p| out.get(p).map(|s| (*p, s.clone())))
                    .collect()
            })
            .unwrap_or_default();
        let mut state = match incoming.first() {
            None => Vec::new(),
            Some((_, s)) => s.clone(),
        };
        if incoming.iter().any(|(_, s)| targets(s) != targets(&state)) {
            return Err(WalkFail::Mismatch {
                at: b,
                targets: stack_diff(incoming.iter().map(|(_, s)| s)),
                preds: incoming,
            });
        }
        entry.insert(b, state.clone());
        while state.last().map(|e| e.0) == Some(b) {
            state.pop();
        }
        if state.iter().any(|e| e.0 == b) {
            return Err(WalkFail::Buried(b));
        }
        if let Some(&t) = splits.get(&b) {
            state.push((t, b));
        }
        for s in f.block(b).successors() {
            if d.dominates(s, b) {
                // Back edge: the header must be re-entered with its own state.
                let want = &entry[&s];
                if targets(want) != targets(&state) {
                    let diff = stack_diff([want, &state].into_iter());
                    return Err(WalkFail::Mismatch {
                        at: s,
                        targets: diff,
                        preds: vec![(b, state)],
                    });
                }
            }
        }
        if matches!(f.block(b).term, Terminator::Ret(_)) && !state.is_empty() {
            return Err(WalkFail::Mismatch {
                at: b,
                targets: targets(&state),
                preds: vec![(b, state)],
            });
        }
        out.insert(b, state);
    }
    Ok(Walk { entry })
}

/// Route the edges from `group` into `ip` through a new block, which
/// becomes the reconvergence point of the splits whose paths all end there.
fn pad_reconvergence(f: &mut Function, group: &[BlockId], ip: BlockId) -> BlockId {
    let label = format!("{}.join", f.label(ip));
    let j = f.new_block_after(*group.last().unwrap(), &label);
    f.block_mut(j).term = Terminator::Br(ip);
    for &p in group {
        f.block_mut(p).term.retarget(ip, j);
    }
    let phis = std::mem::take(&mut f.block_mut(ip).phis);
    let mut kept = Vec::new();
    for mut phi in phis {
        let (moved, stay): (Vec<_>, Vec<_>) = phi.incoming.into_iter().partition(|(b, _)| group.contains(b));
        let ty = f.value_type(phi.dest);
        let hint = f.value_name(phi.dest).to_string();
        let v = f.new_value(&hint, ty);
        f.block_mut(j).phis.push(Phi {
            dest: v,
            incoming: moved,
        });
        phi.incoming = stay;
        phi.incoming.push((j, v));
        kept.push(phi);
    }
    f.block_mut(ip).phis = kept;
    j
}

fn promotion_candidates(
    f: &Function,
    d: &DomTree,
    pd: &PostDomTree,
    lf: &LoopForest,
    splits: &BTreeMap<BlockId, BlockId>,
    target: BlockId,
    via: &[BlockId],
) -> Vec<BlockId> {
    let all: Vec<BlockId> = f
        .blocks
        .iter()
        .filter(|b| matches!(b.term, Terminator::CondBr { .. }) && b.term.is_conditional())
        .map(|b| b.id)
        .filter(|&c| !splits.contains_key(&c) && !lf.is_latch(c) && d.is_reachable(c))
        .filter(|&c| pd.ipdom(c) == Some(target))
        .filter(|&c| via.iter().any(|&v| v == c || is_reachable(f, c, v)))
        .collect();
    // Branches enclosing an existing split with the same target are not the
    // cause of the imbalance; prefer the others.
    let tight: Vec<BlockId> = all
        .iter()
        .copied()
        .filter(|&c| !splits.iter().any(|(&s, &t)| t == target && s != c && d.dominates(c, s)))
        .collect();
    if tight.is_empty() {
        all
    } else {
        tight
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchReport {
    /// Non-divergent branches given a split so joins nest on every path.
    pub promoted: Vec<BlockId>,
    pub splits: usize,
    pub joins: usize,
    /// Reconvergence blocks created for splits sharing a post-dominator.
    pub padded: usize,
}

/// Insert `split` before every planned branch and stacked `join`s at the top
/// of each post-dominator. Uniform branches sharing a post-dominator are
/// promoted to splits when paths would otherwise reach it with different
/// numbers of open splits.
pub fn transform_branch(f: &mut Function, plan: &DivergencePlan) -> Result<BranchReport, DivergeError> {
    let mut splits = plan.branches.clone();
    let mut report = BranchReport::default();
    for (&b, &ip) in &splits {
        if !is_reachable(f, b, ip) {
            return Err(DivergeError::UnreachableIpdom {
                func: f.name.clone(),
                block: f.label(b).to_string(),
                ip: f.label(ip).to_string(),
            });
        }
    }
    if splits.is_empty() {
        return Ok(report);
    }
    let unstructured = |f: &Function, b: BlockId| DivergeError::Unstructured {
        func: f.name.clone(),
        block: f.label(b).to_string(),
    };
    let mut d = compute_dom_tree(f);
    let mut pd = PostDomTree::with_virtual_exit(f);
    let mut lf = build_loop_forest(f, &d);
    let mut rounds = 0;
    let w = loop {
        rounds += 1;
        if rounds > 4 * f.blocks.len() + 16 {
            return Err(unstructured(f, f.entry()));
        }
        let (at, targets, preds) = match walk(f, &d, &splits) {
            Ok(w) => break w,
            Err(WalkFail::Buried(b)) => return Err(unstructured(f, b)),
            Err(WalkFail::Mismatch { at, targets, preds }) => (at, targets, preds),
        };
        if targets.contains(&at) && preds.len() > 1 {
            // Paths meet at their own reconvergence point with different
            // numbers of open splits: the deepest ones get a block of
            // their own, where their inner splits reconverge first.
            let deepest = preds.iter().map(|(_, s)| count(s, at)).max().unwrap_or(0);
            let mut group: Vec<BlockId> = preds
                .iter()
                .filter(|(_, s)| count(s, at) == deepest)
                .map(|(p, _)| *p)
                .collect();
            group.dedup();
            if group.len() < preds.len() {
                pad_reconvergence(f, &group, at);
                report.padded += 1;
                d = compute_dom_tree(f);
                pd = PostDomTree::with_virtual_exit(f);
                lf = build_loop_forest(f, &d);
                for (b, ip) in splits.iter_mut() {
                    *ip = pd.ipdom(*b).expect("split keeps an ipdom");
                }
                continue;
            }
        }
        // Paths share a block inside a region: uniform branches with the
        // same reconvergence point must split too, so every path carries
        // the same open splits.
        let via: Vec<BlockId> = preds.iter().map(|(p, _)| *p).collect();
        let mut added = Vec::new();
        for &t in &targets {
            for c in promotion_candidates(f, &d, &pd, &lf, &splits, t, &via) {
                if !added.contains(&c) {
                    added.push(c);
                }
            }
        }
        if added.is_empty() {
            return Err(unstructured(f, at));
        }
        for c in added {
            splits.insert(c, pd.ipdom(c).expect("candidate has an ipdom"));
            report.promoted.push(c);
        }
    };
    report.promoted.sort();

    let mut tokens: BTreeMap<(BlockId, usize), Value> = BTreeMap::new();
    let mut token = |f: &mut Function, key: (BlockId, usize)| {
        *tokens.entry(key).or_insert_with(|| f.new_value("tok", Type::I32))
    };
    let order: Vec<BlockId> = f.blocks.iter().map(|b| b.id).collect();
    let mut joins_at: Vec<(BlockId, Vec<Value>)> = Vec::new();
    for &b in &order {
        let Some(state) = w.entry.get(&b) else { continue };
        let mut depth = state.len();
        let mut js = Vec::new();
        while depth > 0 && state[depth - 1].0 == b {
            depth -= 1;
            js.push(token(f, (b, depth)));
        }
        if !js.is_empty() {
            joins_at.push((b, js));
        }
        if let Some(&t) = splits.get(&b) {
            let Terminator::CondBr { cond, .. } = f.block(b).term else {
                unreachable!("split on a non-branch")
            };
            let tok = token(f, (t, depth));
            f.block_mut(b).insts.push(Inst::new(
                Some(tok),
                Op::Split {
                    cond,
                    negate: false,
                },
            ));
            report.splits += 1;
        }
    }
    for (b, js) in joins_at {
        report.joins += js.len();
        let insts = &mut f.block_mut(b).insts;
        for (i, tok) in js.into_iter().enumerate() {
            insts.insert(i, Inst::new(None, Op::Join(tok)));
        }
    }
    let vars: HashSet<Value> = tokens.values().copied().collect();
    rebuild_ssa(f, &vars);
    infer_types(f);
    Ok(report)
}

/// Replace phis by copies in predecessors. Critical edges are split first so
/// every copy runs only for lanes taking its edge. Selects become `cmov`.
/// The caller marks the module Lowered.
pub fn demote_phis(f: &mut Function) {
    let with_phis: Vec<BlockId> = f.blocks.iter().filter(|b| !b.phis.is_empty()).map(|b| b.id).collect();
    for &s in &with_phis {
        let preds = f.predecessors().remove(&s).unwrap_or_default();
        let mut seen = HashSet::new();
        for p in preds {
            if !seen.insert(p) {
                continue;
            }
            let mut succs = f.block(p).successors();
            succs.dedup();
            if succs.len() > 1 {
                f.split_edge(p, s, "edge");
            }
        }
    }
    for &s in &with_phis {
        let phis = std::mem::take(&mut f.block_mut(s).phis);
        let mut preds: Vec<BlockId> = phis.iter().flat_map(|p| p.incoming.iter().map(|(b, _)| *b)).collect();
        preds.sort();
        preds.dedup();
        for p in preds {
            let copies: Vec<(Value, Value)> = phis
                .iter()
                .filter_map(|phi| phi.value_from(p).map(|v| (phi.dest, v)))
                .filter(|(d, v)| d != v)
                .collect();
            let dests: HashSet<Value> = copies.iter().map(|(d, _)| *d).collect();
            let mut seq = Vec::new();
            let mut srcs = Vec::new();
            for &(_, v) in &copies {
                if dests.contains(&v) {
                    let ty = f.value_type(v);
                    let t = f.new_value("pc", ty);
                    seq.push(Inst::new(Some(t), Op::Mov(v)));
                    srcs.push(t);
                } else {
                    srcs.push(v);
                }
            }
            for (&(d, _), v) in copies.iter().zip(srcs) {
                seq.push(Inst::new(Some(d), Op::Mov(v)));
            }
            let insts = &mut f.block_mut(p).insts;
            let at = match insts.last() {
                Some(Inst { op: Op::Split { .. }, .. }) => insts.len() - 1,
                _ => insts.len(),
            };
            insts.splice(at..at, seq);
        }
    }
    for b in &mut f.blocks {
        for inst in &mut b.insts {
            if let Op::Select(c, x, y) = inst.op {
                inst.op = Op::Cmov(c, x, y);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NestingViolation {
    #[error("@{func} ^{block}: join without an open split")]
    JoinUnderflow { func: String, block: String },
    #[error("@{func} ^{block}: reached with {a} and {b} open splits")]
    DepthMismatch { func: String, block: String, a: usize, b: usize },
    #[error("@{func} ^{block}: returns with {depth} open splits")]
    OpenAtReturn { func: String, block: String, depth: usize },
    #[error("@{func} ^{block}: divergent branch has no split")]
    Uninstrumented { func: String, block: String },
}

/// Symbolic split/join depth walk over the forward CFG of a Lowered
/// function, plus a scan for divergent branches lacking a split.
/// `uniform` holds the values known to be warp-uniform.
pub fn check_nesting(f: &Function, uniform: &HashSet<Value>) -> Vec<NestingViolation> {
    let mut out = Vec::new();
    if f.blocks.is_empty() {
        return out;
    }
    let d = compute_dom_tree(f);
    let label = |b: BlockId| f.label(b).to_string();
    let mut entry: HashMap<BlockId, usize> = HashMap::new();
    entry.insert(f.entry(), 0);
    for b in d.rpo() {
        let Some(&start) = entry.get(&b) else { continue };
        let block = f.block(b);
        let mut depth = start;
        for inst in &block.insts {
            match inst.op {
                Op::Split { .. } => depth += 1,
                Op::Join(_) => {
                    if depth == 0 {
                        out.push(NestingViolation::JoinUnderflow {
                            func: f.name.clone(),
                            block: label(b),
                        });
                    } else {
                        depth -= 1;
                    }
                }
                _ => {}
            }
        }
        if let Terminator::CondBr { cond, .. } = block.term {
            let split_before = matches!(block.insts.last(), Some(Inst { op: Op::Split { .. }, .. }));
            if block.term.is_conditional() && !split_before && !uniform.contains(&cond) {
                out.push(NestingViolation::Uninstrumented {
                    func: f.name.clone(),
                    block: label(b),
                });
            }
        }
        if matches!(block.term, Terminator::Ret(_)) && depth != 0 {
            out.push(NestingViolation::OpenAtReturn {
                func: f.name.clone(),
                block: label(b),
                depth,
            });
        }
        for s in block.successors() {
            let known = entry.get(&s).copied();
            match known {
                None if !d.dominates(s, b) => {
                    entry.insert(s, depth);
                }
                Some(a) if a != depth => out.push(NestingViolation::DepthMismatch {
                    func: f.name.clone(),
                    block: label(s),
                    a,
                    b: depth,
                }),
                _ => {}
            }
        }
    }
    out
}
