//! CFG reconstruction: duplicate shared CDG leaves so that each copy sits
//! under a single divergent condition.

use std::collections::HashSet;

use crate::cfg::{ControlDependenceGraph, LoopForest};
use crate::ir::{BlockId, Function, Terminator};
use crate::ssa::rebuild_ssa;
use crate::uniformity::{BranchState, UniformityMap};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReconReport {
    /// Blocks that qualified, by label.
    pub duplicated: Vec<String>,
    /// Copies created across all qualifying blocks.
    pub clones: usize,
}

/// Blocks eligible for duplication: shared CDG leaves with at least one
/// divergent controller, excluding loop headers, preheaders and the exit.
pub fn qualifying_blocks(
    f: &Function,
    u: &UniformityMap,
    cdg: &ControlDependenceGraph,
    lf: &LoopForest,
) -> Vec<BlockId> {
    f.blocks
        .iter()
        .filter(|b| b.id != f.entry())
        .filter(|b| matches!(b.term, Terminator::Br(_)))
        .filter(|b| cdg.pred_count(b.id) >= 2 && cdg.is_leaf(b.id))
        .filter(|b| !lf.is_header(b.id) && !lf.is_preheader(b.id))
        .filter(|b| cdg.controllers_of(b.id).any(|c| u.branch(c) == BranchState::Divergent))
        .map(|b| b.id)
        .collect()
}

/// Clone each qualifying block once per CFG predecessor beyond the first.
/// Copies branch straight to the block's successor, which gains the phis.
pub fn reconstruct_cfg(
    f: &mut Function,
    u: &UniformityMap,
    cdg: &ControlDependenceGraph,
    lf: &LoopForest,
) -> ReconReport {
    let mut report = ReconReport::default();
    for b in qualifying_blocks(f, u, cdg, lf) {
        let preds = f.predecessors()[&b].clone();
        if preds.len() < 2 {
            continue;
        }
        report.duplicated.push(f.label(b).to_string());
        let src = f.block(b).clone();
        let Terminator::Br(succ) = src.term else { unreachable!() };
        let mut dup: HashSet<_> = src.phis.iter().map(|p| p.dest).collect();
        dup.extend(src.insts.iter().filter_map(|i| i.result));
        let mut copies = vec![b];
        for &p in &preds[1..] {
            let c = f.new_block_after(*copies.last().unwrap(), &src.label);
            let cb = f.block_mut(c);
            cb.phis = src.phis.clone();
            for phi in &mut cb.phis {
                phi.incoming.retain(|(q, _)| *q == p);
            }
            cb.insts = src.insts.clone();
            cb.term = Terminator::Br(succ);
            for phi in &mut f.block_mut(b).phis {
                phi.incoming.retain(|(q, _)| *q != p);
            }
            f.block_mut(p).term.retarget(b, c);
            for phi in &mut f.block_mut(succ).phis {
                if let Some(v) = phi.value_from(b) {
                    phi.incoming.push((c, v));
                }
            }
            copies.push(c);
            report.clones += 1;
        }
        rebuild_ssa(f, &dup);
        fold_single_entry_phis(f, &copies);
    }
    report
}

fn fold_single_entry_phis(f: &mut Function, blocks: &[BlockId]) {
    for &b in blocks {
        let phis = std::mem::take(&mut f.block_mut(b).phis);
        let mut kept = Vec::new();
        for phi in phis {
            if let [(_, v)] = phi.incoming[..] {
                f.replace_all_uses(phi.dest, v);
            } else {
                kept.push(phi);
            }
        }
        f.block_mut(b).phis = kept;
    }
}
