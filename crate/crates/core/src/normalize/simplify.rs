use std::collections::HashSet;

use crate::cfg::Cfg;
use crate::ir::{Function, Inst, Op, Phi, Terminator, Type};

/// Delete blocks unreachable from the entry. Returns how many were removed.
pub fn remove_unreachable(f: &mut Function) -> usize {
    let cfg = Cfg::new(f);
    let reach = cfg.reachable();
    let dead: HashSet<_> = (0..cfg.len()).filter(|i| !reach[*i]).map(|i| cfg.id(i)).collect();
    f.remove_blocks(&dead);
    dead.len()
}

/// Funnel every `ret` into one exit block; returned values meet in a phi.
pub fn merge_returns(f: &mut Function) {
    let rets: Vec<_> = f
        .blocks
        .iter()
        .filter_map(|b| match b.term {
            Terminator::Ret(v) => Some((b.id, v)),
            _ => None,
        })
        .collect();
    if rets.len() < 2 {
        return;
    }
    let last = f.blocks.last().unwrap().id;
    let exit = f.new_block_after(last, "exit");
    let with_value = rets.iter().any(|(_, v)| v.is_some());
    let mut incoming = Vec::new();
    let mut zero = None;
    for (b, v) in &rets {
        f.block_mut(*b).term = Terminator::Br(exit);
        if with_value {
            let v = match v {
                Some(v) => *v,
                None => *zero.get_or_insert_with(|| {
                    let z = f.new_value("zero", Type::I32);
                    let entry = f.entry();
                    f.block_mut(entry).insts.insert(0, Inst::new(Some(z), Op::Const(0)));
                    z
                }),
            };
            incoming.push((*b, v));
        }
    }
    if with_value {
        let ty = f.value_type(incoming[0].1);
        let r = f.new_value("retval", ty);
        f.block_mut(exit).phis.push(Phi { dest: r, incoming });
        f.block_mut(exit).term = Terminator::Ret(Some(r));
    }
}

/// Fold `B` into `A` when `A` ends in `br ^B` and `B` has no other
/// predecessor. Returns the number of merges.
fn merge_chains(f: &mut Function) -> usize {
    let mut merged = 0;
    loop {
        let preds = f.predecessors();
        let entry = f.entry();
        let pair = f.blocks.iter().find_map(|a| match a.term {
            Terminator::Br(b) if b != a.id && b != entry && preds[&b].len() == 1 => Some((a.id, b)),
            _ => None,
        });
        let Some((a, b)) = pair else { break };
        let blk = f.block(b).clone();
        for phi in &blk.phis {
            let v = phi.value_from(a).expect("phi entry for sole predecessor");
            f.replace_all_uses(phi.dest, v);
        }
        // Re-read after the use replacement touched `blk`'s own instructions.
        let blk = f.block(b).clone();
        let ab = f.block_mut(a);
        ab.insts.extend(blk.insts);
        ab.term = blk.term.clone();
        let mut succs = blk.term.successors();
        succs.dedup();
        for s in succs {
            f.rename_phi_pred(s, b, a);
        }
        f.remove_blocks(&HashSet::from([b]));
        merged += 1;
    }
    merged
}

/// Single-exit canonical form: unreachable blocks deleted, returns merged,
/// straight-line block chains fused.
pub fn simplify_cfg(f: &mut Function) {
    remove_unreachable(f);
    merge_returns(f);
    merge_chains(f);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, print_module, verify_module};

    #[test]
    fn two_returns_merge_into_phi() {
        let mut m = parse_module(
            "kernel @k(%c: i1) {\nA:\n  %x = const 1\n  br %c, ^B, ^C\nB:\n  ret %x\nC:\n  %y = const 2\n  ret %y\n}",
        )
        .unwrap();
        simplify_cfg(&mut m.functions[0]);
        assert!(verify_module(&m).is_empty(), "{}", print_module(&m));
        let f = &m.functions[0];
        let rets: Vec<_> = f.blocks.iter().filter(|b| matches!(b.term, Terminator::Ret(_))).collect();
        assert_eq!(rets.len(), 1);
        assert_eq!(rets[0].phis.len(), 1);
        assert_eq!(rets[0].phis[0].incoming.len(), 2);
    }

    #[test]
    fn dead_block_removed_and_idempotent() {
        let mut m = parse_module(
            "kernel @k(%c: i1) {\nA:\n  br %c, ^B, ^C\nB:\n  br ^C\nD:\n  br ^C\nC:\n  ret\n}",
        )
        .unwrap();
        simplify_cfg(&mut m.functions[0]);
        assert!(m.functions[0].block_by_label("D").is_none());
        assert!(verify_module(&m).is_empty());
        let once = print_module(&m);
        simplify_cfg(&mut m.functions[0]);
        assert_eq!(print_module(&m), once);
    }
}
