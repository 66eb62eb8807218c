use crate::ir::{Function, Inst, Op, Phi, Terminator};

/// Rewrite each `select` into a branch diamond joined by a phi, unless
/// `zicond` keeps selects for lowering to `cmov`. Selects on constant
/// conditions fold. Returns the number of diamonds created.
pub fn normalize_selects(f: &mut Function, zicond: bool) -> usize {
    fold_constant_selects(f);
    if zicond {
        return 0;
    }
    let mut made = 0;
    loop {
        let site = f.blocks.iter().find_map(|b| {
            b.insts
                .iter()
                .position(|i| matches!(i.op, Op::Select(..)))
                .map(|i| (b.id, i))
        });
        let Some((x, i)) = site else { break };
        let blk = f.block_mut(x);
        let tail: Vec<Inst> = blk.insts.split_off(i + 1);
        let sel = blk.insts.pop().unwrap();
        let Op::Select(c, a, b) = sel.op else { unreachable!() };
        let old_term = std::mem::replace(&mut blk.term, Terminator::Ret(None));
        let t = f.new_block_after(x, "sel.then");
        let e = f.new_block_after(t, "sel.else");
        let j = f.new_block_after(e, "sel.join");
        let mut succs = old_term.successors();
        succs.dedup();
        for s in succs {
            f.rename_phi_pred(s, x, j);
        }
        f.block_mut(x).term = Terminator::CondBr {
            cond: c,
            then_dest: t,
            else_dest: e,
        };
        f.block_mut(t).term = Terminator::Br(j);
        f.block_mut(e).term = Terminator::Br(j);
        let jb = f.block_mut(j);
        jb.phis.push(Phi {
            dest: sel.result.unwrap(),
            incoming: vec![(t, a), (e, b)],
        });
        jb.insts = tail;
        jb.term = old_term;
        made += 1;
    }
    made
}

fn fold_constant_selects(f: &mut Function) {
    loop {
        let consts: std::collections::HashMap<_, _> = f
            .blocks
            .iter()
            .flat_map(|b| b.insts.iter())
            .filter_map(|i| match (i.result, &i.op) {
                (Some(r), Op::Const(c)) => Some((r, *c)),
                _ => None,
            })
            .collect();
        let mut fold = None;
        'find: for b in &f.blocks {
            for (idx, inst) in b.insts.iter().enumerate() {
                if let Op::Select(c, x, y) = inst.op {
                    if let Some(k) = consts.get(&c) {
                        fold = Some((b.id, idx, inst.result.unwrap(), if *k != 0 { x } else { y }));
                        break 'find;
                    }
                }
            }
        }
        let Some((b, idx, r, v)) = fold else { break };
        f.block_mut(b).insts.remove(idx);
        f.replace_all_uses(r, v);
    }
}
