use std::collections::{HashMap, HashSet};

use crate::cfg::{build_loop_forest, compute_dom_tree, Loop};
use crate::ir::{infer_types, BlockId, CmpOp, Function, Inst, Op, Phi, Terminator, Type, Value};
use crate::ssa::rebuild_ssa;

/// Preheader, one latch ending `br %c, ^header, ^exit`, that edge as the
/// only way out, and an exit block owned by the latch.
pub fn is_canonical_loop(f: &Function, l: &Loop) -> bool {
    if l.preheader.is_none() || l.latches.len() != 1 {
        return false;
    }
    let latch = *l.latches.iter().next().unwrap();
    if l.exiting_blocks(f) != [latch] {
        return false;
    }
    match f.block(latch).term {
        Terminator::CondBr {
            then_dest,
            else_dest,
            ..
        } if then_dest == l.header && !l.contains(else_dest) => {
            let preds = f.predecessors();
            preds[&else_dest] == [latch]
        }
        _ => false,
    }
}

/// Bring every loop into canonical form, innermost first. Loops without an
/// exit edge are left alone. Returns the number of loops rewritten.
pub fn canonicalize_loops(f: &mut Function) -> usize {
    let mut skip: HashSet<BlockId> = HashSet::new();
    let mut rewritten = 0;
    loop {
        let dom = compute_dom_tree(f);
        let forest = build_loop_forest(f, &dom);
        let next = forest
            .innermost_first()
            .into_iter()
            .find(|l| !skip.contains(&l.header) && !is_canonical_loop(f, l))
            .cloned();
        let Some(l) = next else { break };
        skip.insert(l.header);
        if l.exits.is_empty() {
            continue;
        }
        canonicalize_one(f, &l);
        rewritten += 1;
    }
    infer_types(f);
    rewritten
}

fn const_in(f: &mut Function, block: BlockId, hint: &str, c: i32) -> Value {
    let ty = if c == 0 || c == 1 { Type::I1 } else { Type::I32 };
    let v = f.new_value(hint, ty);
    let blk = f.block_mut(block);
    let at = blk.insts.len();
    blk.insts.insert(at, Inst::new(Some(v), Op::Const(c)));
    v
}

fn ensure_preheader(f: &mut Function, l: &Loop) -> BlockId {
    if let Some(p) = l.preheader {
        return p;
    }
    let h = l.header;
    let preds = f.predecessors();
    let outside: Vec<BlockId> = preds[&h].iter().copied().filter(|p| !l.contains(*p)).collect();
    let hidx = f.index_of(h).unwrap();
    let p = if hidx == 0 {
        let p = f.new_block("preheader");
        let blk = f.blocks.pop().unwrap();
        f.blocks.insert(0, blk);
        p
    } else {
        let before = f.blocks[hidx - 1].id;
        f.new_block_after(before, "preheader")
    };
    f.block_mut(p).term = Terminator::Br(h);
    for o in &outside {
        f.block_mut(*o).term.retarget(h, p);
    }
    let phis = std::mem::take(&mut f.block_mut(h).phis);
    let mut kept = Vec::new();
    for mut phi in phis {
        let (out, inside): (Vec<_>, Vec<_>) =
            phi.incoming.into_iter().partition(|(b, _)| outside.contains(b));
        phi.incoming = inside;
        match out.as_slice() {
            [] => {}
            [(_, v)] => phi.incoming.insert(0, (p, *v)),
            _ => {
                let name = f.value_name(phi.dest).to_string();
                let m = f.new_value(&name, f.value_type(phi.dest));
                f.block_mut(p).phis.push(Phi {
                    dest: m,
                    incoming: out,
                });
                phi.incoming.insert(0, (p, m));
            }
        }
        kept.push(phi);
    }
    f.block_mut(h).phis = kept;
    p
}

fn canonicalize_one(f: &mut Function, l: &Loop) {
    let h = l.header;
    let pre = ensure_preheader(f, l);

    // Every back edge and exit edge is routed through its own edge block
    // into a fresh latch that decides between another trip and leaving.
    let mut back = Vec::new();
    let mut exit = Vec::new();
    let mut targets: Vec<BlockId> = Vec::new();
    let order: Vec<BlockId> = f.blocks.iter().map(|b| b.id).filter(|b| l.contains(*b)).collect();
    for &u in &order {
        let mut succs = f.block(u).successors();
        succs.dedup();
        for s in succs {
            if s == h {
                back.push(u);
            } else if !l.contains(s) {
                exit.push((u, s));
                if !targets.contains(&s) {
                    targets.push(s);
                }
            }
        }
    }
    let last = *order.iter().max_by_key(|b| f.index_of(**b)).unwrap();
    let latch = f.new_block_after(last, "latch");
    let t = const_in(f, pre, "true", 1);
    let fl = const_in(f, pre, "false", 0);
    let ids: Vec<Value> = if targets.len() > 1 {
        (0..targets.len()).map(|k| const_in(f, pre, "eid", k as i32)).collect()
    } else {
        Vec::new()
    };

    let mut back_edges: Vec<(BlockId, BlockId)> = Vec::new();
    let owned_exit = targets.len() == 1 && f.predecessors()[&targets[0]].iter().all(|p| l.contains(*p));
    // Sources with a single successor feed the latch directly.
    let route = |f: &mut Function, u: BlockId, to: BlockId, hint: &str| -> BlockId {
        if let Terminator::Br(_) = f.block(u).term {
            f.block_mut(u).term = Terminator::Br(latch);
            return u;
        }
        let e = f.new_block_after(u, hint);
        f.block_mut(e).term = Terminator::Br(latch);
        f.block_mut(u).term.retarget(to, e);
        e
    };
    for &u in &back {
        let e = route(f, u, h, "backedge");
        back_edges.push((u, e));
    }
    let mut exit_edges: Vec<(BlockId, BlockId, BlockId)> = Vec::new();
    for &(u, x) in &exit {
        let e = route(f, u, x, "exitedge");
        exit_edges.push((u, x, e));
    }

    let mut phis: Vec<Phi> = Vec::new();
    let live = f.new_value("live", Type::I1);
    let mut incoming: Vec<(BlockId, Value)> = back_edges.iter().map(|(_, e)| (*e, t)).collect();
    incoming.extend(exit_edges.iter().map(|(_, _, e)| (*e, fl)));
    phis.push(Phi { dest: live, incoming });
    let eid = if targets.len() > 1 {
        let v = f.new_value("exit.id", Type::I32);
        let mut incoming: Vec<(BlockId, Value)> = back_edges.iter().map(|(_, e)| (*e, ids[0])).collect();
        for (_, x, e) in &exit_edges {
            let k = targets.iter().position(|t| t == x).unwrap();
            incoming.push((*e, ids[k]));
        }
        phis.push(Phi { dest: v, incoming });
        Some(v)
    } else {
        None
    };

    // Header phis: back-edge values meet in the latch.
    let hphis = f.block(h).phis.clone();
    let mut new_h = Vec::new();
    for mut hp in hphis {
        let name = f.value_name(hp.dest).to_string();
        let m = f.new_value(&name, f.value_type(hp.dest));
        let mut incoming: Vec<(BlockId, Value)> = back_edges
            .iter()
            .map(|(u, e)| (*e, hp.value_from(*u).expect("header phi covers back edge")))
            .collect();
        incoming.extend(exit_edges.iter().map(|(_, _, e)| (*e, hp.dest)));
        phis.push(Phi { dest: m, incoming });
        hp.incoming.retain(|(b, _)| !back.contains(b));
        hp.incoming.push((latch, m));
        new_h.push(hp);
    }
    f.block_mut(h).phis = new_h;

    // Exit dispatch: one block per target, chained on the exit id.
    let mut via: HashMap<BlockId, BlockId> = HashMap::new();
    let first_exit;
    if targets.len() == 1 && owned_exit {
        // Only the loop reaches the target: it serves as the exit block.
        via.insert(targets[0], latch);
        first_exit = targets[0];
    } else if targets.len() == 1 {
        let x = f.new_block_after(latch, "loop.exit");
        f.block_mut(x).term = Terminator::Br(targets[0]);
        via.insert(targets[0], x);
        first_exit = x;
    } else {
        let mut prev = latch;
        let mut blocks = Vec::new();
        for _ in 0..targets.len() - 1 {
            let d = f.new_block_after(prev, "loop.exit");
            blocks.push(d);
            prev = d;
        }
        for (k, &d) in blocks.iter().enumerate() {
            let c = f.new_value("is.exit", Type::I1);
            f.block_mut(d)
                .insts
                .push(Inst::new(Some(c), Op::Icmp(CmpOp::Eq, eid.unwrap(), ids[k])));
            let else_dest = if k + 1 < blocks.len() {
                blocks[k + 1]
            } else {
                targets[k + 1]
            };
            f.block_mut(d).term = Terminator::CondBr {
                cond: c,
                then_dest: targets[k],
                else_dest,
            };
            via.insert(targets[k], d);
        }
        via.insert(*targets.last().unwrap(), *blocks.last().unwrap());
        first_exit = blocks[0];
    }

    // Exit-target phis read their loop-side value through the latch.
    let mut undef: Option<Value> = None;
    for &x in &targets {
        let xphis = f.block(x).phis.clone();
        let mut new_x = Vec::new();
        for mut xp in xphis {
            let name = f.value_name(xp.dest).to_string();
            let m = f.new_value(&name, f.value_type(xp.dest));
            let mut incoming = Vec::new();
            for (u, tx, e) in &exit_edges {
                let v = if *tx == x {
                    xp.value_from(*u).expect("exit phi covers exit edge")
                } else {
                    *undef.get_or_insert_with(|| const_in(f, pre, "undef", 0))
                };
                incoming.push((*e, v));
            }
            for (_, e) in &back_edges {
                let z = *undef.get_or_insert_with(|| const_in(f, pre, "undef", 0));
                incoming.insert(0, (*e, z));
            }
            phis.push(Phi { dest: m, incoming });
            xp.incoming.retain(|(b, _)| !l.contains(*b));
            xp.incoming.push((via[&x], m));
            new_x.push(xp);
        }
        f.block_mut(x).phis = new_x;
    }

    let lb = f.block_mut(latch);
    lb.phis = phis;
    lb.term = Terminator::CondBr {
        cond: live,
        then_dest: h,
        else_dest: first_exit,
    };

    // Loop values used past the loop may no longer dominate their uses.
    let inner: HashSet<BlockId> = l
        .body
        .iter()
        .copied()
        .chain(back_edges.iter().map(|(_, e)| *e))
        .chain(exit_edges.iter().map(|(_, _, e)| *e))
        .chain([latch])
        .collect();
    let mut defined: HashSet<Value> = HashSet::new();
    for b in f.blocks.iter().filter(|b| l.contains(b.id)) {
        defined.extend(b.phis.iter().map(|p| p.dest));
        defined.extend(b.insts.iter().filter_map(|i| i.result));
    }
    let mut escaping: HashSet<Value> = HashSet::new();
    for b in f.blocks.iter().filter(|b| !inner.contains(&b.id)) {
        let mut uses: Vec<Value> = b.phis.iter().flat_map(|p| p.incoming.iter().map(|(_, v)| *v)).collect();
        uses.extend(b.insts.iter().flat_map(|i| i.op.operands()));
        uses.extend(b.term.operands());
        escaping.extend(uses.into_iter().filter(|v| defined.contains(v)));
    }
    rebuild_ssa(f, &escaping);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, print_module, verify_module};

    #[test]
    fn while_loop_with_break_becomes_canonical() {
        let mut m = parse_module(
            "kernel @k(%n: i32, %p: addr) {\nA:\n  %z = const 0\n  %one = const 1\n  br ^H\nH:\n  %i = phi [%z, ^A], [%i2, ^B]\n  %c = icmp slt %i, %n\n  br %c, ^B, ^X\nB:\n  %t = tid\n  %i2 = add %i, %one\n  %d = icmp eq %i2, %t\n  br %d, ^Y, ^H\nX:\n  br ^Y\nY:\n  %r = phi [%i, ^X], [%i2, ^B]\n  store %r, %p\n  ret\n}",
        )
        .unwrap();
        let f = &mut m.functions[0];
        assert_eq!(canonicalize_loops(f), 1);
        assert!(verify_module(&m).is_empty(), "{:?}\n{}", verify_module(&m), print_module(&m));
        let f = &mut m.functions[0];
        let dom = compute_dom_tree(f);
        let forest = build_loop_forest(f, &dom);
        assert!(forest.loops.iter().all(|l| is_canonical_loop(f, l)));
        let once = print_module(&m);
        assert_eq!(canonicalize_loops(&mut m.functions[0]), 0);
        assert_eq!(print_module(&m), once);
    }
}
