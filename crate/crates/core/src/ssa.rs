//! SSA reconstruction after transformations that duplicate definitions.
//!
//! Passes that clone blocks keep the cloned instructions' result ids, so a
//! value ends up defined in several places. [`rebuild_ssa`] places phis at
//! the iterated dominance frontier of those definitions and renames every
//! use to the reaching definition.

use std::collections::{HashMap, HashSet};

use crate::cfg::compute_dom_tree;
use crate::ir::{infer_types, BlockId, Function, Inst, Op, Phi, Value};

/// Values defined more than once (instructions or phis).
pub fn multiply_defined(f: &Function) -> HashSet<Value> {
    f.def_blocks()
        .into_iter()
        .filter(|(_, d)| d.len() > 1)
        .map(|(v, _)| v)
        .collect()
}

/// Restore single assignment for `vars`. The first definition in dominator
/// preorder keeps the original id; paths with no definition read zero.
pub fn rebuild_ssa(f: &mut Function, vars: &HashSet<Value>) {
    if vars.is_empty() || f.blocks.is_empty() {
        return;
    }
    let dom = compute_dom_tree(f);
    let df = dom.frontiers();
    let preds = f.predecessors();

    // Phi placement at the iterated dominance frontier.
    let mut def_blocks: HashMap<Value, Vec<BlockId>> = HashMap::new();
    let mut has_phi_def: HashSet<(BlockId, Value)> = HashSet::new();
    for b in &f.blocks {
        for phi in &b.phis {
            if vars.contains(&phi.dest) {
                def_blocks.entry(phi.dest).or_default().push(b.id);
                has_phi_def.insert((b.id, phi.dest));
            }
        }
        for inst in &b.insts {
            if let Some(r) = inst.result.filter(|r| vars.contains(r)) {
                def_blocks.entry(r).or_default().push(b.id);
            }
        }
    }
    let mut phi_var: HashMap<Value, Value> = HashMap::new();
    let mut sorted_vars: Vec<Value> = vars.iter().copied().collect();
    sorted_vars.sort();
    for var in sorted_vars {
        let mut work: Vec<BlockId> = def_blocks.get(&var).cloned().unwrap_or_default();
        let mut placed: HashSet<BlockId> = HashSet::new();
        while let Some(b) = work.pop() {
            let Some(front) = df.get(&b) else { continue };
            let mut front: Vec<BlockId> = front.iter().copied().collect();
            front.sort();
            for y in front {
                if placed.contains(&y) || has_phi_def.contains(&(y, var)) {
                    continue;
                }
                placed.insert(y);
                let name = f.value_name(var).to_string();
                let dest = f.new_value(&name, f.value_type(var));
                phi_var.insert(dest, var);
                f.block_mut(y).phis.push(Phi {
                    dest,
                    incoming: Vec::new(),
                });
                work.push(y);
            }
        }
    }

    // Renaming in dominator-tree preorder.
    let mut stacks: HashMap<Value, Vec<Value>> = HashMap::new();
    let mut kept: HashSet<Value> = HashSet::new();
    let mut zeros: HashMap<Value, Value> = HashMap::new();
    enum Step {
        Enter(BlockId),
        Exit(Vec<Value>),
    }
    let mut work = vec![Step::Enter(f.entry())];
    while let Some(step) = work.pop() {
        let b = match step {
            Step::Exit(pushed) => {
                for var in pushed {
                    stacks.get_mut(&var).unwrap().pop();
                }
                continue;
            }
            Step::Enter(b) => b,
        };
        let mut pushed = Vec::new();
        let idx = f.index_of(b).unwrap();
        let mut blk = f.blocks[idx].clone();
        let mut fresh_def = |f: &mut Function, var: Value| -> Value {
            if kept.insert(var) {
                var
            } else {
                let name = f.value_name(var).to_string();
                f.new_value(&name, f.value_type(var))
            }
        };
        let mut read = |f: &mut Function, stacks: &HashMap<Value, Vec<Value>>, var: Value| -> Value {
            match stacks.get(&var).and_then(|s| s.last()) {
                Some(v) => *v,
                None => *zeros.entry(var).or_insert_with(|| {
                    let name = format!("{}.undef", f.value_name(var));
                    f.new_value(&name, f.value_type(var))
                }),
            }
        };
        for phi in &mut blk.phis {
            if let Some(var) = phi_var.get(&phi.dest) {
                stacks.entry(*var).or_default().push(phi.dest);
                pushed.push(*var);
            } else if vars.contains(&phi.dest) {
                let var = phi.dest;
                phi.dest = fresh_def(f, var);
                stacks.entry(var).or_default().push(phi.dest);
                pushed.push(var);
            }
        }
        for inst in &mut blk.insts {
            inst.op.for_each_operand_mut(|v| {
                if vars.contains(v) {
                    *v = read(f, &stacks, *v);
                }
            });
            if let Some(var) = inst.result.filter(|r| vars.contains(r)) {
                let nv = fresh_def(f, var);
                inst.result = Some(nv);
                stacks.entry(var).or_default().push(nv);
                pushed.push(var);
            }
        }
        blk.term.for_each_operand_mut(|v| {
            if vars.contains(v) {
                *v = read(f, &stacks, *v);
            }
        });
        let mut succs = blk.successors();
        f.blocks[idx] = blk;
        succs.sort();
        succs.dedup();
        for s in succs {
            let sidx = f.index_of(s).unwrap();
            let mut phis = std::mem::take(&mut f.blocks[sidx].phis);
            for phi in &mut phis {
                if let Some(var) = phi_var.get(&phi.dest).copied() {
                    let v = read(f, &stacks, var);
                    phi.incoming.push((b, v));
                } else {
                    for (p, v) in &mut phi.incoming {
                        if *p == b && vars.contains(v) {
                            *v = read(f, &stacks, *v);
                        }
                    }
                }
            }
            f.blocks[sidx].phis = phis;
        }
        work.push(Step::Exit(pushed));
        for c in dom.children(b).into_iter().rev() {
            work.push(Step::Enter(c));
        }
    }

    // Inserted phis on edges from unreachable predecessors read zero.
    let mut missing: Vec<(BlockId, Value, BlockId)> = Vec::new();
    for b in &f.blocks {
        let bp = preds.get(&b.id).cloned().unwrap_or_default();
        for phi in &b.phis {
            if phi_var.contains_key(&phi.dest) {
                for p in &bp {
                    if phi.value_from(*p).is_none() {
                        missing.push((b.id, phi.dest, *p));
                    }
                }
            }
        }
    }
    for (b, dest, p) in missing {
        let var = phi_var[&dest];
        let z = match zeros.get(&var) {
            Some(z) => *z,
            None => {
                let name = format!("{}.undef", f.value_name(var));
                let z = f.new_value(&name, f.value_type(var));
                zeros.insert(var, z);
                z
            }
        };
        let bp = preds.get(&b).cloned().unwrap_or_default();
        let phi = f.block_mut(b).phis.iter_mut().find(|x| x.dest == dest).unwrap();
        phi.incoming.push((p, z));
        phi.incoming.sort_by_key(|(q, _)| bp.iter().position(|x| x == q));
    }
    if !zeros.is_empty() {
        let mut zs: Vec<Value> = zeros.values().copied().collect();
        zs.sort();
        let entry = f.entry();
        let blk = f.block_mut(entry);
        for (i, z) in zs.into_iter().enumerate() {
            blk.insts.insert(i, Inst::new(Some(z), Op::Const(0)));
        }
    }
    let inserted: HashSet<Value> = phi_var.keys().copied().collect();
    prune_phis(f, &inserted);
    infer_types(f);
}

/// Remove trivial (`phi [x, ..], [x, ..]` or self-referential) and unused
/// phis among `candidates`.
pub fn prune_phis(f: &mut Function, candidates: &HashSet<Value>) {
    let mut live: HashSet<Value> = candidates.clone();
    loop {
        // Trivial phis, resolved in batches.
        let mut replace: HashMap<Value, Value> = HashMap::new();
        for b in &f.blocks {
            for phi in &b.phis {
                if !live.contains(&phi.dest) {
                    continue;
                }
                let resolve = |v: Value| {
                    let mut v = v;
                    while let Some(n) = replace.get(&v) {
                        v = *n;
                    }
                    v
                };
                let mut uniq: Vec<Value> = phi
                    .incoming
                    .iter()
                    .map(|(_, v)| resolve(*v))
                    .filter(|v| *v != phi.dest)
                    .collect();
                uniq.sort();
                uniq.dedup();
                if uniq.len() == 1 && uniq[0] != phi.dest {
                    replace.insert(phi.dest, uniq[0]);
                }
            }
        }
        if replace.is_empty() {
            break;
        }
        let resolve = |v: Value| {
            let mut v = v;
            while let Some(n) = replace.get(&v) {
                v = *n;
            }
            v
        };
        for b in &mut f.blocks {
            b.phis.retain(|p| !replace.contains_key(&p.dest));
            for phi in &mut b.phis {
                for (_, v) in &mut phi.incoming {
                    *v = resolve(*v);
                }
            }
            for inst in &mut b.insts {
                inst.op.for_each_operand_mut(|v| *v = resolve(*v));
            }
            b.term.for_each_operand_mut(|v| *v = resolve(*v));
        }
        live.retain(|v| !replace.contains_key(v));
    }

    // Dead phis: a candidate survives only if a non-candidate reads it,
    // possibly through a chain of phis. Cycles of phis feeding each other
    // are dead.
    let mut phi_args: HashMap<Value, Vec<Value>> = HashMap::new();
    let mut marked: HashSet<Value> = HashSet::new();
    let mut work: Vec<Value> = Vec::new();
    for b in &f.blocks {
        for phi in &b.phis {
            let args: Vec<Value> = phi.incoming.iter().map(|(_, v)| *v).collect();
            if live.contains(&phi.dest) {
                phi_args.insert(phi.dest, args);
            } else {
                work.extend(args);
            }
        }
        for inst in &b.insts {
            work.extend(inst.op.operands());
        }
        work.extend(b.term.operands());
    }
    while let Some(v) = work.pop() {
        if live.contains(&v) && marked.insert(v) {
            work.extend(phi_args.get(&v).into_iter().flatten().copied());
        }
    }
    if marked.len() < live.len() {
        for b in &mut f.blocks {
            b.phis.retain(|p| !live.contains(&p.dest) || marked.contains(&p.dest));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, verify_module, Module, Terminator};

    #[test]
    fn duplicated_definition_gets_phi() {
        let mut m: Module = parse_module(
            "kernel @k(%c: i1) {\nA:\n  br %c, ^B, ^C\nB:\n  %x = const 1\n  br ^D\nC:\n  br ^D\nD:\n  %y = add %x, %x\n  ret\n}",
        )
        .unwrap();
        let f = &mut m.functions[0];
        // Duplicate B's definition into C.
        let b = f.block_by_label("B").unwrap();
        let c = f.block_by_label("C").unwrap();
        let inst = f.block(b).insts[0].clone();
        f.block_mut(c).insts.push(inst);
        let x = f.lookup_value("x").unwrap();
        rebuild_ssa(f, &HashSet::from([x]));
        assert!(verify_module(&m).is_empty(), "{:?}", verify_module(&m));
        let f = &m.functions[0];
        let d = f.block_by_label("D").unwrap();
        assert_eq!(f.block(d).phis.len(), 1);
        assert!(matches!(f.block(d).term, Terminator::Ret(None)));
    }

    #[test]
    fn missing_path_reads_zero() {
        let mut m: Module = parse_module(
            "kernel @k(%c: i1) {\nA:\n  br %c, ^B, ^C\nB:\n  %x = const 1\n  br ^D\nC:\n  br ^D\nD:\n  %y = add %x, %x\n  ret\n}",
        )
        .unwrap();
        let f = &mut m.functions[0];
        let x = f.lookup_value("x").unwrap();
        rebuild_ssa(f, &HashSet::from([x]));
        assert!(verify_module(&m).is_empty(), "{:?}", verify_module(&m));
        let text = crate::ir::print_module(&m);
        assert!(text.contains("const 0"), "{text}");
    }
}
