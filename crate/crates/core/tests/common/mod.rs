#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use simtforge::ir::{parse_module, BlockId, Function, Module, Terminator};

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> Module {
    load(&crate_dir().join("fixtures").join(name))
}

pub fn load(path: &Path) -> Module {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_module(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every `.vir` file in the bundled corpus, sorted by name.
pub fn corpus() -> Vec<(String, Module)> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(crate_dir().join("corpus"))
        .map(|d| d.filter_map(|e| e.ok()).map(|e| e.path()).collect())
        .unwrap_or_default();
    entries.retain(|p| p.extension().is_some_and(|x| x == "vir"));
    entries.sort();
    entries
        .into_iter()
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), load(&p)))
        .collect()
}

/// A random CFG as `.vir` text: block `i` either branches to one or two
/// blocks chosen from `choices`, the last block returns.
pub fn random_cfg_text(choices: &[(bool, usize, usize)]) -> String {
    let n = choices.len() + 1;
    let mut s = String::from("kernel @r(%c: i1) {\n");
    for (i, (cond, a, b)) in choices.iter().enumerate() {
        s.push_str(&format!("b{i}:\n"));
        let (a, b) = (a % n, b % n);
        let a = if a == 0 { 1 } else { a };
        let b = if b == 0 { n - 1 } else { b };
        if *cond {
            s.push_str(&format!("  br %c, ^b{a}, ^b{b}\n"));
        } else {
            s.push_str(&format!("  br ^b{a}\n"));
        }
    }
    s.push_str(&format!("b{}:\n  ret\n}}\n", n - 1));
    s
}

pub fn succ_map(f: &Function) -> HashMap<BlockId, Vec<BlockId>> {
    f.blocks.iter().map(|b| (b.id, b.successors())).collect()
}

/// Blocks reachable from `from` when `removed` is deleted from the graph.
pub fn reach_without(f: &Function, from: BlockId, removed: Option<BlockId>, reverse: bool) -> HashSet<BlockId> {
    let mut adj: HashMap<BlockId, Vec<BlockId>> = HashMap::new();
    for b in &f.blocks {
        for s in b.successors() {
            if reverse {
                adj.entry(s).or_default().push(b.id);
            } else {
                adj.entry(b.id).or_default().push(s);
            }
        }
    }
    let mut seen = HashSet::new();
    if Some(from) == removed {
        return seen;
    }
    let mut stack = vec![from];
    while let Some(x) = stack.pop() {
        if !seen.insert(x) {
            continue;
        }
        for y in adj.get(&x).into_iter().flatten() {
            if Some(*y) != removed {
                stack.push(*y);
            }
        }
    }
    seen
}

/// `a` dominates `b` iff deleting `a` disconnects `b` from the entry.
pub fn dom_oracle(f: &Function) -> HashMap<BlockId, HashSet<BlockId>> {
    let entry = f.entry();
    let reachable = reach_without(f, entry, None, false);
    let mut doms: HashMap<BlockId, HashSet<BlockId>> = HashMap::new();
    for &b in &reachable {
        let mut set = HashSet::new();
        for &a in &reachable {
            if a == b || !reach_without(f, entry, Some(a), false).contains(&b) {
                set.insert(a);
            }
        }
        doms.insert(b, set);
    }
    doms
}

pub fn exit_block(f: &Function) -> BlockId {
    f.blocks
        .iter()
        .find(|b| matches!(b.term, Terminator::Ret(_)))
        .unwrap()
        .id
}

/// `a` post-dominates `b` iff deleting `a` disconnects `b` from the exit.
/// Only blocks that can reach the exit are keys.
pub fn postdom_oracle(f: &Function) -> HashMap<BlockId, HashSet<BlockId>> {
    let exit = exit_block(f);
    let reaches = reach_without(f, exit, None, true);
    let mut pdoms = HashMap::new();
    for &b in &reaches {
        let mut set = HashSet::new();
        for &a in &reaches {
            if a == b || !reach_without(f, exit, Some(a), true).contains(&b) {
                set.insert(a);
            }
        }
        pdoms.insert(b, set);
    }
    pdoms
}

/// The immediate element of a (post-)dominator set: the strict dominator
/// dominated by all other strict dominators.
pub fn immediate(b: BlockId, sets: &HashMap<BlockId, HashSet<BlockId>>) -> Option<BlockId> {
    let strict: Vec<BlockId> = sets[&b].iter().copied().filter(|a| *a != b).collect();
    strict
        .iter()
        .copied()
        .find(|d| strict.iter().all(|o| sets[d].contains(o)))
}

/// Reducibility by T1/T2 graph reduction on the reachable subgraph.
pub fn t1t2_reducible(f: &Function) -> bool {
    let reachable = reach_without(f, f.entry(), None, false);
    let mut succ: HashMap<BlockId, HashSet<BlockId>> = HashMap::new();
    let mut pred: HashMap<BlockId, HashSet<BlockId>> = HashMap::new();
    for b in &f.blocks {
        if !reachable.contains(&b.id) {
            continue;
        }
        succ.entry(b.id).or_default();
        pred.entry(b.id).or_default();
        for s in b.successors() {
            succ.entry(b.id).or_default().insert(s);
            pred.entry(s).or_default().insert(b.id);
        }
    }
    let entry = f.entry();
    loop {
        let mut changed = false;
        // T1: drop self loops.
        for (n, ss) in succ.iter_mut() {
            if ss.remove(n) {
                pred.get_mut(n).unwrap().remove(n);
                changed = true;
            }
        }
        // T2: fold a node with a unique predecessor into it.
        let cand = succ
            .keys()
            .copied()
            .filter(|n| *n != entry && pred[n].len() == 1)
            .min();
        if let Some(n) = cand {
            let p = *pred[&n].iter().next().unwrap();
            let ns = succ.remove(&n).unwrap();
            pred.remove(&n);
            succ.get_mut(&p).unwrap().remove(&n);
            for s in ns {
                let ps = pred.get_mut(&s).unwrap();
                ps.remove(&n);
                ps.insert(p);
                succ.get_mut(&p).unwrap().insert(s);
            }
            changed = true;
        }
        if !changed {
            break;
        }
    }
    succ.len() == 1
}

/// Like [`random_cfg_text`], but runnable: every block bumps a per-thread
/// step counter at `%cnt[tid]` and folds its index into a path hash at
/// `%acc[tid]`. Conditional branches test a hash bit; any block leaves for
/// the exit once the counter reaches 40.
pub fn random_kernel_text(choices: &[(bool, usize, usize)]) -> String {
    let n = choices.len() + 1;
    let mut s = String::from("kernel @r(%cnt: addr, %acc: addr) {\n");
    for (i, (cond, a, b)) in choices.iter().enumerate() {
        let (a, b) = (a % n, b % n);
        let a = if a == 0 { 1 } else { a };
        let b = if b == 0 { n - 1 } else { b };
        s.push_str(&format!(
            "b{i}:\n  %t{i} = tid\n  %p{i} = addr.add %cnt, %t{i}\n  %q{i} = addr.add %acc, %t{i}\n  \
             %c{i} = load %p{i}\n  %o{i} = const 1\n  %c{i}n = add %c{i}, %o{i}\n  store %c{i}n, %p{i}\n  \
             %a{i} = load %q{i}\n  %k{i} = const 31\n  %m{i} = mul %a{i}, %k{i}\n  %i{i} = const {i}\n  \
             %a{i}n = add %m{i}, %i{i}\n  store %a{i}n, %q{i}\n  %l{i} = const 40\n  %s{i} = icmp slt %c{i}n, %l{i}\n"
        ));
        if *cond {
            s.push_str(&format!(
                "  br %s{i}, ^b{i}.go, ^b{last}\nb{i}.go:\n  %x{i} = add %a{i}n, %t{i}\n  %y{i} = shr %x{i}, %o{i}\n  \
                 %h{i} = and %y{i}, %o{i}\n  br %h{i}, ^b{a}, ^b{b}\n",
                last = n - 1
            ));
        } else {
            s.push_str(&format!("  br %s{i}, ^b{a}, ^b{}\n", n - 1));
        }
    }
    s.push_str(&format!("b{}:\n  ret\n}}\n", n - 1));
    s
}

/// Run under the reference interpreter with 2 warps of 4 threads.
pub fn oracle_run(m: &Module, args: &[i32]) -> simtforge::Outcome {
    let cfg = simtforge::PipelineConfig::default().with_warps(2, 4);
    simtforge::oracle::run_oracle(m, &cfg, args, &[]).unwrap_or_else(|e| panic!("oracle: {e}"))
}
