use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::cfg::{check_reducible, compute_dom_tree, Cfg};
use crate::ir::{BlockId, Function};
use crate::ssa::rebuild_ssa;

/// Most blocks node splitting may clone before giving up.
pub const CLONE_BUDGET: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StructurizeError {
    #[error("function @{func}: node splitting exceeded the budget of {budget} cloned blocks")]
    Budget { func: String, budget: usize },
}

/// Strongly connected components of `nodes` (Tarjan), each a sorted list.
fn sccs(cfg: &Cfg, nodes: &HashSet<usize>) -> Vec<Vec<usize>> {
    struct St<'a> {
        cfg: &'a Cfg,
        nodes: &'a HashSet<usize>,
        index: HashMap<usize, usize>,
        low: HashMap<usize, usize>,
        stack: Vec<usize>,
        on: HashSet<usize>,
        out: Vec<Vec<usize>>,
    }
    fn visit(s: &mut St, v: usize) {
        let i = s.index.len();
        s.index.insert(v, i);
        s.low.insert(v, i);
        s.stack.push(v);
        s.on.insert(v);
        for &w in &s.cfg.succs[v] {
            if !s.nodes.contains(&w) {
                continue;
            }
            if !s.index.contains_key(&w) {
                visit(s, w);
                let lw = s.low[&w];
                let lv = s.low.get_mut(&v).unwrap();
                *lv = (*lv).min(lw);
            } else if s.on.contains(&w) {
                let iw = s.index[&w];
                let lv = s.low.get_mut(&v).unwrap();
                *lv = (*lv).min(iw);
            }
        }
        if s.low[&v] == s.index[&v] {
            let mut comp = Vec::new();
            loop {
                let w = s.stack.pop().unwrap();
                s.on.remove(&w);
                comp.push(w);
                if w == v {
                    break;
                }
            }
            comp.sort();
            s.out.push(comp);
        }
    }
    let mut st = St {
        cfg,
        nodes,
        index: HashMap::new(),
        low: HashMap::new(),
        stack: Vec::new(),
        on: HashSet::new(),
        out: Vec::new(),
    };
    let mut sorted: Vec<usize> = nodes.iter().copied().collect();
    sorted.sort();
    for v in sorted {
        if !st.index.contains_key(&v) {
            visit(&mut st, v);
        }
    }
    st.out
}

/// Find a cycle with more than one entry, searching inside single-entry
/// cycles with their header removed. Returns the cycle and its entries.
fn multi_entry_cycle(cfg: &Cfg, nodes: &HashSet<usize>) -> Option<(HashSet<usize>, Vec<usize>)> {
    for comp in sccs(cfg, nodes) {
        let cyclic = comp.len() > 1 || cfg.succs[comp[0]].contains(&comp[0]);
        if !cyclic {
            continue;
        }
        let set: HashSet<usize> = comp.iter().copied().collect();
        let entries: Vec<usize> = comp
            .iter()
            .copied()
            .filter(|b| *b == 0 || cfg.preds[*b].iter().any(|p| !set.contains(p)))
            .collect();
        if entries.len() > 1 {
            return Some((set, entries));
        }
        let mut inner = set.clone();
        inner.remove(&entries[0]);
        if let Some(found) = multi_entry_cycle(cfg, &inner) {
            return Some(found);
        }
    }
    None
}

/// Make the CFG reducible by node splitting: the cycle entry earliest in
/// reverse postorder is cloned once per predecessor outside the cycle.
/// Returns the number of blocks cloned.
pub fn structurize(f: &mut Function) -> Result<usize, StructurizeError> {
    let mut cloned = 0;
    loop {
        let dom = compute_dom_tree(f);
        if check_reducible(f, &dom).is_reducible() {
            return Ok(cloned);
        }
        let cfg = Cfg::new(f);
        let reach = cfg.reachable();
        let nodes: HashSet<usize> = (0..cfg.len()).filter(|i| reach[*i]).collect();
        let Some((cycle, entries)) = multi_entry_cycle(&cfg, &nodes) else {
            return Ok(cloned);
        };
        let e = *entries
            .iter()
            .min_by_key(|b| dom.rpo_number(cfg.id(**b)))
            .unwrap();
        let outside: Vec<BlockId> = {
            let mut v: Vec<BlockId> = cfg.preds[e]
                .iter()
                .filter(|p| !cycle.contains(p) && reach[**p])
                .map(|p| cfg.id(*p))
                .collect();
            v.dedup();
            v
        };
        if cloned + outside.len() > CLONE_BUDGET {
            return Err(StructurizeError::Budget {
                func: f.name.clone(),
                budget: CLONE_BUDGET,
            });
        }
        let orig = cfg.id(e);
        let mut dup: HashSet<_> = HashSet::new();
        for p in outside {
            let src = f.block(orig).clone();
            dup.extend(src.phis.iter().map(|x| x.dest));
            dup.extend(src.insts.iter().filter_map(|i| i.result));
            let label = src.label.clone();
            let c = f.new_block_after(orig, &label);
            {
                let cb = f.block_mut(c);
                cb.phis = src.phis.clone();
                for phi in &mut cb.phis {
                    phi.incoming.retain(|(b, _)| *b == p);
                }
                cb.insts = src.insts.clone();
                cb.term = src.term.clone();
            }
            for phi in &mut f.block_mut(orig).phis {
                phi.incoming.retain(|(b, _)| *b != p);
            }
            f.block_mut(p).term.retarget(orig, c);
            let mut succs = src.term.successors();
            succs.dedup();
            for s in succs {
                for phi in &mut f.block_mut(s).phis {
                    if let Some(v) = phi.value_from(orig) {
                        phi.incoming.push((c, v));
                    }
                }
            }
            cloned += 1;
        }
        rebuild_ssa(f, &dup);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, verify_module};

    #[test]
    fn two_entry_cycle_needs_one_clone() {
        let mut m = parse_module(
            "kernel @k(%c: i1, %d: i1) {\nA:\n  br %c, ^B, ^C\nB:\n  br %d, ^C, ^X\nC:\n  br %d, ^B, ^X\nX:\n  ret\n}",
        )
        .unwrap();
        assert_eq!(structurize(&mut m.functions[0]), Ok(1));
        assert!(verify_module(&m).is_empty());
        let f = &m.functions[0];
        assert!(check_reducible(f, &compute_dom_tree(f)).is_reducible());
    }
}
