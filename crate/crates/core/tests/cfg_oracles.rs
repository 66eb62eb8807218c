mod common;

use std::collections::HashSet;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simtforge::cfg::*;
use simtforge::ir::{parse_module, Function};

/// Natural loops by definition: for every edge `n -> h` with `h`
/// dominating `n`, the body is `h` plus everything reaching a latch
/// without passing through `h`.
fn check_loop_bodies(f: &Function) {
    let doms = dom_oracle(f);
    let forest = build_loop_forest(f, &compute_dom_tree(f));
    let mut expected: std::collections::HashMap<_, HashSet<_>> = Default::default();
    for b in &f.blocks {
        let Some(ds) = doms.get(&b.id) else { continue };
        for s in b.successors() {
            if ds.contains(&s) {
                let body = expected.entry(s).or_insert_with(|| HashSet::from([s]));
                if b.id != s {
                    body.extend(reach_without(f, b.id, Some(s), true).into_iter().filter(|x| doms.contains_key(x)));
                }
            }
        }
    }
    assert_eq!(forest.loops.len(), expected.len());
    for l in &forest.loops {
        assert_eq!(l.body, expected[&l.header], "loop at {}", f.label(l.header));
    }
}

fn check_dominance(f: &Function) {
    let d = compute_dom_tree(f);
    let oracle = dom_oracle(f);
    for b in &f.blocks {
        match oracle.get(&b.id) {
            None => assert!(!d.is_reachable(b.id)),
            Some(_) if b.id == f.entry() => assert_eq!(d.idom(b.id), Some(b.id)),
            Some(_) => assert_eq!(d.idom(b.id), immediate(b.id, &oracle), "idom of {}", b.label),
        }
    }
}

fn check_postdominance(f: &Function) {
    let pd = compute_postdom_tree(f).unwrap();
    let oracle = postdom_oracle(f);
    let exit = exit_block(f);
    for (b, _) in &oracle {
        if *b == exit {
            assert_eq!(pd.ipdom(*b), Some(exit));
        } else {
            assert_eq!(pd.ipdom(*b), immediate(*b, &oracle), "ipdom of {}", f.label(*b));
        }
    }
}

/// `b` depends on `a` iff some successor of `a` is post-dominated by `b`
/// and `b` does not strictly post-dominate `a`.
fn check_cdg(f: &Function) {
    let pd = compute_postdom_tree(f).unwrap();
    let g = build_cdg(f, &pd);
    let oracle = postdom_oracle(f);
    for a in &f.blocks {
        if !oracle.contains_key(&a.id) {
            continue;
        }
        let mut want = HashSet::new();
        for s in a.successors() {
            let Some(ps) = oracle.get(&s) else { continue };
            for &b in ps {
                let strictly = b != a.id && oracle[&a.id].contains(&b);
                if !strictly {
                    want.insert(b);
                }
            }
        }
        if a.successors().len() < 2 {
            want.clear();
        }
        let got: HashSet<_> = g.controlled_by(a.id).collect();
        assert_eq!(got, want, "controlled by {}", a.label);
    }
}

#[test]
fn fixtures_match_path_oracles() {
    for name in ["nested-loops.vir", "shared-tail.vir", "nest3.vir", "irreducible.vir"] {
        let m = fixture(name);
        for f in &m.functions {
            check_dominance(f);
            check_postdominance(f);
            check_cdg(f);
        }
    }
}

#[test]
fn corpus_functions_match_path_oracles() {
    for (name, m) in corpus() {
        for f in m.functions.iter().filter(|f| f.blocks.len() <= 12) {
            let exits = f.blocks.iter().filter(|b| matches!(b.term, simtforge::ir::Terminator::Ret(_))).count();
            check_dominance(f);
            if exits == 1 {
                check_postdominance(f);
                check_cdg(f);
            }
            let _ = &name;
        }
    }
}

#[test]
fn self_loop_body_is_just_the_header() {
    let m = parse_module("kernel @k(%c: i1) {\nA:\n  br ^B\nB:\n  br %c, ^B, ^C\nC:\n  ret\n}").unwrap();
    let f = &m.functions[0];
    let forest = build_loop_forest(f, &compute_dom_tree(f));
    assert_eq!(forest.loops[0].body, HashSet::from([f.block_by_label("B").unwrap()]));
    check_loop_bodies(f);
}

#[test]
fn nested_loop_forest() {
    let m = fixture("nested-loops.vir");
    let f = &m.functions[0];
    let lf = build_loop_forest(f, &compute_dom_tree(f));
    assert_eq!(lf.loops.len(), 2);
    let outer = lf.header_of(f.block_by_label("oh").unwrap()).unwrap();
    let inner = lf.header_of(f.block_by_label("ih").unwrap()).unwrap();
    assert!(inner.body.is_subset(&outer.body) && inner.body.len() < outer.body.len());
    assert_eq!(inner.depth, 2);
    assert_eq!(inner.preheader, f.block_by_label("ipre"));
}

#[test]
fn shared_tail_is_multi_controlled_leaf() {
    let m = fixture("shared-tail.vir");
    let f = &m.functions[0];
    let g = build_cdg(f, &compute_postdom_tree(f).unwrap());
    let d = f.block_by_label("D").unwrap();
    assert!(g.pred_count(d) >= 2);
    assert!(g.is_leaf(d));
}

#[test]
fn cdg_depth_is_nesting_depth() {
    let m = fixture("nest3.vir");
    let f = &m.functions[0];
    let g = build_cdg(f, &compute_postdom_tree(f).unwrap());
    assert_eq!(g.depth(), 3);
}

#[test]
fn structured_fixtures_are_reducible() {
    for name in ["nested-loops.vir", "shared-tail.vir", "nest3.vir"] {
        let m = fixture(name);
        let f = &m.functions[0];
        assert!(check_reducible(f, &compute_dom_tree(f)).is_reducible(), "{name}");
    }
    let m = fixture("irreducible.vir");
    let f = &m.functions[0];
    assert!(!check_reducible(f, &compute_dom_tree(f)).is_reducible());
}

fn cfg_strategy() -> impl Strategy<Value = Vec<(bool, usize, usize)>> {
    prop::collection::vec((any::<bool>(), 0usize..12, 0usize..12), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_cfgs_match_oracles(choices in cfg_strategy()) {
        let m = parse_module(&random_cfg_text(&choices)).unwrap();
        let f = &m.functions[0];
        check_dominance(f);
        let reach = reach_without(f, f.entry(), None, false);
        let to_exit = reach_without(f, exit_block(f), None, true);
        if reach.is_subset(&to_exit) && to_exit.len() == f.blocks.len() {
            check_postdominance(f);
            check_cdg(f);
        }
        check_loop_bodies(f);
        let d = compute_dom_tree(f);
        prop_assert_eq!(check_reducible(f, &d).is_reducible(), t1t2_reducible(f));
    }

    #[test]
    fn reducibility_ignores_dfs_order(choices in cfg_strategy(), seed in any::<u64>()) {
        let m = parse_module(&random_cfg_text(&choices)).unwrap();
        let f = &m.functions[0];
        let d = compute_dom_tree(f);
        let base = check_reducible(f, &d).is_reducible();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffled = check_reducible_ordered(f, &d, |_, s| {
            let mut v = s.to_vec();
            v.shuffle(&mut rng);
            v
        });
        prop_assert_eq!(base, shuffled.is_reducible());
    }
}
