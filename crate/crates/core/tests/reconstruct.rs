mod common;

use common::*;
use simtforge::cfg::{build_cdg, build_loop_forest, compute_dom_tree, compute_postdom_tree};
use simtforge::ir::{parse_module, print_module, verify_module, Module};
use simtforge::normalize::simplify_cfg;
use simtforge::oracle::diff_outcomes;
use simtforge::reconstruct::{reconstruct_cfg, ReconReport};
use simtforge::uniformity::analyze_module;

fn recon(m: &mut Module) -> ReconReport {
    for f in &mut m.functions {
        simplify_cfg(f);
    }
    let mu = analyze_module(m, true);
    let f = &mut m.functions[0];
    let u = mu.map(&f.name).clone();
    let pd = compute_postdom_tree(f).unwrap();
    let cdg = build_cdg(f, &pd);
    let lf = build_loop_forest(f, &compute_dom_tree(f));
    reconstruct_cfg(f, &u, &cdg, &lf)
}

fn expectation(name: &str) -> Vec<(String, String)> {
    let text = std::fs::read_to_string(crate_dir().join("fixtures").join(name)).unwrap();
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#') && l.contains('='))
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.trim().to_string(), v.trim().to_string())
        })
        .collect()
}

#[test]
fn shared_divergent_leaf_is_duplicated() {
    let orig = fixture("shared-tail.vir");
    let mut m = orig.clone();
    let before = m.functions[0].blocks.len();
    let r = recon(&mut m);
    assert_eq!(r.duplicated, vec!["D".to_string()]);
    assert_eq!(r.clones, 1);
    assert!(verify_module(&m).is_empty(), "{}", print_module(&m));
    let f = &m.functions[0];
    assert_eq!(f.blocks.len(), before + 1);
    // Each copy now depends on exactly one condition.
    let cdg = build_cdg(f, &compute_postdom_tree(f).unwrap());
    let copies: Vec<_> = f.blocks.iter().filter(|b| b.label.starts_with('D')).collect();
    assert_eq!(copies.len(), 2);
    for c in copies {
        assert_eq!(cdg.pred_count(c.id), 1, "{}", c.label);
    }
    assert!(diff_outcomes(&oracle_run(&orig, &[0]), &oracle_run(&m, &[0])).is_match());
}

#[test]
fn uniform_conditions_skip_duplication() {
    let text = std::fs::read_to_string(crate_dir().join("fixtures/shared-tail.vir"))
        .unwrap()
        .replace("kernel @shared(%out: addr)", "kernel @shared(%out: addr, %u: i32 uniform)")
        .replace("%t = tid", "%t = add %u, %u");
    let mut m = parse_module(&text).unwrap();
    let before = m.functions[0].blocks.len();
    let r = recon(&mut m);
    assert_eq!(r, ReconReport::default());
    assert_eq!(m.functions[0].blocks.len(), before);
}

#[test]
fn straight_line_is_identity() {
    let src = "kernel @k(%p: addr) {\nA:\n  %t = tid\n  store %t, %p\n  ret\n}\n";
    let mut m = parse_module(src).unwrap();
    recon(&mut m);
    assert_eq!(print_module(&m), print_module(&parse_module(src).unwrap()));
}

#[test]
fn cfd_like_matches_hand_derived_growth() {
    let orig = fixture("cfd-like.vir");
    let mut m = orig.clone();
    let before = m.functions[0].blocks.len();
    let r = recon(&mut m);
    assert!(verify_module(&m).is_empty());
    for (k, v) in expectation("cfd-like.expect") {
        match k.as_str() {
            "duplicated" => assert_eq!(r.duplicated.join(","), v),
            "block_growth" => assert_eq!(m.functions[0].blocks.len() - before, v.parse::<usize>().unwrap()),
            other => panic!("unknown key {other}"),
        }
    }
    // Identical per-thread results for a few neighbour bounds.
    for n in [0, 3, 6, 9] {
        let args = [n, 0, 64];
        let init: Vec<i32> = (0..16).map(|i| i * 7 + 3).collect();
        let cfg = simtforge::PipelineConfig::default().with_warps(2, 4);
        let a = simtforge::oracle::run_oracle(&orig, &cfg, &args, &init).unwrap();
        let b = simtforge::oracle::run_oracle(&m, &cfg, &args, &init).unwrap();
        assert!(diff_outcomes(&a, &b).is_match());
    }
}
