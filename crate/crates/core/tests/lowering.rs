mod common;

use std::collections::HashSet;

use common::fixture;
use simtforge::diverge::check_nesting;
use simtforge::harness::{compare, default_launch, sized_config};
use simtforge::ir::{parse_module, print_module, Module, Op};
use simtforge::pipeline::{divergence_counts, lower};
use simtforge::sim::{mask_string, run_simt, run_simt_traced, Launch, TraceEvent};
use simtforge::uniformity::UniformFacts;
use simtforge::PipelineConfig;

fn one_warp() -> PipelineConfig {
    PipelineConfig::default().with_warps(1, 4)
}

fn trace(m: &Module, cfg: &PipelineConfig) -> (simtforge::sim::SimResult, Vec<TraceEvent>) {
    let cfg = sized_config(m, cfg);
    let r = lower(m, &cfg).unwrap();
    let launch = default_launch(m, &cfg);
    run_simt_traced(&r.module, &cfg, &launch.args, &launch.memory, Launch::Kernel, &r.facts).unwrap()
}

fn masks_at(events: &[TraceEvent], block: &str) -> Vec<String> {
    events.iter().filter(|e| e.block == block).map(|e| mask_string(e.mask, 4)).collect()
}

#[test]
fn diamond_splits_then_else_and_rejoins() {
    let m = fixture("diamond.vir");
    let (res, ev) = trace(&m, &one_warp());
    let seq: Vec<(String, String)> = ev.iter().map(|e| (e.block.clone(), mask_string(e.mask, 4))).collect();
    let want = [("entry", "1111"), ("a", "0011"), ("m", "0011"), ("b", "1100"), ("m", "1100")];
    assert_eq!(seq, want.map(|(b, m)| (b.to_string(), m.to_string())));
    assert_eq!(res.metrics.splits_executed, 1);
    assert_eq!(res.metrics.joins_executed, 2);
    // The store after the join ran with every lane.
    let c = compare(&m, &one_warp()).unwrap();
    assert!(c.diff.is_match(), "{:?}", c.diff);
}

#[test]
fn loop_masks_shrink_by_trip_count_then_restore() {
    let m = fixture("trip-loop.vir");
    let (res, ev) = trace(&m, &one_warp());
    // Lanes run 0, 1, 2, 3 iterations.
    assert_eq!(masks_at(&ev, "body"), ["1110", "1100", "1000"]);
    assert_eq!(masks_at(&ev, "done"), ["1111"]);
    assert_eq!(res.metrics.preds_executed, 4);
    assert_eq!(res.outcome.memory[..4], [0, 1, 2, 3]);
}

#[test]
fn if_without_else() {
    let m = parse_module(
        "kernel @k(%out: addr) {\nentry:\n  %t = tid\n  %one = const 1\n  %b = and %t, %one\n  \
         %c = icmp eq %b, %one\n  br %c, ^then, ^m\nthen:\n  %p = addr.add %out, %t\n  store %t, %p\n  br ^m\nm:\n  ret\n}\n",
    )
    .unwrap();
    let (res, ev) = trace(&m, &one_warp());
    assert_eq!(masks_at(&ev, "then"), ["1010"]);
    assert_eq!(res.metrics.splits_executed, 1);
    for (w, t) in [(1, 4), (4, 8), (16, 32)] {
        assert!(compare(&m, &PipelineConfig::default().with_warps(w, t)).unwrap().diff.is_match());
    }
}

#[test]
fn nested_diamonds_sharing_a_merge() {
    let m = parse_module(
        "kernel @k(%out: addr) {\nentry:\n  %t = tid\n  %two = const 2\n  %z = const 0\n  %c1 = icmp slt %t, %two\n  \
         br %c1, ^a, ^b\na:\n  %c2 = icmp eq %t, %z\n  br %c2, ^a1, ^a2\na1:\n  %x = const 1\n  br ^m\na2:\n  %y = const 2\n  br ^m\n\
         b:\n  %w = const 3\n  br ^m\nm:\n  %v = phi [%x, ^a1], [%y, ^a2], [%w, ^b]\n  %p = addr.add %out, %t\n  store %v, %p\n  ret\n}\n",
    )
    .unwrap();
    let r = lower(&m, &one_warp()).unwrap();
    let f = &r.module.functions[0];
    assert!(check_nesting(f, &r.facts[&f.name]).is_empty());
    assert_eq!(divergence_counts(&r.module).0, 2);
    let (res, _) = trace(&m, &one_warp());
    assert_eq!(res.metrics.max_ipdom_depth, 2);
    assert_eq!(res.outcome.memory[..4], [1, 2, 3, 3]);
    for (w, t) in [(1, 4), (4, 8), (16, 32)] {
        assert!(compare(&m, &PipelineConfig::default().with_warps(w, t)).unwrap().diff.is_match());
    }
}

#[test]
fn swapping_phis_use_a_temporary() {
    let m = parse_module(
        "kernel @k(%out: addr, %n: i32 uniform) {\nentry:\n  %t = tid\n  %z = const 0\n  %one = const 1\n  br ^h\n\
         h:\n  %a = phi [%t, ^entry], [%b, ^h]\n  %b = phi [%z, ^entry], [%a, ^h]\n  %i = phi [%z, ^entry], [%i2, ^h]\n  \
         %i2 = add %i, %one\n  %c = icmp slt %i2, %n\n  br %c, ^h, ^x\nx:\n  %p = addr.add %out, %t\n  store %a, %p\n  ret\n}\n",
    )
    .unwrap();
    let r = lower(&m, &one_warp()).unwrap();
    assert!(print_module(&r.module).contains("%pc"), "{}", print_module(&r.module));
    // n = 5: the back edge is taken four times, an even number of swaps.
    let c = compare(&m, &one_warp()).unwrap();
    assert!(c.diff.is_match(), "{:?}", c.diff);
    assert_eq!(c.sim.outcome.memory[..4], [0, 1, 2, 3]);
}

#[test]
fn zicond_keeps_selects_branch_free() {
    let m = fixture("ternary.vir");
    let count = |zicond: bool| {
        let mut cfg = one_warp();
        cfg.zicond = zicond;
        let r = lower(&m, &cfg).unwrap();
        let cmovs = r.module.functions[0]
            .blocks
            .iter()
            .flat_map(|b| &b.insts)
            .filter(|i| matches!(i.op, Op::Cmov(..)))
            .count();
        assert!(compare(&m, &cfg).unwrap().diff.is_match());
        (cmovs, divergence_counts(&r.module).0)
    };
    assert_eq!(count(true), (1, 0));
    assert_eq!(count(false), (0, 1));
}

#[test]
fn metrics_json_is_sorted_and_parses() {
    let (res, _) = trace(&fixture("diamond.vir"), &one_warp());
    let text = res.metrics.to_json();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(v["splits_executed"], 1);
    assert_eq!(v["per_opcode"]["split"], 1);
    let eff = v["simd_efficiency"].as_f64().unwrap();
    assert!((eff - res.metrics.simd_efficiency()).abs() < 1e-6 && eff > 0.0 && eff <= 1.0);
}

#[test]
fn raw_launch_spawns_and_widens() {
    let m = fixture("raw-spawn.vir");
    let cfg = PipelineConfig::default().with_warps(2, 4);
    let mut facts = UniformFacts::new();
    facts.insert("main".into(), HashSet::new());
    let r = run_simt(&m, &cfg, &[0], &[0; 8], Launch::Raw, &facts).unwrap();
    assert_eq!(r.outcome.memory[..8], [0, 0, 0, 0, 10, 10, 10, 10]);
}

#[test]
fn simulation_is_deterministic() {
    let m = fixture("cfd-like.vir");
    let cfg = PipelineConfig::default().with_warps(4, 8);
    let a = compare(&m, &cfg).unwrap();
    let b = compare(&m, &cfg).unwrap();
    assert_eq!(a.sim.metrics, b.sim.metrics);
    assert_eq!(a.sim.outcome, b.sim.outcome);
    assert_eq!(print_module(&a.lowered.module), print_module(&b.lowered.module));
}
