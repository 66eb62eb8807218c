mod common;

use common::fixture;
use proptest::prelude::*;
use simtforge::diverge::check_nesting;
use simtforge::harness::compare_lowered;
use simtforge::ir::{verify_module, Module};
use simtforge::latephase::{perturb, repair_module, PerturbMode};
use simtforge::pipeline::{lower, PipelineResult};
use simtforge::PipelineConfig;

fn cfg() -> PipelineConfig {
    let mut c = PipelineConfig::default().with_warps(4, 8);
    c.zicond = true;
    c
}

fn designated(mode: PerturbMode) -> Module {
    match mode {
        PerturbMode::InvertBranch | PerturbMode::RematerializePredicate => fixture("diamond.vir"),
        PerturbMode::ExpandSelect => fixture("ternary.vir"),
    }
}

/// True when the lowered module is statically broken or runs differently
/// from the reference.
fn hazardous(m: &Module, l: &PipelineResult) -> bool {
    let static_bad = !verify_module(&l.module).is_empty()
        || l.module.functions.iter().any(|f| {
            let u = l.facts.get(&f.name).cloned().unwrap_or_default();
            !check_nesting(f, &u).is_empty()
        });
    static_bad || compare_lowered(m, l.clone(), &cfg()).map_or(true, |c| !c.diff.is_match())
}

fn matches(m: &Module, l: &PipelineResult) -> bool {
    compare_lowered(m, l.clone(), &cfg()).is_ok_and(|c| c.diff.is_match())
}

#[test]
fn each_mode_breaks_its_fixture_and_repair_fixes_it() {
    for mode in PerturbMode::ALL {
        let m = designated(mode);
        let mut l = lower(&m, &cfg()).unwrap();
        assert!(!hazardous(&m, &l));
        perturb(&mut l.module, mode, 0).unwrap();
        assert!(hazardous(&m, &l), "{} left the module intact", mode.name());
        let rep = repair_module(&mut l.module, &l.facts);
        assert!(rep.changed() && rep.unrepaired.is_empty());
        assert!(!hazardous(&m, &l), "{} not repaired", mode.name());
        assert!(matches(&m, &l));
    }
}

#[test]
fn expected_repair_actions() {
    let run = |mode| {
        let m = designated(mode);
        let mut l = lower(&m, &cfg()).unwrap();
        perturb(&mut l.module, mode, 0).unwrap();
        let r = repair_module(&mut l.module, &l.facts);
        (r.flipped, r.unified, r.synthesized)
    };
    assert_eq!(run(PerturbMode::InvertBranch), (1, 0, 0));
    assert_eq!(run(PerturbMode::RematerializePredicate), (0, 1, 0));
    assert_eq!(run(PerturbMode::ExpandSelect), (0, 0, 1));
}

#[test]
fn repair_is_identity_on_clean_output() {
    for name in ["diamond", "ternary", "cfd-like", "irreducible", "loop-break", "nest3", "nested-loops", "shared-tail", "trip-loop"] {
        let l = lower(&fixture(&format!("{name}.vir")), &cfg()).unwrap();
        let mut m = l.module.clone();
        let rep = repair_module(&mut m, &l.facts);
        assert!(!rep.changed(), "{name}: {rep:?}");
        assert_eq!(m, l.module, "{name}");
    }
}

#[test]
fn no_site_is_an_error() {
    let mut l = lower(&fixture("diamond.vir"), &cfg()).unwrap();
    assert!(perturb(&mut l.module, PerturbMode::ExpandSelect, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn repair_restores_and_is_idempotent(seed in 0u64..1000, which in 0usize..4, mode in 0usize..3) {
        let name = ["diamond", "cfd-like", "nest3", "loop-break"][which];
        let mode = PerturbMode::ALL[mode];
        let m = fixture(&format!("{name}.vir"));
        let mut l = lower(&m, &cfg()).unwrap();
        if perturb(&mut l.module, mode, seed).is_ok() {
            repair_module(&mut l.module, &l.facts);
            prop_assert!(verify_module(&l.module).is_empty());
            let once = l.module.clone();
            prop_assert!(!repair_module(&mut l.module, &l.facts).changed());
            prop_assert_eq!(&once, &l.module);
            prop_assert!(matches(&m, &l));
        }
    }
}
