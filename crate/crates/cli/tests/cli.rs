use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simtforge")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tmp(name: &str) -> String {
    let dir = std::env::temp_dir().join(format!("simtforge-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name).to_string_lossy().into_owned()
}

fn count(text: &str, needle: &str) -> usize {
    text.lines().filter(|l| l.contains(needle)).count()
}

#[test]
fn diamond_lowers_to_one_split_one_join() {
    let o = run(&["lower", &fixture("diamond.vir")]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(count(&text, "= split "), 1);
    assert_eq!(count(&text, "join %"), 1);
    let log: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&o.stderr)).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 10);
}

#[test]
fn disabling_annotations_adds_splits() {
    let with = stdout(&run(&["lower", &fixture("annotated-loop.vir")]));
    let without = stdout(&run(&["lower", &fixture("annotated-loop.vir"), "--no-annotations"]));
    assert!(count(&without, "split") > count(&with, "split"));
}

#[test]
fn stop_after_structurize_is_high_and_verifies() {
    let out = tmp("structured.vir");
    let o = run(&["lower", &fixture("irreducible.vir"), "--stop-after", "structurize", "-o", &out]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!std::fs::read_to_string(&out).unwrap().contains(".stage lowered"));
    assert_eq!(run(&["check", &out]).status.code(), Some(0));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["check", "/nonexistent.vir"]).status.code(), Some(1));
    assert_eq!(run(&["lower", &fixture("diamond.vir"), "--stop-after", "nope"]).status.code(), Some(1));
    assert_eq!(run(&["lower", &fixture("complete8.vir")]).status.code(), Some(4));
    assert_eq!(run(&["run", &fixture("bad-annot.vir"), "--warps", "1", "--threads", "4"]).status.code(), Some(2));
    let p = tmp("inverted.vir");
    let o = run(&["perturb", &fixture("diamond.vir"), "--mode", "invert-branch", "-o", &p]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(run(&["check", &p]).status.code(), Some(3));
    assert_eq!(run(&["compare", &fixture("cfd-like.vir"), "--warps", "4", "--threads", "8"]).status.code(), Some(0));
}

#[test]
fn perturb_then_repair_round_trip() {
    let (p, r) = (tmp("p.vir"), tmp("r.vir"));
    run(&["perturb", &fixture("diamond.vir"), "--mode", "invert-branch", "--warps", "1", "--threads", "4", "-o", &p]);
    let broken = stdout(&run(&["run", &p, "--warps", "1", "--threads", "4", "--buf", "zeros:4", "--mem-dump", &tmp("m0")]));
    assert!(broken.contains("dyn_instrs"));
    assert_eq!(std::fs::read_to_string(tmp("m0")).unwrap(), "10\n10\n10\n10\n");
    assert_eq!(run(&["repair", &p, "-o", &r]).status.code(), Some(0));
    run(&["run", &r, "--warps", "1", "--threads", "4", "--buf", "zeros:4", "--mem-dump", &tmp("m1")]);
    assert_eq!(std::fs::read_to_string(tmp("m1")).unwrap(), "10\n10\n20\n20\n");
}

#[test]
fn fuzz_report_is_byte_identical() {
    let a = run(&["fuzz", "--seed", "3", "--count", "12", "--warps", "2", "--threads", "4"]);
    let b = run(&["fuzz", "--seed", "3", "--count", "12", "--warps", "2", "--threads", "4"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["matches"], 12);
}

#[test]
fn flags_override_config_file() {
    let cfg = tmp("c.cfg");
    std::fs::write(&cfg, "# launch shape\nwarps = 2\nthreads = 4\n").unwrap();
    let words = |extra: &[&str]| {
        let dump = tmp(&format!("dump{}", extra.len()));
        let t = fixture("ternary.vir");
        let mut args = vec!["run", t.as_str(), "--config", &cfg, "--mem-dump", &dump];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(&dump).unwrap().lines().count()
    };
    // Two buffers of 4 words per thread plus 16 each.
    assert_eq!(words(&[]), 2 * (4 * 8 + 16));
    assert_eq!(words(&["--threads", "8"]), 2 * (4 * 16 + 16));
}

#[test]
fn metrics_diff_reports_reduction_factor() {
    let (a, b) = (tmp("a.json"), tmp("b.json"));
    let t = fixture("ternary.vir");
    run(&["run", &t, "--warps", "1", "--threads", "4", "--metrics", &a]);
    run(&["run", &t, "--warps", "1", "--threads", "4", "--zicond", "--metrics", &b]);
    let o = run(&["metrics-diff", &a, &b]);
    assert_eq!(o.status.code(), Some(0));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let factor: f64 = last.strip_prefix("reduction factor: ").unwrap().parse().unwrap();
    assert!(factor > 1.0);
    assert_eq!(last.split('.').nth(1).unwrap().len(), 4);
}
