use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value as Json};

use simtforge::fuzz::{fuzz_kernels_with, FuzzOptions};
use simtforge::harness::{compare, default_launch, sized_config, CompareError, LaunchSpec};
use simtforge::ir::{parse_module, print_module, verify_module, Module, Stage, Type};
use simtforge::latephase::{perturb, repair_module, PerturbMode};
use simtforge::pipeline::{lower, pass_log_json, run_pipeline, PipelineError, PASSES};
use simtforge::sim::{run_simt, Launch};
use simtforge::uniformity::{analyze_lowered, analyze_module, dump, FunctionSummary, Summaries, UniformFacts};
use simtforge::PipelineConfig;

/// SIMT divergence lowering and lockstep warp simulation for `.vir` kernels.
#[derive(Parser)]
#[command(name = "simtforge", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    warps: Option<u32>,
    /// Lanes per warp (1..=32).
    #[arg(long)]
    threads: Option<u32>,
    /// Keep selects as cmov.
    #[arg(long)]
    zicond: bool,
    /// Skip CFG reconstruction.
    #[arg(long)]
    no_recon: bool,
    /// Ignore assume_uniform annotations.
    #[arg(long)]
    no_annotations: bool,
    #[arg(long)]
    mem_words: Option<usize>,
    #[arg(long)]
    step_limit: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and verify a module.
    Check { file: PathBuf },
    /// Uniformity analysis: summaries as JSON, or every value with --dump.
    Analyze {
        file: PathBuf,
        #[arg(long)]
        dump: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the pipeline and print the resulting module.
    Lower {
        file: PathBuf,
        #[arg(long)]
        stop_after: Option<String>,
        /// Run late-phase repair on the lowered module.
        #[arg(long)]
        repair: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the per-pass log here instead of stderr.
        #[arg(long)]
        pass_log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Simulate a module (High input is lowered first).
    Run {
        file: PathBuf,
        /// Scalar argument, in parameter order.
        #[arg(long = "arg", allow_hyphen_values = true)]
        args: Vec<i32>,
        /// Buffer for the next address parameter: comma-separated words,
        /// or `zeros:N`.
        #[arg(long = "buf")]
        bufs: Vec<String>,
        #[arg(long, value_enum, default_value_t = LaunchKind::Kernel)]
        launch: LaunchKind,
        /// Write the final contents of the launch buffers, one word per line.
        #[arg(long)]
        mem_dump: Option<PathBuf>,
        /// Write the metrics report as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Lower, simulate and compare against the reference interpreter.
    Compare {
        file: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Apply one late-phase rewrite to the lowered module.
    Perturb {
        file: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Restore split/branch pairing in a lowered module.
    Repair {
        file: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Differential fuzzing with generated kernels.
    Fuzz {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Perturb every lowered kernel before running it.
        #[arg(long, value_enum)]
        perturb: Option<Mode>,
        /// With --perturb, skip the repair step.
        #[arg(long)]
        no_repair: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare two metrics reports.
    MetricsDiff { a: PathBuf, b: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum LaunchKind {
    Kernel,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    InvertBranch,
    RematerializePredicate,
    ExpandSelect,
}

impl From<Mode> for PerturbMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::InvertBranch => PerturbMode::InvertBranch,
            Mode::RematerializePredicate => PerturbMode::RematerializePredicate,
            Mode::ExpandSelect => PerturbMode::ExpandSelect,
        }
    }
}

enum Fail {
    Usage(String),
    Runtime(String),
    Property(String),
    Pass(String),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Usage(_) => 1,
            Fail::Runtime(_) => 2,
            Fail::Property(_) => 3,
            Fail::Pass(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Fail::Usage(m) | Fail::Runtime(m) | Fail::Property(m) | Fail::Pass(m) => m,
        }
    }
}

impl From<PipelineError> for Fail {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::UnknownPass(_) | PipelineError::NotHigh => Fail::Usage(e.to_string()),
            PipelineError::Verify(_) => Fail::Property(e.to_string()),
            PipelineError::Pass { .. } => Fail::Pass(e.to_string()),
        }
    }
}

type Res = Result<(), Fail>;

fn load(path: &Path) -> Result<Module, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| Fail::Usage(format!("{}: {e}", path.display())))?;
    parse_module(&text).map_err(|e| Fail::Usage(format!("{}: {e}", path.display())))
}

fn write_out(path: Option<&Path>, text: &str) -> Res {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Fail::Usage(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn config(a: &ConfigArgs) -> Result<PipelineConfig, Fail> {
    let mut c = PipelineConfig::default();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).map_err(|e| Fail::Usage(format!("{}: {e}", p.display())))?;
        c.apply_file(&text).map_err(|e| Fail::Usage(format!("{}: {e}", p.display())))?;
    }
    if let Some(w) = a.warps {
        c.warp_count = w;
    }
    if let Some(t) = a.threads {
        c.warp_size = t;
    }
    c.zicond |= a.zicond;
    c.recon &= !a.no_recon;
    c.annotations &= !a.no_annotations;
    if let Some(m) = a.mem_words {
        c.mem_words = m;
    }
    if let Some(s) = a.step_limit {
        c.step_limit = s;
    }
    c.validate().map_err(|e| Fail::Usage(e.to_string()))?;
    Ok(c)
}

fn pretty(v: &Json) -> String {
    // serde_json's default map keeps keys sorted.
    serde_json::to_string_pretty(v).unwrap() + "\n"
}

fn cmd_check(file: &Path) -> Res {
    let m = load(file)?;
    let v = verify_module(&m);
    if v.is_empty() {
        println!("ok");
        return Ok(());
    }
    for x in &v {
        println!("{x}");
    }
    Err(Fail::Property(format!("{} violation(s)", v.len())))
}

fn cmd_analyze(file: &Path, show: bool, cfg: &PipelineConfig) -> Res {
    let m = load(file)?;
    if m.stage != Stage::High {
        return Err(Fail::Usage("analyze expects a high-stage module".into()));
    }
    let mu = analyze_module(&m, cfg.annotations);
    if show {
        print!("{}", dump(&m, &mu));
        return Ok(());
    }
    let mut funcs = Map::new();
    for (name, s) in &mu.summaries {
        let letter = |u: simtforge::uniformity::Uniformity| u.letter().to_string();
        funcs.insert(
            name.clone(),
            json!({
                "uarg": s.uarg.iter().map(|u| letter(*u)).collect::<Vec<_>>(),
                "uptr_out": s.uptr_out.iter().map(|u| u.map(letter)).collect::<Vec<_>>(),
                "uret": letter(s.uret),
                "uniform_values": mu.maps[name].uniform_values().len(),
            }),
        );
    }
    print!("{}", pretty(&json!({"functions": funcs, "iterations": mu.iterations})));
    Ok(())
}

fn cmd_lower(
    file: &Path,
    stop_after: Option<&str>,
    repair: bool,
    output: Option<&Path>,
    log_path: Option<&Path>,
    cfg: &PipelineConfig,
) -> Res {
    let m = load(file)?;
    let mut r = run_pipeline(&m, cfg, stop_after)?;
    if repair {
        if r.module.stage != Stage::Lowered {
            return Err(Fail::Usage("--repair needs the full pipeline".into()));
        }
        let rep = repair_module(&mut r.module, &r.facts);
        eprintln!(
            "repair: flipped {} unified {} synthesized {}",
            rep.flipped, rep.unified, rep.synthesized
        );
    }
    let log = pass_log_json(&r.log) + "\n";
    match log_path {
        Some(p) => std::fs::write(p, &log).map_err(|e| Fail::Usage(format!("{}: {e}", p.display())))?,
        None => eprint!("{log}"),
    }
    write_out(output, &print_module(&r.module))
}

/// Lay out `--buf` regions and `--arg` scalars in parameter order.
fn explicit_launch(m: &Module, args: &[i32], bufs: &[String]) -> Result<LaunchSpec, Fail> {
    let k = m.kernel().ok_or_else(|| Fail::Usage("module has no kernel".into()))?;
    let (mut ai, mut bi) = (0, 0);
    let mut spec = LaunchSpec {
        args: Vec::new(),
        memory: Vec::new(),
    };
    for p in &k.params {
        if k.value_type(p.value) == Type::Addr {
            let b = bufs
                .get(bi)
                .ok_or_else(|| Fail::Usage(format!("missing --buf for parameter {}", k.value_name(p.value))))?;
            bi += 1;
            let words: Vec<i32> = if let Some(n) = b.strip_prefix("zeros:") {
                vec![0; n.parse().map_err(|_| Fail::Usage(format!("bad --buf '{b}'")))?]
            } else {
                b.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().map_err(|_| Fail::Usage(format!("bad --buf '{b}'"))))
                    .collect::<Result<_, _>>()?
            };
            spec.args.push(spec.memory.len() as i32);
            spec.memory.extend(words);
        } else {
            let a = args
                .get(ai)
                .ok_or_else(|| Fail::Usage(format!("missing --arg for parameter {}", k.value_name(p.value))))?;
            ai += 1;
            spec.args.push(*a);
        }
    }
    if ai != args.len() || bi != bufs.len() {
        return Err(Fail::Usage("more --arg/--buf values than parameters".into()));
    }
    Ok(spec)
}

fn lowered_facts(m: &Module) -> UniformFacts {
    let summaries: Summaries = m
        .functions
        .iter()
        .map(|f| (f.name.clone(), FunctionSummary::divergent(f)))
        .collect();
    m.functions
        .iter()
        .map(|f| (f.name.clone(), analyze_lowered(f, &summaries).uniform_values()))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    file: &Path,
    args: &[i32],
    bufs: &[String],
    launch: LaunchKind,
    mem_dump: Option<&Path>,
    metrics: Option<&Path>,
    cfg: &PipelineConfig,
) -> Res {
    let m = load(file)?;
    let spec = if args.is_empty() && bufs.is_empty() {
        default_launch(&m, cfg)
    } else {
        explicit_launch(&m, args, bufs)?
    };
    let mut cfg = cfg.clone();
    cfg.mem_words = cfg.mem_words.max(spec.memory.len());
    let (lowered, facts) = match m.stage {
        Stage::High => {
            let r = lower(&m, &cfg)?;
            (r.module, r.facts)
        }
        Stage::Lowered => {
            let f = lowered_facts(&m);
            (m, f)
        }
    };
    let launch = match launch {
        LaunchKind::Kernel => Launch::Kernel,
        LaunchKind::Raw => Launch::Raw,
    };
    let r = run_simt(&lowered, &cfg, &spec.args, &spec.memory, launch, &facts).map_err(|e| Fail::Runtime(e.to_string()))?;
    if let Some(p) = mem_dump {
        let words = &r.outcome.memory[..spec.memory.len().min(r.outcome.memory.len())];
        let text: String = words.iter().map(|w| format!("{w}\n")).collect();
        write_out(Some(p), &text)?;
    }
    if let Some(p) = metrics {
        write_out(Some(p), &(r.metrics.to_json() + "\n"))?;
    }
    let rets: Vec<String> = r
        .outcome
        .rets
        .iter()
        .map(|v| v.map_or("-".to_string(), |x| x.to_string()))
        .collect();
    if rets.iter().any(|r| r != "-") {
        println!("rets: {}", rets.join(" "));
    }
    println!(
        "dyn_instrs {} splits {} joins {} preds {} simd_efficiency {:.6}",
        r.metrics.dyn_instrs,
        r.metrics.splits_executed,
        r.metrics.joins_executed,
        r.metrics.preds_executed,
        r.metrics.simd_efficiency()
    );
    Ok(())
}

fn cmd_compare(file: &Path, cfg: &PipelineConfig) -> Res {
    let m = load(file)?;
    match compare(&m, cfg) {
        Ok(c) if c.diff.is_match() => {
            println!("Match");
            Ok(())
        }
        Ok(c) => {
            println!("{}", c.diff);
            Err(Fail::Property("simulator and reference disagree".into()))
        }
        Err(CompareError::Pipeline(e)) => Err(e.into()),
        Err(e) => Err(Fail::Runtime(e.to_string())),
    }
}

fn lowered_input(file: &Path, cfg: &PipelineConfig) -> Result<Module, Fail> {
    let m = load(file)?;
    Ok(match m.stage {
        Stage::High => lower(&m, cfg)?.module,
        Stage::Lowered => m,
    })
}

fn cmd_perturb(file: &Path, mode: Mode, seed: u64, output: Option<&Path>, cfg: &PipelineConfig) -> Res {
    let mut m = lowered_input(file, cfg)?;
    let site = perturb(&mut m, mode.into(), seed).map_err(|e| Fail::Pass(e.to_string()))?;
    eprintln!("perturbed @{} ^{}", site.func, site.block);
    write_out(output, &print_module(&m))
}

fn cmd_repair(file: &Path, output: Option<&Path>) -> Res {
    let mut m = load(file)?;
    if m.stage != Stage::Lowered {
        return Err(Fail::Usage("repair expects a lowered module".into()));
    }
    let facts = lowered_facts(&m);
    let rep = repair_module(&mut m, &facts);
    eprintln!(
        "repair: flipped {} unified {} synthesized {}",
        rep.flipped, rep.unified, rep.synthesized
    );
    write_out(output, &print_module(&m))?;
    if !rep.unrepaired.is_empty() {
        return Err(Fail::Property(format!("left unrepaired: {}", rep.unrepaired.join(", "))));
    }
    let v = verify_module(&m);
    match v.first() {
        Some(x) => Err(Fail::Property(x.to_string())),
        None => Ok(()),
    }
}

fn cmd_fuzz(seed: u64, count: usize, mode: Option<Mode>, no_repair: bool, output: Option<&Path>, cfg: &PipelineConfig) -> Res {
    let opts = FuzzOptions {
        perturb: mode.map(Into::into),
        repair: !no_repair,
    };
    let r = fuzz_kernels_with(seed, count, cfg, &opts);
    write_out(output, &(r.to_json() + "\n"))?;
    eprintln!("{}/{} match", r.matches(), r.entries.len());
    if r.all_match() {
        Ok(())
    } else {
        Err(Fail::Property(format!("{} kernel(s) failed", r.entries.len() - r.matches())))
    }
}

fn read_json(p: &Path) -> Result<Json, Fail> {
    let text = std::fs::read_to_string(p).map_err(|e| Fail::Usage(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Fail::Usage(format!("{}: {e}", p.display())))
}

fn ratio(a: f64, b: f64) -> String {
    if b == 0.0 {
        if a == 0.0 { "-".into() } else { "inf".into() }
    } else {
        format!("{:.4}", a / b)
    }
}

fn cmd_metrics_diff(a: &Path, b: &Path) -> Res {
    let (ja, jb) = (read_json(a)?, read_json(b)?);
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    let num = |j: &Json, k: &str| j.get(k).and_then(Json::as_f64);
    for key in [
        "dyn_instrs",
        "splits_executed",
        "joins_executed",
        "preds_executed",
        "barriers_hit",
        "max_ipdom_depth",
        "simd_efficiency",
    ] {
        if let (Some(x), Some(y)) = (num(&ja, key), num(&jb, key)) {
            rows.push((key.to_string(), x, y));
        }
    }
    let empty = Map::new();
    let ops = |j: &Json| j.get("per_opcode").and_then(Json::as_object).cloned().unwrap_or_else(|| empty.clone());
    let (oa, ob) = (ops(&ja), ops(&jb));
    let mut keys: Vec<&String> = oa.keys().chain(ob.keys()).collect();
    keys.sort();
    keys.dedup();
    for k in keys {
        let g = |o: &Map<String, Json>| o.get(k).and_then(Json::as_f64).unwrap_or(0.0);
        rows.push((format!("op.{k}"), g(&oa), g(&ob)));
    }
    let (Some(da), Some(db)) = (num(&ja, "dyn_instrs"), num(&jb, "dyn_instrs")) else {
        return Err(Fail::Usage("both reports need dyn_instrs".into()));
    };
    println!("{:<24} {:>14} {:>14} {:>10}", "metric", "a", "b", "a/b");
    for (k, x, y) in rows {
        println!("{k:<24} {x:>14} {y:>14} {:>10}", ratio(x, y));
    }
    println!("reduction factor: {}", ratio(da, db));
    Ok(())
}

fn dispatch(cmd: Cmd) -> Res {
    match cmd {
        Cmd::Check { file } => cmd_check(&file),
        Cmd::Analyze { file, dump, cfg } => cmd_analyze(&file, dump, &config(&cfg)?),
        Cmd::Lower {
            file,
            stop_after,
            repair,
            output,
            pass_log,
            cfg,
        } => {
            if let Some(p) = &stop_after {
                if !PASSES.contains(&p.as_str()) {
                    return Err(Fail::Usage(format!("unknown pass '{p}' (expected one of {})", PASSES.join(", "))));
                }
            }
            cmd_lower(&file, stop_after.as_deref(), repair, output.as_deref(), pass_log.as_deref(), &config(&cfg)?)
        }
        Cmd::Run {
            file,
            args,
            bufs,
            launch,
            mem_dump,
            metrics,
            cfg,
        } => {
            let c = config(&cfg)?;
            cmd_run(&file, &args, &bufs, launch, mem_dump.as_deref(), metrics.as_deref(), &c)
        }
        Cmd::Compare { file, cfg } => {
            let m = load(&file)?;
            let c = sized_config(&m, &config(&cfg)?);
            cmd_compare(&file, &c)
        }
        Cmd::Perturb {
            file,
            mode,
            seed,
            output,
            cfg,
        } => cmd_perturb(&file, mode, seed, output.as_deref(), &config(&cfg)?),
        Cmd::Repair { file, output } => cmd_repair(&file, output.as_deref()),
        Cmd::Fuzz {
            seed,
            count,
            perturb,
            no_repair,
            output,
            cfg,
        } => cmd_fuzz(seed, count, perturb, no_repair, output.as_deref(), &config(&cfg)?),
        Cmd::MetricsDiff { a, b } => cmd_metrics_diff(&a, &b),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
