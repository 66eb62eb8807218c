//! Launch conventions and the oracle-vs-simulator comparison used by the
//! corpus runner, the fuzzer and the CLI.
//!
//! Every `addr` parameter gets its own memory region (in parameter order,
//! starting at word 0), every other parameter gets `5 + 2·k` for the k-th
//! such parameter, and memory starts with seeded values in `0..64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::ir::{Module, Type};
use crate::oracle::{diff_outcomes, run_oracle, Diff};
use crate::pipeline::{lower, PipelineError, PipelineResult};
use crate::runtime::{Outcome, RuntimeError};
use crate::sim::{run_simt, Launch, SimResult};

pub const MEMORY_SEED: u64 = 0x5eed;

/// Words per thread in each buffer region.
pub const REGION_WORDS_PER_THREAD: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LaunchSpec {
    pub args: Vec<i32>,
    pub memory: Vec<i32>,
}

pub fn region_words(cfg: &PipelineConfig) -> usize {
    REGION_WORDS_PER_THREAD * cfg.total_threads() + 16
}

/// Arguments and initial memory for the module's kernel.
pub fn default_launch(m: &Module, cfg: &PipelineConfig) -> LaunchSpec {
    let region = region_words(cfg);
    let mut args = Vec::new();
    let (mut bufs, mut scalars) = (0, 0);
    if let Some(k) = m.kernel() {
        for p in &k.params {
            if k.value_type(p.value) == Type::Addr {
                args.push((bufs * region) as i32);
                bufs += 1;
            } else {
                args.push(5 + 2 * scalars);
                scalars += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(MEMORY_SEED);
    let memory = (0..bufs as usize * region).map(|_| rng.gen_range(0..64)).collect();
    LaunchSpec { args, memory }
}

/// Configuration with enough memory for the module's default launch.
pub fn sized_config(m: &Module, cfg: &PipelineConfig) -> PipelineConfig {
    let mut c = cfg.clone();
    c.mem_words = c.mem_words.max(default_launch(m, cfg).memory.len());
    c
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("reference interpreter: {0}")]
    Oracle(RuntimeError),
    #[error("simulator: {0}")]
    Sim(RuntimeError),
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub diff: Diff,
    pub oracle: Outcome,
    pub sim: SimResult,
    pub lowered: PipelineResult,
}

/// Lower `m`, run both interpreters under the default launch and compare.
pub fn compare(m: &Module, cfg: &PipelineConfig) -> Result<Comparison, CompareError> {
    let lowered = lower(m, cfg)?;
    compare_lowered(m, lowered, cfg)
}

/// Compare an already lowered (possibly perturbed) module against the
/// oracle on the original.
pub fn compare_lowered(m: &Module, lowered: PipelineResult, cfg: &PipelineConfig) -> Result<Comparison, CompareError> {
    let cfg = sized_config(m, cfg);
    let launch = default_launch(m, &cfg);
    let oracle = run_oracle(m, &cfg, &launch.args, &launch.memory).map_err(CompareError::Oracle)?;
    let sim = run_simt(
        &lowered.module,
        &cfg,
        &launch.args,
        &launch.memory,
        Launch::Kernel,
        &lowered.facts,
    )
    .map_err(CompareError::Sim)?;
    Ok(Comparison {
        diff: diff_outcomes(&oracle, &sim.outcome),
        oracle,
        sim,
        lowered,
    })
}
