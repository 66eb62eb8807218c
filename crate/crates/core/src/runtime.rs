//! Types shared by the reference interpreter and the lockstep simulator.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("out-of-bounds memory access at word {addr} (memory has {size} words)")]
    OutOfBounds { addr: i64, size: usize },
    #[error("udiv by zero in @{func}")]
    DivideByZero { func: String },
    #[error("join token {got} does not match stack depth {depth} in warp {warp}")]
    JoinTokenMismatch { warp: u32, got: i64, depth: usize },
    #[error("join on empty stack in warp {warp}")]
    JoinEmptyStack { warp: u32 },
    #[error("barrier waits for {wanted} warps but only {available} exist")]
    BarrierCount { wanted: u32, available: u32 },
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("uniformity violation: %{value} in @{func} differs across active lanes of warp {warp}")]
    UniformityViolation { func: String, value: String, warp: u32 },
    #[error("lanes of warp {warp} disagree on an unconditioned branch in @{func} ^{block}")]
    UncontrolledDivergence { func: String, block: String, warp: u32 },
    #[error("divergence invariant violated: {0}")]
    Invariant(String),
    #[error("deadlock: barrier can never release")]
    Deadlock,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("bad launch: {0}")]
    BadLaunch(String),
}

impl RuntimeError {
    pub fn is_uniformity(&self) -> bool {
        matches!(self, RuntimeError::UniformityViolation { .. })
    }
}

/// Observable result of a run: final memory and each thread's kernel
/// return value (`None` for `ret` without operand).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Outcome {
    pub memory: Vec<i32>,
    pub rets: Vec<Option<i32>>,
}
