pub mod cfg;
pub mod config;
pub mod diverge;
pub mod fuzz;
pub mod harness;
pub mod ir;
pub mod latephase;
pub mod normalize;
pub mod oracle;
pub mod pipeline;
pub mod reconstruct;
pub mod runtime;
pub mod sim;
pub mod ssa;
pub mod uniformity;

pub use config::PipelineConfig;
pub use runtime::{Outcome, RuntimeError};
