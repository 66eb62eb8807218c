//! Code and CFG simplification ahead of divergence instrumentation.

mod loops;
mod selects;
mod simplify;
mod structurize;

pub use loops::{canonicalize_loops, is_canonical_loop};
pub use selects::normalize_selects;
pub use simplify::{merge_returns, remove_unreachable, simplify_cfg};
pub use structurize::{structurize, StructurizeError, CLONE_BUDGET};
