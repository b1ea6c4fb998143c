//! Per-timestep learning of noun-token embeddings under the leakage-repair
//! losses, interleaved with null-text inversion.

mod losses;
mod pipeline;
mod thresholds;
mod tokens;

pub use losses::*;
pub use pipeline::*;
pub use thresholds::*;
pub use tokens::*;
