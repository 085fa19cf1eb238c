pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod moa;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod sft;
pub mod train;

pub use error::{Error, Result};
