pub mod augment;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod harness;
pub mod ingest;
pub mod synth;
pub mod model;
pub mod train;
pub mod windowing;

pub use error::{Error, Result};
