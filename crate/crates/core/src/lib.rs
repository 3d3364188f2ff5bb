//! Multirate reactive compressible-flow solver.

pub mod ark;
pub mod chemistry;
pub mod comm;
pub mod context;
pub mod error;
pub mod euler;
pub mod harness;
pub mod mesh;
pub mod mri;
pub mod newton;
pub mod profiling;
pub mod testsuite;
pub mod vectors;

pub use context::TaskContext;
pub use error::{Error, Result};
