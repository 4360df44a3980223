pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod moe;
pub mod mole;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{MoleError, Result};
