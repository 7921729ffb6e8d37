pub mod archive;
pub mod autodiff;
pub mod data;
pub mod distill;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod nn;
pub mod predictor;
pub mod remap;
pub mod rng;
pub mod search_space;
pub mod stats;
pub mod task_db;

pub use error::{Error, Result};
