pub mod ama;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod mcl;
pub mod nn;
pub mod numerics;
pub mod paf;
pub mod trainer;

pub use error::{Error, Result};
