pub mod cli;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod patchkit;
pub mod rmsinv;

pub use error::{Error, Result};
