pub mod error;
pub mod grid;
pub mod models;

pub use error::{Error, Result};
pub mod aem;
pub mod harness;
pub mod linearize;
pub mod metrics;
pub mod pdhg;
pub mod sequence;
