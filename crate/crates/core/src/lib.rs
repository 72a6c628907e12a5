pub mod autodiff;
pub mod classifier;
pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod harness;
pub mod meta;
pub mod model;
pub mod params;
pub mod train;

pub use error::{Error, Result};
