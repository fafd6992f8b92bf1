pub mod baseline;
pub mod checkpoint;
pub mod corpus;
pub mod correction;
pub mod dsp;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod nn;
pub mod problem;
pub mod training;

pub use error::{Error, Result};
