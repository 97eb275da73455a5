pub mod baselines;
pub mod container;
pub mod dae;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod nn;
pub mod synth;
pub mod tagger;
pub mod tags;

pub use error::{Error, Result};
