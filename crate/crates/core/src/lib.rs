//! Robust self-training for semi-supervised text classification under noisy
//! pseudo-labels: positive training on the labeled seed set, evidential
//! filtering of pseudo-labeled data, then negative training on the mixture.

pub mod cli;
pub mod corpus;
pub mod dst;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod featurize;
pub mod losses;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod probes;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use par::Parallelism;
