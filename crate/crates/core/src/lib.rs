//! Distributed estimation of Brown-Resnick max-stable process models by
//! censored pairwise composite likelihood on disjoint spatial blocks, with a
//! closed-form GMM meta-estimator for combining the block fits.

pub mod ad;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod extremes;
pub mod gmm;
pub mod local_fit;
pub mod model;
pub mod optim;
pub mod partition;
pub mod pipeline;
pub mod simulate;
pub mod stats;
pub mod svc;
pub mod workflow;

pub use error::{Error, Result};
