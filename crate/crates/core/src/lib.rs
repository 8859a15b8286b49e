//! Log anomaly diagnosis by gated fusion of per-word label statistics into
//! semantic token features.
//!
//! The pipeline has three learned parts:
//!
//! * [`vnet`]: a variational autoencoder that compresses a message's pooled
//!   label-count statistics ([`statfeat`]) into a dense code.
//! * [`snet`]: a token encoder producing a feature map `C` plus an affine
//!   projection `H_C` and its sigmoid confidence.
//! * [`gnet`]: the confidence-banded gate that admits projected statistics
//!   only where the semantic confidence is close to 0.5, followed by global
//!   attention over `C` and a classifier head.
//!
//! [`pipeline`] wires them into training, evaluation, ablation and sweep
//! runs; [`numcore`] is the small autodiff engine underneath.

pub mod corpus;
pub mod error;
pub mod gnet;
pub mod numcore;
pub mod pipeline;
pub mod rng;
pub mod snet;
pub mod statfeat;
pub mod vnet;

pub use error::{Error, Result};
