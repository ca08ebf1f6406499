//! Prior-fitted networks for node classification.
//!
//! The crate samples synthetic attributed graphs from structural-causal and
//! block-model priors, pre-trains a dual-branch attention + message-passing
//! network to approximate the posterior predictive distribution over node
//! labels, and predicts on new graphs in a single forward pass.

pub mod numerics;
pub mod graph;
pub mod linalg;
pub mod rng;
pub mod prior;
pub mod inference;
pub mod model;
pub mod training;
pub mod io;
pub mod baselines;
pub mod harness;
