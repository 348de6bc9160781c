//! Over-parametrized convolutional neural network image classifier.
//!
//! `K` small convolutional networks with logistic activations and a global
//! average-pooling layer are evaluated in parallel and combined linearly.
//! All weights are learned by full-batch gradient descent on a ridge
//! penalized empirical L2 risk, and the fitted network is turned into a
//! classifier by thresholding at 1/2.
//!
//! Besides the estimator the crate ships a generator for synthetic data
//! whose a posteriori probability is an average of a patch function over
//! all image patches, Monte-Carlo risk estimators, and audits of the
//! descent and Polyak-Łojasiewicz inequalities along training trajectories.

pub mod error;
pub mod eval;
pub mod gradients;
pub mod io;
pub mod model;
pub mod network;
pub mod rng;
pub mod sum;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use model::{
    derive_theorem1_hyperparams, parameter_count, Constants, Dataset, Gradient, HyperParams, Image, Layout,
    Mode, Sample, Topology, TopologyError, WeightParts, WeightVector,
};
