//! Nonlinear factor analysis for sparse, high-dimensional count data.
//!
//! A Gaussian latent vector is pushed through an MLP to produce multinomial
//! word (or item) probabilities. Three training procedures are provided:
//! amortized updates through an inference network, per-example stochastic
//! variational inference, and a hybrid that refines the inference network's
//! output with a few gradient steps before every generator update.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod math;
pub mod mlp;
pub mod model;
pub mod sparse;
pub mod synthetic;
pub mod train;

pub use encoder::{Encoder, EncoderSpec, VariationalParams};
pub use error::{Error, Result};
pub use math::{Matrix, Rng};
pub use mlp::{Activation, MlpSpec};
pub use model::Generator;
pub use sparse::{Corpus, FeatureStats, SparseVector};
pub use train::{Mode, Nfa, TrainConfig, TrainState};
