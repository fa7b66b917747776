//! Probabilistic fault-tolerance analysis for feed-forward neural networks
//! under independent Bernoulli neuron crashes (stuck-at-0).
//!
//! The crate estimates the output/loss error caused by random neuron
//! crashes, computes analytic bounds on its first moments, derives
//! `(epsilon, delta)` tail certificates, trains networks with a
//! fault-tolerance regularizer, and runs an iterative certification loop
//! that produces a certificate together with a median-replication plan.
//!
//! Module map:
//!
//! - [`math`]: dense matrices, norms, Bernoulli KL divergence
//! - [`rng`]: counter-based splittable random streams
//! - [`network`]: the network model, forward evaluation, crash masks, bounded losses
//! - [`gradients`]: reverse-mode gradients, crash-direction derivatives, Hessian diagnostics
//! - [`injection`]: mask sampling, Monte-Carlo / exact-enumeration moments, tail estimates
//! - [`bounds`]: spectral (b1), absolute-value (b2) and first-order Taylor (b3) bounds
//! - [`guarantees`]: q-factor, Chernoff perturbation tail, Chebyshev certificates, median planning
//! - [`regularizer`]: continuity metrics and the fault-tolerance regularizer
//! - [`trainer`]: deterministic mini-batch SGD with the regularized loss and unscaled dropout
//! - [`certifier`]: the iterative certification loop and replication validation
//! - [`experiments`]: scripted desk-scale experiment protocols
//! - [`data`], [`io`]: datasets, synthetic generators, model/report serialization

pub mod bounds;
pub mod certifier;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fixtures;
pub mod gradients;
pub mod guarantees;
pub mod injection;
pub mod io;
pub mod math;
pub mod network;
pub mod parallel;
pub mod regularizer;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use math::{kl_bernoulli, matrix_norm, Matrix, NormKind};
pub use network::{Activation, CrashMask, Head, Layer, LossKind, LossSpec, Network, Target};
pub use rng::RngStream;
