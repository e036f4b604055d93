//! Principal-stratification causal effects from several randomized trials
//! with a binary treatment, a binary surrogate and a binary endpoint.
//!
//! The crate covers closed-form and local identification, maximum
//! likelihood (EM) and Bayesian (Gibbs) estimation, large-sample bounds,
//! goodness-of-fit checks, surrogate evaluation, a hierarchical
//! sensitivity model and a simulation harness.
//!
//! ```
//! use psace::{cell_probabilities, Model, ParameterSet, Stratum};
//!
//! let params = ParameterSet::new(
//!     Model::Monotone,
//!     vec![0.5, 0.5],
//!     vec![0.4, 0.6],
//!     vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.2, 0.7]],
//!     [[0.5, 0.3, 0.1, 0.0], [0.8, 0.7, 0.6, 0.0]],
//! )
//! .unwrap();
//! let probs = cell_probabilities(&params).unwrap();
//! assert!((probs.sum() - 1.0).abs() < 1e-12);
//! assert!((params.ace(Stratum::SS).unwrap() - 0.3).abs() < 1e-12);
//! ```

pub mod bounds;
pub mod cli;
pub mod em;
pub mod error;
pub mod gibbs;
pub mod identification;
pub mod model;
pub mod model_checking;
pub mod rng;
pub mod sensitivity;
pub mod simulation;
pub mod stats;
pub mod surrogate;

pub use error::{Error, Result};
pub use model::{
    cell_probabilities, complete_log_likelihood, observed_distribution, observed_log_likelihood, CellProbabilities,
    CompleteCounts, Model, ObservedCounts, ObservedDistribution, ParameterSet, PsaceSummary, Stratum, TrialCells,
};
pub use rng::RngStream;
