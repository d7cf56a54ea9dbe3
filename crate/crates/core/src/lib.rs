//! Directionality-aware mixture models (DAMM) and stable linear
//! parameter-varying dynamical systems (LPV-DS) learned from demonstrations.
//!
//! The pipeline: [`damm::build_observations`] turns a [`Demonstration`] into
//! position/direction pairs, [`sampler::run`] clusters them with a parallel
//! split/merge Gibbs sampler, and [`lpvds::fit`] fits one stable linear
//! system per cluster. [`eval`] holds metrics, I/O and benchmarks.

pub mod damm;
pub mod error;
pub mod eval;
pub mod lpvds;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod sphere;
pub mod stats;

pub use damm::{AugmentedObservation, DammComponent, DammModel, Demonstration, NiwPrior, PriorOptions};
pub use error::{Error, Result};
pub use lpvds::{FitConfig, LpvDsModel};
pub use pipeline::{LearnConfig, Learned};
pub use sampler::{ComponentModel, MixtureState, SamplerConfig};
pub use sphere::{TangentVector, UnitVector};
