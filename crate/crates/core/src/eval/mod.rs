//! Metrics, trajectory files, synthetic data and the benchmark harness.

pub mod baseline;
pub mod benchmark;
pub mod io;
pub mod metrics;
pub mod synthetic;

pub use baseline::{gmm_baseline, GaussComponent, GaussModel, Variant};
pub use benchmark::{benchmark, BenchmarkConfig, EvalReport, Method};
pub use io::{load_trajectories, TrajectoryFormat};
pub use metrics::{adjusted_rand_index, dtwd, edot, rmse};
pub use synthetic::{Shape, SyntheticConfig};
