//! Timed learn-and-evaluate runs for DAMM and the Gaussian baselines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::baseline::{baseline_mixing, gmm_baseline, Variant};
use super::metrics::{dtwd, edot, rmse};
use crate::damm::Demonstration;
use crate::error::{Error, Result};
use crate::lpvds::{self, LpvDsModel, RolloutConfig};
use crate::pipeline::{self, LearnConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Damm,
    GmmP,
    GmmPv,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Damm, Method::GmmP, Method::GmmPv];

    pub fn name(self) -> &'static str {
        match self {
            Method::Damm => "damm",
            Method::GmmP => "gmm-p",
            Method::GmmPv => "gmm-pv",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown method {s:?}; valid methods: damm, gmm-p, gmm-pv")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub seed: u64,
    /// Mean velocity-error norm.
    pub rmse: f64,
    pub edot: f64,
    /// DTW distance averaged over one rollout per trajectory start.
    pub dtwd: f64,
    pub wall_time_cluster_s: f64,
    pub wall_time_fit_s: f64,
    #[serde(rename = "K_final")]
    pub k_final: usize,
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub method: Method,
    pub learn: LearnConfig,
    /// Rollout step; defaults to the median sampling period of the data.
    pub rollout_dt: Option<f64>,
}

impl BenchmarkConfig {
    pub fn new(method: Method, learn: LearnConfig) -> Self {
        Self {
            method,
            learn,
            rollout_dt: None,
        }
    }
}

/// Learn with `config.method` and score the result on `demo` itself.
pub fn benchmark(demo: &Demonstration, config: &BenchmarkConfig) -> Result<EvalReport> {
    let (model, cluster_s, fit_s, k) = match config.method {
        Method::Damm => {
            let learned = pipeline::learn(demo, &config.learn)?;
            let k = learned.state.num_components();
            (learned.lpvds, learned.wall_time_cluster_s, learned.wall_time_fit_s, k)
        }
        Method::GmmP | Method::GmmPv => {
            let variant = if config.method == Method::GmmP {
                Variant::Position
            } else {
                Variant::PositionVelocity
            };
            let start = Instant::now();
            let state = gmm_baseline(demo, &config.learn.prior, &config.learn.sampler, variant)?;
            let cluster_s = start.elapsed().as_secs_f64();
            let start = Instant::now();
            let (model, _) = lpvds::fit(baseline_mixing(&state, demo.dim())?, demo, &config.learn.fit)?;
            (model, cluster_s, start.elapsed().as_secs_f64(), state.num_components())
        }
    };
    let dt = match config.rollout_dt {
        Some(dt) => dt,
        None => demo
            .median_time_step()
            .ok_or_else(|| Error::usage("cannot infer a rollout time step from the data"))?,
    };
    Ok(EvalReport {
        method: config.method,
        seed: config.learn.sampler.seed,
        rmse: rmse(&model, demo)?,
        edot: edot(&model, demo)?,
        dtwd: reproduction_dtwd(&model, demo, dt)?,
        wall_time_cluster_s: cluster_s,
        wall_time_fit_s: fit_s,
        k_final: k,
    })
}

/// Roll out from each trajectory's first sample for at most three times
/// its length and average the DTW distance to the trajectory.
pub fn reproduction_dtwd(model: &LpvDsModel, demo: &Demonstration, dt: f64) -> Result<f64> {
    let extent = (0..demo.len())
        .map(|i| (demo.position(i) - demo.attractor()).norm())
        .fold(0.0, f64::max);
    let tol = 1e-3 * extent.max(f64::MIN_POSITIVE);
    let ranges = demo.trajectories();
    let mut total = 0.0;
    for r in &ranges {
        let reference: DMatrix<f64> = demo.positions().rows(r.start, r.len()).into_owned();
        let cfg = RolloutConfig::new(dt, 3 * r.len(), tol);
        let trace = lpvds::rollout(model, &demo.position(r.start), &cfg)?;
        total += dtwd(&trace.states, &reference)?;
    }
    Ok(total / ranges.len() as f64)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synthetic::{generate, Shape, SyntheticConfig};
    use crate::sampler::SamplerConfig;

    #[test]
    fn line_is_easy() {
        let demo = generate(Shape::Line, 1, &SyntheticConfig::default()).unwrap();
        let learn = LearnConfig {
            sampler: SamplerConfig {
                iterations: 50,
                seed: 1,
                ..SamplerConfig::default()
            },
            ..LearnConfig::default()
        };
        let report = benchmark(&demo, &BenchmarkConfig::new(Method::Damm, learn)).unwrap();
        assert!(report.edot <= 0.05, "{report:?}");
        for v in [report.rmse, report.edot, report.dtwd, report.wall_time_cluster_s, report.wall_time_fit_s] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        let err = "kmeans".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("damm, gmm-p, gmm-pv"));
    }

    #[test]
    fn mean_std_basic() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
    }
}
