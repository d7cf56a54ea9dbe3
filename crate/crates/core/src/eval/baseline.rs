//! Plain Gaussian mixtures sampled with the same MCMC, used as baselines.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::damm::{Demonstration, PriorOptions};
use crate::error::{Error, Result};
use crate::lpvds::MixingComponent;
use crate::rng::StreamRng;
use crate::sampler::{self, ComponentModel, MixtureState, SamplerConfig};
use crate::stats::{Gaussian, Niw, SuffStats};

/// Which raw coordinates the baseline clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Position,
    PositionVelocity,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Position => "position",
            Variant::PositionVelocity => "position+velocity",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" | "p" => Ok(Variant::Position),
            "position+velocity" | "pv" => Ok(Variant::PositionVelocity),
            _ => Err(Error::usage(format!("unknown baseline variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussComponent {
    density: Gaussian,
    cov: DMatrix<f64>,
    pub weight: f64,
    pub count: usize,
}

impl GaussComponent {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, weight: f64, count: usize) -> Result<Self> {
        Ok(Self {
            density: Gaussian::new(mean, &cov)?,
            cov,
            weight,
            count,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.density.mean()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Mixing component over the first `d` coordinates (the position
    /// marginal for the position+velocity variant).
    pub fn position_marginal(&self, d: usize) -> Result<MixingComponent> {
        MixingComponent::new(
            self.weight,
            self.mean().rows(0, d).into_owned(),
            self.cov.view((0, 0), (d, d)).into_owned(),
            None,
        )
    }
}

/// Conjugate NIW Gaussian mixture over row vectors.
#[derive(Debug, Clone)]
pub struct GaussModel {
    dim: usize,
    data: Vec<f64>,
    niw: Niw,
    alpha: f64,
}

impl GaussModel {
    /// Prior built from the data the same way as the DAMM position prior.
    pub fn new(data: &DMatrix<f64>, opts: &PriorOptions) -> Result<Self> {
        let (n, dim) = data.shape();
        if n == 0 {
            return Err(Error::usage("no data to cluster"));
        }
        let prior = crate::damm::NiwPrior::from_positions(data, opts)?;
        let data = (0..n).flat_map(|i| data.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Ok(Self {
            dim,
            data,
            niw: prior.niw(),
            alpha: opts.alpha,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn stats(&self, members: &[usize]) -> SuffStats {
        SuffStats::from_rows(self.dim, members.iter().map(|&i| self.row(i)))
    }
}

impl ComponentModel for GaussModel {
    type Component = GaussComponent;

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn loglik(&self, comp: &GaussComponent, i: usize) -> f64 {
        comp.density.log_density(self.row(i))
    }

    fn sample_component(&self, members: &[usize], _context: &[usize], rng: &mut StreamRng) -> Result<GaussComponent> {
        let (mu, sigma) = self.niw.posterior(&self.stats(members)).sample(rng)?;
        GaussComponent::new(mu, sigma, 1.0, members.len())
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> Result<GaussComponent> {
        let (mu, sigma) = self.niw.sample(rng)?;
        GaussComponent::new(mu, sigma, 1.0, 0)
    }

    fn log_marginal(&self, members: &[usize]) -> Result<f64> {
        if members.is_empty() {
            return Ok(0.0);
        }
        Ok(self.niw.log_marginal(&self.stats(members)))
    }

    fn log_predictive(&self, i: usize, members: &[usize]) -> Result<f64> {
        Ok(self.niw.posterior(&self.stats(members)).log_predictive(self.row(i)))
    }

    fn position(&self, i: usize) -> &[f64] {
        self.row(i)
    }

    fn set_occupancy(&self, comp: &mut GaussComponent, count: usize, weight: f64) {
        comp.count = count;
        comp.weight = weight;
    }
}

/// Data matrix of the given variant: positions, or positions next to
/// velocities.
pub fn baseline_data(demo: &Demonstration, variant: Variant) -> DMatrix<f64> {
    match variant {
        Variant::Position => demo.positions().clone(),
        Variant::PositionVelocity => {
            let (n, d) = (demo.len(), demo.dim());
            DMatrix::from_fn(n, 2 * d, |i, j| {
                if j < d {
                    demo.positions()[(i, j)]
                } else {
                    demo.velocities()[(i, j - d)]
                }
            })
        }
    }
}

/// Cluster every sample of `demo` with a plain Gaussian mixture.
pub fn gmm_baseline(
    demo: &Demonstration,
    opts: &PriorOptions,
    config: &SamplerConfig,
    variant: Variant,
) -> Result<MixtureState<GaussComponent>> {
    let model = GaussModel::new(&baseline_data(demo, variant), opts)?;
    sampler::run(&model, config)
}

/// Position-space mixing components for LPV-DS.
pub fn baseline_mixing(state: &MixtureState<GaussComponent>, d: usize) -> Result<Vec<MixingComponent>> {
    state.components().iter().map(|c| c.position_marginal(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synthetic::{generate, Shape, SyntheticConfig};

    #[test]
    fn deterministic_and_small_on_a_line() {
        let demo = generate(Shape::Line, 0, &SyntheticConfig::default()).unwrap();
        let config = SamplerConfig {
            iterations: 40,
            seed: 5,
            ..SamplerConfig::default()
        };
        let a = gmm_baseline(&demo, &PriorOptions::default(), &config, Variant::PositionVelocity).unwrap();
        let b = gmm_baseline(&demo, &PriorOptions::default(), &config, Variant::PositionVelocity).unwrap();
        assert_eq!(a.assignments(), b.assignments());
        let mix = baseline_mixing(&a, 2).unwrap();
        assert_eq!(mix.len(), a.num_components());
        assert!(mix.iter().all(|m| m.mean().len() == 2));
    }
}
