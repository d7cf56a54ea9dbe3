//! Demonstration to stable dynamical system in one call.

use std::time::Instant;

use crate::damm::{self, AugmentedObservation, DammComponent, DammModel, Demonstration, NiwPrior, PriorOptions};
use crate::error::{Error, Result};
use crate::lpvds::{self, FitConfig, FitReport, LpvDsModel};
use crate::sampler::{self, ComponentModel, MixtureState, SamplerConfig};

#[derive(Debug, Clone, Default)]
pub struct LearnConfig {
    pub prior: PriorOptions,
    pub sampler: SamplerConfig,
    pub fit: FitConfig,
    /// Speed below which a sample carries the previous direction. Defaults
    /// to a millionth of the median speed.
    pub velocity_floor: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Learned {
    pub demo: Demonstration,
    pub velocity_floor: f64,
    pub observations: Vec<AugmentedObservation>,
    /// Indices into `observations` that were clustered (the ones with a
    /// direction), in sampler order.
    pub clustered: Vec<usize>,
    pub prior: NiwPrior,
    pub state: MixtureState<DammComponent>,
    pub lpvds: LpvDsModel,
    pub fit: FitReport,
    pub wall_time_cluster_s: f64,
    pub wall_time_fit_s: f64,
}

fn fit_state(
    demo: &Demonstration,
    state: &MixtureState<DammComponent>,
    config: &FitConfig,
) -> Result<(LpvDsModel, FitReport, f64)> {
    let start = Instant::now();
    let mixing = lpvds::mixing_from_damm(state.components())?;
    let (model, report) = lpvds::fit(mixing, demo, config)?;
    Ok((model, report, start.elapsed().as_secs_f64()))
}

fn velocity_floor(demo: &Demonstration, floor: Option<f64>) -> Result<f64> {
    let v = floor.unwrap_or_else(|| damm::default_velocity_floor(demo));
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::usage("velocity floor must be finite and nonnegative"));
    }
    Ok(v)
}

/// Build observations, cluster them with DAMM, fit LPV-DS.
pub fn learn(demo: &Demonstration, config: &LearnConfig) -> Result<Learned> {
    let floor = velocity_floor(demo, config.velocity_floor)?;
    let prior = NiwPrior::from_positions(demo.positions(), &config.prior)?;
    let start = Instant::now();
    let observations = damm::build_observations(demo, floor)?;
    let model = DammModel::new(&observations, prior.clone())?;
    let state = sampler::run(&model, &config.sampler)?;
    let wall_time_cluster_s = start.elapsed().as_secs_f64();
    let clustered = (0..model.len()).map(|i| model.source_index(i)).collect();
    let (lpvds, fit, wall_time_fit_s) = fit_state(demo, &state, &config.fit)?;
    Ok(Learned {
        demo: demo.clone(),
        velocity_floor: floor,
        observations,
        clustered,
        prior,
        state,
        lpvds,
        fit,
        wall_time_cluster_s,
        wall_time_fit_s,
    })
}

/// Add `new` to a previous result: only the new observations are
/// clustered, the old labels stay as they are, and LPV-DS is refitted on
/// everything. `old` must be the demonstration `previous` was learned from
/// and `prior` and `velocity_floor` must match that run.
pub fn learn_incremental(
    old: &Demonstration,
    new: &Demonstration,
    previous: &MixtureState<DammComponent>,
    prior: &NiwPrior,
    velocity_floor: f64,
    config: &LearnConfig,
) -> Result<Learned> {
    if new.is_empty() {
        return Err(Error::usage("the new batch is empty"));
    }
    let demo = old.concat(new)?;
    let start = Instant::now();
    let observations = damm::build_observations(&demo, velocity_floor)?;
    let model = DammModel::new(&observations, prior.clone())?;
    let old_valid = observations[..old.len()].iter().filter(|o| o.is_valid()).count();
    if old_valid != previous.len() {
        return Err(Error::usage(format!(
            "previous state labels {} observations but the old data has {old_valid}",
            previous.len()
        )));
    }
    let state = sampler::run_incremental(&model, previous, &config.sampler)?;
    let wall_time_cluster_s = start.elapsed().as_secs_f64();
    let clustered = (0..model.len()).map(|i| model.source_index(i)).collect();
    let (lpvds, fit, wall_time_fit_s) = fit_state(&demo, &state, &config.fit)?;
    Ok(Learned {
        demo,
        velocity_floor,
        observations,
        clustered,
        prior: prior.clone(),
        state,
        lpvds,
        fit,
        wall_time_cluster_s,
        wall_time_fit_s,
    })
}
