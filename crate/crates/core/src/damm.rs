//! The directionality-aware mixture model.
//!
//! Each observation is a position plus a unit direction. A component scores
//! an observation with a (d+1)-dimensional Gaussian over the position and
//! the geodesic distance between the observation's direction and the
//! component's directional mean. That extra coordinate has mean zero and
//! variance `dir_var`, and the covariance is block diagonal.
//!
//! The position block is conjugate to a Normal-Inverse-Wishart prior. The
//! directional variance has its own inverse-gamma prior. The directional
//! mean is the Frechet mean of the members' directions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::sampler::ComponentModel;
use crate::sphere::{self, UnitVector};
use crate::stats::{self, Gaussian, InvGamma, Niw, SuffStats, LN_2PI};

/// Reference trajectories: positions, velocities and the attractor.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    positions: DMatrix<f64>,
    velocities: DMatrix<f64>,
    boundaries: Vec<usize>,
    attractor: DVector<f64>,
}

impl Demonstration {
    /// `positions` and `velocities` are N x d with one sample per row;
    /// `boundaries` lists the first row of every trajectory.
    pub fn new(
        positions: DMatrix<f64>,
        velocities: DMatrix<f64>,
        boundaries: Vec<usize>,
        attractor: DVector<f64>,
    ) -> Result<Self> {
        let (n, d) = positions.shape();
        if velocities.shape() != (n, d) {
            return Err(Error::usage(format!(
                "positions are {n}x{d} but velocities are {}x{}",
                velocities.nrows(),
                velocities.ncols()
            )));
        }
        if n < 2 || d < 2 {
            return Err(Error::usage("a demonstration needs N >= 2 samples of dimension d >= 2"));
        }
        if attractor.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: attractor.len(),
            });
        }
        if boundaries.first() != Some(&0)
            || boundaries.windows(2).any(|w| w[0] >= w[1])
            || boundaries.iter().any(|&b| b >= n)
        {
            return Err(Error::usage(
                "trajectory boundaries must start at 0, increase strictly and stay below N",
            ));
        }
        if positions.iter().chain(velocities.iter()).chain(attractor.iter()).any(|x| !x.is_finite()) {
            return Err(Error::usage("demonstration contains non-finite values"));
        }
        Ok(Self {
            positions,
            velocities,
            boundaries,
            attractor,
        })
    }

    /// Like [`Demonstration::new`] with the attractor set to the mean of the
    /// trajectories' final positions.
    pub fn with_default_attractor(
        positions: DMatrix<f64>,
        velocities: DMatrix<f64>,
        boundaries: Vec<usize>,
    ) -> Result<Self> {
        let d = positions.ncols();
        let mut demo = Self::new(positions, velocities, boundaries, DVector::zeros(d))?;
        demo.attractor = demo.final_position_mean();
        Ok(demo)
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn velocities(&self) -> &DMatrix<f64> {
        &self.velocities
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn attractor(&self) -> &DVector<f64> {
        &self.attractor
    }

    pub fn set_attractor(&mut self, attractor: DVector<f64>) -> Result<()> {
        if attractor.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: attractor.len(),
            });
        }
        self.attractor = attractor;
        Ok(())
    }

    pub fn position(&self, i: usize) -> DVector<f64> {
        self.positions.row(i).transpose()
    }

    pub fn velocity(&self, i: usize) -> DVector<f64> {
        self.velocities.row(i).transpose()
    }

    /// Row ranges of the individual trajectories.
    pub fn trajectories(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.len();
        self.boundaries
            .iter()
            .enumerate()
            .map(|(t, &start)| start..self.boundaries.get(t + 1).copied().unwrap_or(n))
            .collect()
    }

    /// Mean of the last position of every trajectory.
    pub fn final_position_mean(&self) -> DVector<f64> {
        let ranges = self.trajectories();
        let mut acc = DVector::zeros(self.dim());
        for r in &ranges {
            acc += self.position(r.end - 1);
        }
        acc / ranges.len() as f64
    }

    /// Stack two demonstrations; the attractor of `self` is kept.
    pub fn concat(&self, other: &Demonstration) -> Result<Demonstration> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let n = self.len();
        let m = other.len();
        let d = self.dim();
        let mut pos = DMatrix::zeros(n + m, d);
        let mut vel = DMatrix::zeros(n + m, d);
        pos.rows_mut(0, n).copy_from(&self.positions);
        pos.rows_mut(n, m).copy_from(&other.positions);
        vel.rows_mut(0, n).copy_from(&self.velocities);
        vel.rows_mut(n, m).copy_from(&other.velocities);
        let mut bounds = self.boundaries.clone();
        bounds.extend(other.boundaries.iter().map(|b| b + n));
        Demonstration::new(pos, vel, bounds, self.attractor.clone())
    }

    /// Median ratio `|x_{t+1} - x_t| / |v_t|` over consecutive samples: the
    /// sampling period implied by the data.
    pub fn median_time_step(&self) -> Option<f64> {
        let mut steps = Vec::new();
        for r in self.trajectories() {
            for i in r.start..r.end.saturating_sub(1) {
                let speed = self.velocities.row(i).norm();
                if speed > 0.0 {
                    let dx = (self.positions.row(i + 1) - self.positions.row(i)).norm();
                    steps.push(dx / speed);
                }
            }
        }
        median(&mut steps)
    }

    /// Median speed over all samples.
    pub fn median_speed(&self) -> f64 {
        let mut speeds: Vec<f64> = (0..self.len()).map(|i| self.velocities.row(i).norm()).collect();
        median(&mut speeds).unwrap_or(0.0)
    }
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    })
}

/// A position with its unit direction of motion.
///
/// `direction` is `None` for samples that never had a usable velocity; those
/// are left out of clustering but still used when fitting the dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedObservation {
    pub position: DVector<f64>,
    pub direction: Option<UnitVector>,
}

impl AugmentedObservation {
    pub fn new(position: DVector<f64>, direction: UnitVector) -> Self {
        Self {
            position,
            direction: Some(direction),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.direction.is_some()
    }

    fn dir(&self) -> Result<&UnitVector> {
        self.direction
            .as_ref()
            .ok_or_else(|| Error::usage("observation has no direction"))
    }
}

/// Default velocity floor: `1e-6` times the median speed.
pub fn default_velocity_floor(demo: &Demonstration) -> f64 {
    1e-6 * demo.median_speed()
}

/// Normalize every velocity into a direction.
///
/// Samples slower than `velocity_floor` reuse the previous direction of the
/// same trajectory, or get no direction if none exists yet.
pub fn build_observations(
    demo: &Demonstration,
    velocity_floor: f64,
) -> Result<Vec<AugmentedObservation>> {
    let mut out = Vec::with_capacity(demo.len());
    for range in demo.trajectories() {
        let mut last: Option<UnitVector> = None;
        for i in range {
            let v = demo.velocity(i);
            let speed = v.norm();
            if speed >= velocity_floor && speed > 0.0 {
                last = Some(UnitVector::normalize(v)?);
            }
            out.push(AugmentedObservation {
                position: demo.position(i),
                direction: last.clone(),
            });
        }
    }
    if out.iter().all(|o| !o.is_valid()) {
        return Err(Error::usage(
            "every velocity is below the floor; there is no directional signal",
        ));
    }
    Ok(out)
}

/// Hyperparameters of the conjugate priors plus the concentration `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwPrior {
    pub psi_pos: DMatrix<f64>,
    pub nu: f64,
    pub mu0_pos: DVector<f64>,
    pub kappa: f64,
    pub dir_var_shape: f64,
    pub dir_var_scale: f64,
    pub alpha: f64,
}

/// Knobs for [`NiwPrior::from_positions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorOptions {
    /// `psi_pos = psi_scale * diag(empirical covariance)`.
    pub psi_scale: f64,
    /// Degrees of freedom; `None` means `d + 3`.
    pub nu: Option<f64>,
    pub kappa: f64,
    /// Prior mean of the directional variance, in rad^2.
    pub dir_var_prior: f64,
    pub dir_var_shape: f64,
    pub alpha: f64,
}

impl Default for PriorOptions {
    fn default() -> Self {
        Self {
            psi_scale: 0.2,
            nu: None,
            kappa: 1.0,
            dir_var_prior: 0.1,
            dir_var_shape: 2.0,
            alpha: 1.0,
        }
    }
}

impl NiwPrior {
    /// Data-driven defaults from the rows of `positions`.
    pub fn from_positions(positions: &DMatrix<f64>, opts: &PriorOptions) -> Result<Self> {
        let (n, d) = positions.shape();
        if n == 0 {
            return Err(Error::usage("cannot derive a prior from zero positions"));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| positions.row(i).iter().copied().collect()).collect();
        let stats = SuffStats::from_rows(d, rows.iter().map(Vec::as_slice));
        let mean = stats.mean().expect("nonempty");
        let var = stats.scatter().diagonal() / (n.max(2) - 1) as f64;
        let max_var = var.max().max(f64::MIN_POSITIVE);
        let floor = (1e-6 * max_var).max(1e-12);
        let psi = DMatrix::from_diagonal(&var.map(|v| v.max(floor) * opts.psi_scale));
        let prior = Self {
            psi_pos: psi,
            nu: opts.nu.unwrap_or(d as f64 + 3.0),
            mu0_pos: mean,
            kappa: opts.kappa,
            dir_var_shape: opts.dir_var_shape,
            dir_var_scale: (opts.dir_var_shape - 1.0) * opts.dir_var_prior,
            alpha: opts.alpha,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn dim(&self) -> usize {
        self.mu0_pos.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.psi_pos.shape() != (d, d) {
            return Err(Error::usage("psi must be d x d"));
        }
        if nalgebra::Cholesky::new(self.psi_pos.clone()).is_none() {
            return Err(Error::usage("psi must be symmetric positive definite"));
        }
        if !(self.nu > d as f64 + 1.0) {
            return Err(Error::usage(format!("nu must exceed d + 1 = {}", d + 1)));
        }
        if !(self.kappa > 0.0 && self.alpha > 0.0 && self.dir_var_scale > 0.0) {
            return Err(Error::usage("kappa, alpha and the directional scale must be positive"));
        }
        if !(self.dir_var_shape > 1.0) {
            return Err(Error::usage("directional variance shape must exceed 1"));
        }
        Ok(())
    }

    pub(crate) fn niw(&self) -> Niw {
        Niw {
            mu0: self.mu0_pos.clone(),
            kappa: self.kappa,
            nu: self.nu,
            psi: self.psi_pos.clone(),
        }
    }

    pub(crate) fn inv_gamma(&self) -> InvGamma {
        InvGamma {
            shape: self.dir_var_shape,
            scale: self.dir_var_scale,
        }
    }
}

/// One mixture component with its cached position density.
#[derive(Debug, Clone)]
pub struct DammComponent {
    mean_pos: DVector<f64>,
    cov_pos: DMatrix<f64>,
    dir_mean: UnitVector,
    dir_var: f64,
    pub weight: f64,
    pub count: usize,
    gauss: Gaussian,
}

impl PartialEq for DammComponent {
    fn eq(&self, other: &Self) -> bool {
        self.mean_pos == other.mean_pos
            && self.cov_pos == other.cov_pos
            && self.dir_mean == other.dir_mean
            && self.dir_var == other.dir_var
            && self.weight == other.weight
            && self.count == other.count
    }
}

impl DammComponent {
    pub fn new(
        mean_pos: DVector<f64>,
        cov_pos: DMatrix<f64>,
        dir_mean: UnitVector,
        dir_var: f64,
        weight: f64,
        count: usize,
    ) -> Result<Self> {
        if !(dir_var > 0.0 && dir_var.is_finite()) {
            return Err(Error::usage(format!("directional variance {dir_var} must be positive")));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::usage(format!("component weight {weight} outside (0, 1]")));
        }
        let d = mean_pos.len();
        if cov_pos.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: cov_pos.nrows(),
            });
        }
        if (&cov_pos - cov_pos.transpose()).amax() > 1e-9 * cov_pos.amax().max(1.0) {
            return Err(Error::usage("position covariance is not symmetric"));
        }
        let gauss = Gaussian::new(mean_pos.clone(), &cov_pos)?;
        Ok(Self {
            mean_pos,
            cov_pos,
            dir_mean,
            dir_var,
            weight,
            count,
            gauss,
        })
    }

    pub fn mean_pos(&self) -> &DVector<f64> {
        &self.mean_pos
    }

    pub fn cov_pos(&self) -> &DMatrix<f64> {
        &self.cov_pos
    }

    pub fn dir_mean(&self) -> &UnitVector {
        &self.dir_mean
    }

    pub fn dir_var(&self) -> f64 {
        self.dir_var
    }

    /// Log density of the augmented state built from raw slices.
    #[inline]
    pub(crate) fn loglik_raw(&self, pos: &[f64], dir: &[f64]) -> f64 {
        let r = sphere::dist(self.dir_mean.as_slice(), dir);
        self.gauss.log_density(pos) - 0.5 * (LN_2PI + self.dir_var.ln() + r * r / self.dir_var)
    }
}

/// Geodesic distance between the observation's direction and the
/// component's directional mean; zero when they coincide.
pub fn augmented_coordinate(obs: &AugmentedObservation, comp: &DammComponent) -> Result<f64> {
    sphere::geodesic_distance(comp.dir_mean(), obs.dir()?)
}

/// Log of the (d+1)-dimensional block-diagonal Gaussian density at the
/// augmented state `[position; augmented_coordinate]`.
pub fn component_loglik(obs: &AugmentedObservation, comp: &DammComponent) -> Result<f64> {
    let dir = obs.dir()?;
    if dir.dim() != comp.dir_mean.dim() {
        return Err(Error::DimensionMismatch {
            expected: comp.dir_mean.dim(),
            found: dir.dim(),
        });
    }
    if obs.position.len() != comp.mean_pos.len() {
        return Err(Error::DimensionMismatch {
            expected: comp.mean_pos.len(),
            found: obs.position.len(),
        });
    }
    Ok(comp.loglik_raw(obs.position.as_slice(), dir.as_slice()))
}

/// Posterior summary of a member set: everything the sampler needs that
/// depends on the members only.
pub(crate) struct GroupPosterior {
    pub niw: Niw,
    pub dir_mean: Vec<f64>,
    pub ig: InvGamma,
}

pub(crate) fn group_posterior<'a, P, D>(
    prior: &NiwPrior,
    positions: P,
    directions: D,
    dir_dim: usize,
) -> Result<Option<GroupPosterior>>
where
    P: Iterator<Item = &'a [f64]>,
    D: Iterator<Item = &'a [f64]> + Clone,
{
    let stats = SuffStats::from_rows(prior.dim(), positions);
    if stats.n == 0 {
        return Ok(None);
    }
    let (dir_mean, _, _) = sphere::frechet_mean_rows(directions.clone(), dir_dim, None)?;
    let ss: f64 = directions
        .map(|q| {
            let r = sphere::dist(&dir_mean, q);
            r * r
        })
        .sum();
    Ok(Some(GroupPosterior {
        niw: prior.niw().posterior(&stats),
        dir_mean,
        ig: prior.inv_gamma().posterior(stats.n, ss),
    }))
}

pub(crate) fn sample_group<R: Rng + ?Sized>(
    post: &GroupPosterior,
    count: usize,
    rng: &mut R,
) -> Result<DammComponent> {
    let (mu, sigma) = post.niw.sample(rng)?;
    let dir_var = post.ig.sample(rng)?;
    DammComponent::new(
        mu,
        sigma,
        UnitVector::normalize(DVector::from_column_slice(&post.dir_mean))?,
        dir_var,
        1.0,
        count,
    )
}

/// Log marginal likelihood of a member set: the NIW evidence of the
/// positions plus the inverse-gamma evidence of the augmented coordinates
/// measured from the members' Frechet mean.
pub(crate) fn group_log_marginal<'a, P, D>(
    prior: &NiwPrior,
    positions: P,
    directions: D,
    dir_dim: usize,
) -> Result<f64>
where
    P: Iterator<Item = &'a [f64]>,
    D: Iterator<Item = &'a [f64]> + Clone,
{
    let stats = SuffStats::from_rows(prior.dim(), positions);
    if stats.n == 0 {
        return Ok(0.0);
    }
    let (dir_mean, _, _) = sphere::frechet_mean_rows(directions.clone(), dir_dim, None)?;
    let ss: f64 = directions
        .map(|q| {
            let r = sphere::dist(&dir_mean, q);
            r * r
        })
        .sum();
    Ok(prior.niw().log_marginal(&stats) + prior.inv_gamma().log_marginal(stats.n, ss))
}

fn member_slices(members: &[AugmentedObservation]) -> Result<Vec<(&[f64], &[f64])>> {
    members
        .iter()
        .map(|m| Ok((m.position.as_slice(), m.dir()?.as_slice())))
        .collect()
}

/// Draw a component from the conjugate posterior given its members.
///
/// The directional mean is the members' Frechet mean. `(mean_pos, cov_pos)`
/// come from the NIW posterior and `dir_var` from the inverse-gamma
/// posterior. The returned `weight` is 1 and `count` is the member count;
/// callers renormalize weights.
pub fn posterior_sample_component<R: Rng + ?Sized>(
    members: &[AugmentedObservation],
    prior: &NiwPrior,
    rng: &mut R,
) -> Result<DammComponent> {
    let first = members
        .first()
        .ok_or_else(|| Error::usage("cannot sample a component without members"))?;
    let dir_dim = first.dir()?.dim();
    let rows = member_slices(members)?;
    let post = group_posterior(
        prior,
        rows.iter().map(|r| r.0),
        rows.iter().map(|r| r.1),
        dir_dim,
    )?
    .expect("nonempty");
    sample_group(&post, members.len(), rng)
}

/// Log posterior-predictive density of `obs` given `members`.
///
/// Position: multivariate Student-t from the NIW posterior. Augmented
/// coordinate: Student-t from the inverse-gamma posterior, measured from the
/// members' Frechet mean (from the observation's own direction when there
/// are no members, which makes the coordinate zero).
pub fn posterior_predictive_loglik(
    obs: &AugmentedObservation,
    members: &[AugmentedObservation],
    prior: &NiwPrior,
) -> Result<f64> {
    let dir = obs.dir()?;
    let rows = member_slices(members)?;
    let r = match group_posterior(
        prior,
        rows.iter().map(|r| r.0),
        rows.iter().map(|r| r.1),
        dir.dim(),
    )? {
        Some(post) => {
            let r = sphere::dist(&post.dir_mean, dir.as_slice());
            return Ok(post.niw.log_predictive(obs.position.as_slice()) + post.ig.log_predictive(r));
        }
        None => 0.0,
    };
    Ok(prior.niw().log_predictive(obs.position.as_slice()) + prior.inv_gamma().log_predictive(r))
}

/// Log marginal likelihood of a member set (zero for an empty set).
pub fn log_marginal_likelihood(members: &[AugmentedObservation], prior: &NiwPrior) -> Result<f64> {
    let Some(first) = members.first() else {
        return Ok(0.0);
    };
    let dir_dim = first.dir()?.dim();
    let rows = member_slices(members)?;
    group_log_marginal(prior, rows.iter().map(|r| r.0), rows.iter().map(|r| r.1), dir_dim)
}

/// Valid observations packed for the sampler.
#[derive(Debug, Clone)]
pub struct DammModel {
    d: usize,
    dir_dim: usize,
    pos: Vec<f64>,
    dirs: Vec<f64>,
    source: Vec<usize>,
    prior: NiwPrior,
    niw: Niw,
    ig: InvGamma,
}

impl DammModel {
    /// Keeps the observations that have a direction; [`DammModel::source_index`]
    /// maps back to positions in `obs`.
    pub fn new(obs: &[AugmentedObservation], prior: NiwPrior) -> Result<Self> {
        prior.validate()?;
        let d = prior.dim();
        let mut pos = Vec::new();
        let mut dirs = Vec::new();
        let mut source = Vec::new();
        let mut dir_dim = 0;
        for (i, o) in obs.iter().enumerate() {
            let Some(dir) = &o.direction else { continue };
            if o.position.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: o.position.len(),
                });
            }
            if dir_dim == 0 {
                dir_dim = dir.dim();
            } else if dir.dim() != dir_dim {
                return Err(Error::DimensionMismatch {
                    expected: dir_dim,
                    found: dir.dim(),
                });
            }
            pos.extend_from_slice(o.position.as_slice());
            dirs.extend_from_slice(dir.as_slice());
            source.push(i);
        }
        if source.is_empty() {
            return Err(Error::usage("no observation has a direction"));
        }
        Ok(Self {
            d,
            dir_dim,
            pos,
            dirs,
            source,
            niw: prior.niw(),
            ig: prior.inv_gamma(),
            prior,
        })
    }

    pub fn prior(&self) -> &NiwPrior {
        &self.prior
    }

    /// Index into the observation list this model was built from.
    pub fn source_index(&self, i: usize) -> usize {
        self.source[i]
    }

    fn dir(&self, i: usize) -> &[f64] {
        &self.dirs[i * self.dir_dim..(i + 1) * self.dir_dim]
    }

    fn rows<'a>(&'a self, members: &'a [usize]) -> (impl Iterator<Item = &'a [f64]> + Clone, impl Iterator<Item = &'a [f64]> + Clone) {
        (
            members.iter().map(move |&i| self.position_row(i)),
            members.iter().map(move |&i| self.dir(i)),
        )
    }

    fn position_row(&self, i: usize) -> &[f64] {
        &self.pos[i * self.d..(i + 1) * self.d]
    }

    fn from_prior(&self, dir_mean: &[f64], rng: &mut StreamRng) -> Result<DammComponent> {
        let (mu, sigma) = self.niw.sample(rng)?;
        let dir_var = self.ig.sample(rng)?;
        DammComponent::new(
            mu,
            sigma,
            UnitVector::normalize(DVector::from_column_slice(dir_mean))?,
            dir_var,
            1.0,
            0,
        )
    }
}

impl ComponentModel for DammModel {
    type Component = DammComponent;

    fn len(&self) -> usize {
        self.source.len()
    }

    fn alpha(&self) -> f64 {
        self.prior.alpha
    }

    fn loglik(&self, comp: &DammComponent, i: usize) -> f64 {
        comp.loglik_raw(self.position_row(i), self.dir(i))
    }

    fn sample_component(&self, members: &[usize], context: &[usize], rng: &mut StreamRng) -> Result<DammComponent> {
        if members.is_empty() {
            let (_, dirs) = self.rows(context);
            let (mean, _, _) = sphere::frechet_mean_rows(dirs, self.dir_dim, None)?;
            return self.from_prior(&mean, rng);
        }
        let (p, q) = self.rows(members);
        let post = group_posterior(&self.prior, p, q, self.dir_dim)?.expect("nonempty");
        sample_group(&post, members.len(), rng)
    }

    /// The directional mean of a fresh component is the direction of a
    /// uniformly chosen observation.
    fn sample_prior(&self, rng: &mut StreamRng) -> Result<DammComponent> {
        let j = rng.random_range(0..self.len());
        let dir = self.dir(j).to_vec();
        self.from_prior(&dir, rng)
    }

    fn log_marginal(&self, members: &[usize]) -> Result<f64> {
        let (p, q) = self.rows(members);
        group_log_marginal(&self.prior, p, q, self.dir_dim)
    }

    fn log_predictive(&self, i: usize, members: &[usize]) -> Result<f64> {
        let (p, q) = self.rows(members);
        Ok(match group_posterior(&self.prior, p, q, self.dir_dim)? {
            Some(post) => {
                let r = sphere::dist(&post.dir_mean, self.dir(i));
                post.niw.log_predictive(self.position_row(i)) + post.ig.log_predictive(r)
            }
            None => self.niw.log_predictive(self.position_row(i)) + self.ig.log_predictive(0.0),
        })
    }

    fn position(&self, i: usize) -> &[f64] {
        self.position_row(i)
    }

    fn set_occupancy(&self, comp: &mut DammComponent, count: usize, weight: f64) {
        comp.count = count;
        comp.weight = weight;
    }
}

/// `log N(x | mean, cov)` evaluated with the regularized covariance.
pub fn gaussian_log_density(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    Ok(stats::Gaussian::new(mean.clone(), cov)?.log_density(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn demo_from(pos: &[[f64; 2]], vel: &[[f64; 2]], bounds: Vec<usize>) -> Demonstration {
        let n = pos.len();
        let p = DMatrix::from_fn(n, 2, |i, j| pos[i][j]);
        let q = DMatrix::from_fn(n, 2, |i, j| vel[i][j]);
        Demonstration::with_default_attractor(p, q, bounds).unwrap()
    }

    fn comp(mean: &[f64], dir: &[f64], dir_var: f64) -> DammComponent {
        let d = mean.len();
        DammComponent::new(
            v(mean),
            DMatrix::identity(d, d),
            UnitVector::from_slice(dir).unwrap(),
            dir_var,
            1.0,
            1,
        )
        .unwrap()
    }

    fn prior2() -> NiwPrior {
        NiwPrior {
            psi_pos: DMatrix::identity(2, 2) * 0.5,
            nu: 5.0,
            mu0_pos: v(&[0.0, 0.0]),
            kappa: 1.0,
            dir_var_shape: 2.0,
            dir_var_scale: 0.1,
            alpha: 1.0,
        }
    }

    #[test]
    fn demonstration_validation() {
        let p = DMatrix::zeros(3, 2);
        assert!(Demonstration::new(p.clone(), DMatrix::zeros(2, 2), vec![0], v(&[0.0, 0.0])).is_err());
        assert!(Demonstration::new(p.clone(), p.clone(), vec![1], v(&[0.0, 0.0])).is_err());
        assert!(Demonstration::new(p.clone(), p.clone(), vec![0, 0], v(&[0.0, 0.0])).is_err());
        assert!(Demonstration::new(p.clone(), p.clone(), vec![0, 3], v(&[0.0, 0.0])).is_err());
        assert!(Demonstration::new(p.clone(), p.clone(), vec![0, 2], v(&[0.0, 0.0])).is_ok());
        assert!(Demonstration::new(DMatrix::zeros(3, 1), DMatrix::zeros(3, 1), vec![0], v(&[0.0])).is_err());
    }

    #[test]
    fn default_attractor_is_mean_of_endpoints() {
        let d = demo_from(
            &[[0.0, 0.0], [1.0, 1.0], [5.0, 5.0], [3.0, 1.0]],
            &[[1.0, 0.0]; 4],
            vec![0, 2],
        );
        assert_eq!(d.attractor().as_slice(), &[2.0, 1.0]);
        assert_eq!(d.trajectories(), vec![0..2, 2..4]);
    }

    #[test]
    fn observation_directions() {
        let d = demo_from(
            &[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]],
            &[[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]],
            vec![0],
        );
        let obs = build_observations(&d, 1e-6).unwrap();
        assert_eq!(obs[0].direction.as_ref().unwrap().as_slice(), &[0.6, 0.8]);
        // Zero velocity inherits the previous direction.
        assert_eq!(obs[1].direction, obs[0].direction);
        assert_eq!(obs[2].direction.as_ref().unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn leading_stationary_samples_are_invalid() {
        let d = demo_from(
            &[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 0.0]],
            &[[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
            vec![0, 2],
        );
        let obs = build_observations(&d, 1e-6).unwrap();
        assert!(!obs[0].is_valid());
        assert!(obs[1].is_valid());
        // Carry-forward does not cross trajectory boundaries.
        assert!(!obs[2].is_valid() && !obs[3].is_valid());
    }

    #[test]
    fn all_stationary_is_usage_error() {
        let d = demo_from(&[[0.0, 0.0], [0.0, 0.0]], &[[0.0, 0.0]; 2], vec![0]);
        assert!(matches!(build_observations(&d, 1e-6), Err(Error::Usage(_))));
    }

    #[test]
    fn straight_line_has_one_direction() {
        let pos: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let d = demo_from(&pos, &[[0.5, 1.0]; 10], vec![0]);
        let obs = build_observations(&d, 1e-6).unwrap();
        let first = obs[0].direction.clone();
        assert!(obs.iter().all(|o| o.direction == first));
    }

    #[test]
    fn augmented_coordinate_examples() {
        let c = comp(&[0.0, 0.0], &[1.0, 0.0], 1.0);
        let mk = |d: &[f64]| AugmentedObservation::new(v(&[0.0, 0.0]), UnitVector::from_slice(d).unwrap());
        assert_eq!(augmented_coordinate(&mk(&[1.0, 0.0]), &c).unwrap(), 0.0);
        assert!((augmented_coordinate(&mk(&[0.0, 1.0]), &c).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((augmented_coordinate(&mk(&[-1.0, 0.0]), &c).unwrap() - PI).abs() < 1e-12);
    }

    #[test]
    fn loglik_at_mean() {
        for d in [2usize, 3] {
            let mut dir = vec![0.0; d];
            dir[0] = 1.0;
            let c = comp(&vec![0.5; d], &dir, 1.0);
            let obs = AugmentedObservation::new(v(&vec![0.5; d]), UnitVector::from_slice(&dir).unwrap());
            let ll = component_loglik(&obs, &c).unwrap();
            let expected = -((d + 1) as f64 / 2.0) * (2.0 * PI).ln();
            assert!((ll - expected).abs() < 1e-9, "{ll} vs {expected}");
        }
    }

    #[test]
    fn closer_direction_scores_higher() {
        let obs = AugmentedObservation::new(v(&[0.0, 0.0]), UnitVector::from_slice(&[1.0, 0.1]).unwrap());
        let near = comp(&[0.0, 0.0], &[1.0, 0.0], 0.2);
        let far = comp(&[0.0, 0.0], &[0.0, 1.0], 0.2);
        assert!(component_loglik(&obs, &near).unwrap() > component_loglik(&obs, &far).unwrap());
    }

    #[test]
    fn loglik_block_decomposition() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.7]);
        let c = DammComponent::new(
            v(&[1.0, 2.0]),
            cov.clone(),
            UnitVector::from_slice(&[0.0, 1.0]).unwrap(),
            0.3,
            0.5,
            4,
        )
        .unwrap();
        let obs = AugmentedObservation::new(v(&[0.3, 2.5]), UnitVector::from_slice(&[0.4, 1.0]).unwrap());
        let r = augmented_coordinate(&obs, &c).unwrap();
        let pos = gaussian_log_density(obs.position.as_slice(), c.mean_pos(), &cov).unwrap();
        let dir = -0.5 * ((2.0 * PI * 0.3).ln() + r * r / 0.3);
        assert!((component_loglik(&obs, &c).unwrap() - (pos + dir)).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(DammComponent::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), UnitVector::axis(2, 0), 0.0, 1.0, 1).is_err());
        assert!(DammComponent::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), UnitVector::axis(2, 0), 1.0, 0.0, 1).is_err());
        let obs = AugmentedObservation {
            position: v(&[0.0, 0.0]),
            direction: None,
        };
        assert!(component_loglik(&obs, &comp(&[0.0, 0.0], &[1.0, 0.0], 1.0)).is_err());
        let mut rng = stream(0, &[]);
        assert!(posterior_sample_component(&[], &prior2(), &mut rng).is_err());
    }

    #[test]
    fn posterior_sampling_is_seed_deterministic() {
        let members: Vec<_> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.1;
                AugmentedObservation::new(v(&[t, t * t]), UnitVector::from_slice(&[1.0, 2.0 * t]).unwrap())
            })
            .collect();
        let a = posterior_sample_component(&members, &prior2(), &mut stream(3, &[1])).unwrap();
        let b = posterior_sample_component(&members, &prior2(), &mut stream(3, &[1])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count, 20);
    }

    #[test]
    fn single_member_posterior_mean() {
        // E[mu] = (kappa mu0 + x) / (kappa + 1).
        let prior = prior2();
        let x = [2.0, -1.0];
        let obs = AugmentedObservation::new(v(&x), UnitVector::axis(2, 0));
        let mut rng = stream(11, &[]);
        let n = 20_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..n {
            acc += posterior_sample_component(std::slice::from_ref(&obs), &prior, &mut rng)
                .unwrap()
                .mean_pos()
                .clone();
        }
        let mean = acc / n as f64;
        let expected = (&prior.mu0_pos * prior.kappa + v(&x)) / (prior.kappa + 1.0);
        assert!((mean - expected).norm() < 0.05);
    }

    #[test]
    fn strong_prior_dominates() {
        let mut prior = prior2();
        prior.kappa = 1e9;
        prior.nu = 1e9;
        prior.psi_pos = DMatrix::identity(2, 2) * (1e9 - 3.0) * 0.25;
        prior.dir_var_shape = 1e9;
        prior.dir_var_scale = (1e9 - 1.0) * 0.05;
        let members: Vec<_> = (0..10)
            .map(|i| AugmentedObservation::new(v(&[10.0 + i as f64, -5.0]), UnitVector::from_slice(&[1.0, i as f64]).unwrap()))
            .collect();
        let c = posterior_sample_component(&members, &prior, &mut stream(5, &[])).unwrap();
        assert!(c.mean_pos().norm() < 1e-2);
        assert!((c.cov_pos() - DMatrix::identity(2, 2) * 0.25).amax() < 1e-2);
        assert!((c.dir_var() - 0.05).abs() < 1e-3);
    }

    #[test]
    fn straight_segment_shrinks_directional_variance() {
        let prior = prior2();
        let members: Vec<_> = (0..30)
            .map(|i| AugmentedObservation::new(v(&[i as f64 * 0.1, 0.0]), UnitVector::axis(2, 0)))
            .collect();
        let rows = member_slices(&members).unwrap();
        let post = group_posterior(&prior, rows.iter().map(|r| r.0), rows.iter().map(|r| r.1), 2)
            .unwrap()
            .unwrap();
        assert!(post.ig.mean() <= prior.inv_gamma().mean());
    }

    #[test]
    fn predictive_with_no_members_is_prior_predictive() {
        let prior = prior2();
        let obs = AugmentedObservation::new(v(&[0.3, -0.2]), UnitVector::axis(2, 1));
        let pp = posterior_predictive_loglik(&obs, &[], &prior).unwrap();
        let expected = prior.niw().log_predictive(&[0.3, -0.2]) + prior.inv_gamma().log_predictive(0.0);
        assert_eq!(pp, expected);
    }

    #[test]
    fn adding_self_raises_predictive() {
        let prior = prior2();
        let mut rng = stream(9, &[]);
        for _ in 0..50 {
            let mk = |rng: &mut crate::rng::StreamRng| {
                AugmentedObservation::new(
                    v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]),
                    UnitVector::from_slice(&[rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5)]).unwrap(),
                )
            };
            let members: Vec<_> = (0..5).map(|_| mk(&mut rng)).collect();
            let obs = mk(&mut rng);
            let base = posterior_predictive_loglik(&obs, &members, &prior).unwrap();
            let mut with = members.clone();
            with.push(obs.clone());
            assert!(posterior_predictive_loglik(&obs, &with, &prior).unwrap() > base);
        }
    }

    #[test]
    fn prior_from_positions_defaults() {
        let p = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 2.0, 0.0, 0.0, 4.0, 2.0, 4.0]);
        let prior = NiwPrior::from_positions(&p, &PriorOptions::default()).unwrap();
        assert_eq!(prior.mu0_pos.as_slice(), &[1.0, 2.0]);
        assert_eq!(prior.nu, 5.0);
        // var = (4/3, 16/3); psi = var / 5.
        assert!((prior.psi_pos[(0, 0)] - 4.0 / 15.0).abs() < 1e-12);
        assert!((prior.psi_pos[(1, 1)] - 16.0 / 15.0).abs() < 1e-12);
        assert_eq!(prior.psi_pos[(0, 1)], 0.0);
        assert!((prior.inv_gamma().mean() - 0.1).abs() < 1e-12);
    }
}
