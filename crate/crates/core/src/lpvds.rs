//! Stable linear parameter-varying dynamical systems.
//!
//! `xi_dot = sum_k gamma_k(xi) (A_k xi + b_k)` with `b_k = -A_k xi*` and
//! every `A_k + A_k^T` negative definite, so `V = |xi - xi*|^2` is a common
//! Lyapunov function. Each `A_k` is parameterized as
//! `S_k - (L_k L_k^T + eps I)` with `S_k` skew-symmetric and `L_k` lower
//! triangular, which makes the constraint hold for any parameter values.

use std::sync::Mutex;

use argmin::core::{CostFunction, Executor, Gradient, State, TerminationReason};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::damm::{DammComponent, Demonstration};
use crate::error::{Error, Result};
use crate::sphere::{self, UnitVector};
use crate::stats::{Gaussian, LN_2PI};

/// Margin on the symmetric part: `lambda_max((A + A^T) / 2) <= -STABILITY_EPS`.
pub const STABILITY_EPS: f64 = 1e-6;

/// Internal margin, a hair above the public one so that eigen-solver
/// rounding cannot cross it.
const EPS_INTERNAL: f64 = STABILITY_EPS * (1.0 + 1e-3);

/// Gating density of one LTI system.
#[derive(Debug, Clone)]
pub struct MixingComponent {
    pub weight: f64,
    gauss: Gaussian,
    cov: DMatrix<f64>,
    direction: Option<(UnitVector, f64)>,
}

impl PartialEq for MixingComponent {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight
            && self.gauss.mean() == other.gauss.mean()
            && self.cov == other.cov
            && self.direction == other.direction
    }
}

impl MixingComponent {
    pub fn new(
        weight: f64,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        direction: Option<(UnitVector, f64)>,
    ) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::usage(format!("mixing weight {weight} must be positive")));
        }
        if let Some((dir, var)) = &direction {
            if !(*var > 0.0) {
                return Err(Error::usage("directional variance must be positive"));
            }
            if dir.dim() != mean.len() {
                return Err(Error::DimensionMismatch {
                    expected: mean.len(),
                    found: dir.dim(),
                });
            }
        }
        let gauss = Gaussian::new(mean, &cov)?;
        Ok(Self {
            weight,
            gauss,
            cov,
            direction,
        })
    }

    pub fn from_damm(c: &DammComponent) -> Result<Self> {
        Self::new(
            c.weight,
            c.mean_pos().clone(),
            c.cov_pos().clone(),
            Some((c.dir_mean().clone(), c.dir_var())),
        )
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.gauss.mean()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn direction(&self) -> Option<&(UnitVector, f64)> {
        self.direction.as_ref()
    }

    fn translated(&self, shift: &DVector<f64>) -> Result<Self> {
        Self::new(self.weight, self.mean() + shift, self.cov.clone(), self.direction.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingMode {
    /// `gamma_k ∝ pi_k N(xi | mu_k, Sigma_k)`.
    #[default]
    Position,
    /// `gamma_k ∝ pi_k` times the augmented-state density, which also
    /// scores the direction of `xi_dot`.
    Augmented,
}

/// Mixture responsibilities at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    pub gamma: Vec<f64>,
    /// True when every density underflowed and `gamma` is one-hot on the
    /// component with the nearest mean.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpvDsModel {
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    mixing: Vec<MixingComponent>,
    attractor: DVector<f64>,
}

impl LpvDsModel {
    /// Builds `b_k = -A_k xi*` and checks the stability margin of each `A_k`.
    pub fn new(a: Vec<DMatrix<f64>>, mixing: Vec<MixingComponent>, attractor: DVector<f64>) -> Result<Self> {
        let d = attractor.len();
        if a.is_empty() || a.len() != mixing.len() {
            return Err(Error::usage("need one system matrix per mixing component"));
        }
        for (k, (ak, m)) in a.iter().zip(&mixing).enumerate() {
            if ak.shape() != (d, d) || m.mean().len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: ak.nrows().max(m.mean().len()),
                });
            }
            let lam = max_symmetric_eigenvalue(ak);
            if !(lam <= -STABILITY_EPS) {
                return Err(Error::usage(format!(
                    "system {k} is not stable: largest eigenvalue of its symmetric part is {lam:e}"
                )));
            }
        }
        let b = a.iter().map(|ak| -(ak * &attractor)).collect();
        Ok(Self {
            a,
            b,
            mixing,
            attractor,
        })
    }

    pub fn dim(&self) -> usize {
        self.attractor.len()
    }

    pub fn num_components(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[DVector<f64>] {
        &self.b
    }

    pub fn mixing(&self) -> &[MixingComponent] {
        &self.mixing
    }

    pub fn attractor(&self) -> &DVector<f64> {
        &self.attractor
    }

    /// Same dynamics shifted by `shift` in state space.
    pub fn translated(&self, shift: &DVector<f64>) -> Result<Self> {
        LpvDsModel::new(
            self.a.clone(),
            self.mixing.iter().map(|m| m.translated(shift)).collect::<Result<_>>()?,
            &self.attractor + shift,
        )
    }
}

/// `lambda_max((A + A^T) / 2)`.
pub fn max_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.max()
}

/// Euclidean norm that does not overflow for huge entries.
fn scaled_norm(v: &DVector<f64>) -> f64 {
    let s = v.amax();
    if s == 0.0 || !s.is_finite() {
        return s;
    }
    s * (v / s).norm()
}

fn mixing_from_logs(model: &LpvDsModel, logs: Vec<f64>, xi: &DVector<f64>) -> Mixing {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        let nearest = model
            .mixing
            .iter()
            .enumerate()
            .map(|(k, c)| (k, scaled_norm(&(c.mean() - xi))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |p| p.0);
        let mut gamma = vec![0.0; logs.len()];
        gamma[nearest] = 1.0;
        return Mixing {
            gamma,
            fallback: true,
        };
    }
    let mut gamma: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = gamma.iter().sum();
    gamma.iter_mut().for_each(|g| *g /= total);
    Mixing {
        gamma,
        fallback: false,
    }
}

/// Responsibilities `gamma_k(xi)` with a diagnostic fallback flag.
pub fn mixing(model: &LpvDsModel, xi: &DVector<f64>, mode: MixingMode, xi_dot: Option<&DVector<f64>>) -> Result<Mixing> {
    if xi.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: xi.len(),
        });
    }
    let logs: Vec<f64> = match mode {
        MixingMode::Position => model
            .mixing
            .iter()
            .map(|c| c.weight.ln() + c.gauss.log_density(xi.as_slice()))
            .collect(),
        MixingMode::Augmented => {
            let v = xi_dot.ok_or_else(|| Error::usage("augmented mixing needs a velocity"))?;
            if v.len() != model.dim() {
                return Err(Error::DimensionMismatch {
                    expected: model.dim(),
                    found: v.len(),
                });
            }
            let dir = UnitVector::normalize(v.clone())?;
            model
                .mixing
                .iter()
                .map(|c| {
                    let (mu, var) = c
                        .direction
                        .as_ref()
                        .ok_or_else(|| Error::usage("augmented mixing needs directional components"))?;
                    let r = sphere::dist(mu.as_slice(), dir.as_slice());
                    Ok(c.weight.ln() + c.gauss.log_density(xi.as_slice()) - 0.5 * (LN_2PI + var.ln() + r * r / var))
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(mixing_from_logs(model, logs, xi))
}

/// Responsibilities `gamma_k(xi)`; positive and summing to one.
pub fn mixing_weights(
    model: &LpvDsModel,
    xi: &DVector<f64>,
    mode: MixingMode,
    xi_dot: Option<&DVector<f64>>,
) -> Result<Vec<f64>> {
    Ok(mixing(model, xi, mode, xi_dot)?.gamma)
}

/// `sum_k gamma_k(xi) (A_k xi + b_k)`.
pub fn evaluate(
    model: &LpvDsModel,
    xi: &DVector<f64>,
    mode: MixingMode,
    xi_dot: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let gamma = mixing_weights(model, xi, mode, xi_dot)?;
    let mut out = DVector::zeros(model.dim());
    for ((g, a), b) in gamma.iter().zip(&model.a).zip(&model.b) {
        if *g > 0.0 {
            out += (a * xi + b) * *g;
        }
    }
    Ok(out)
}

/// Position-mode velocity without error plumbing, for integrators.
fn velocity(model: &LpvDsModel, xi: &DVector<f64>) -> DVector<f64> {
    evaluate(model, xi, MixingMode::Position, None).expect("dimension checked by caller")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iters: u64,
    /// Gradient tolerance.
    pub grad_tol: f64,
    /// L-BFGS history length.
    pub memory: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            grad_tol: 1e-6,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub objective_init: f64,
    pub objective: f64,
    pub iterations: u64,
    /// Infinity norm of the final gradient.
    pub grad_inf: f64,
    pub converged: bool,
    /// Number of demonstration samples whose responsibilities fell back to
    /// the nearest component.
    pub mixing_fallbacks: usize,
}

/// Fixed-size chunks keep parallel reductions bitwise reproducible.
const CHUNK: usize = 256;

/// Squared-error objective over the demonstration with frozen mixing
/// weights, in terms of the unconstrained `(L_k, S_k)` entries.
///
/// Parameter layout per component: the `d (d + 1) / 2` lower-triangular
/// entries of `L_k` in row-major order, then the `d (d - 1) / 2` strictly
/// lower entries `s_pq` (p > q) with `S_pq = s_pq`, `S_qp = -s_pq`.
#[derive(Debug)]
pub struct Objective {
    d: usize,
    k: usize,
    gamma: Vec<f64>,
    e: Vec<f64>,
    v: Vec<f64>,
    vv: f64,
    m: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    best: Mutex<Option<(f64, Vec<f64>)>>,
}

impl Objective {
    /// `gamma` is N x K row-major; `positions` and `velocities` are N x d.
    pub fn new(
        gamma: Vec<f64>,
        k: usize,
        positions: &DMatrix<f64>,
        velocities: &DMatrix<f64>,
        attractor: &DVector<f64>,
    ) -> Result<Self> {
        let (n, d) = positions.shape();
        if velocities.shape() != (n, d) || gamma.len() != n * k || attractor.len() != d || k == 0 {
            return Err(Error::usage("objective inputs have inconsistent shapes"));
        }
        let mut e = Vec::with_capacity(n * d);
        let mut v = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                e.push(positions[(i, j)] - attractor[j]);
                v.push(velocities[(i, j)]);
            }
        }
        let zero = || (vec![DMatrix::zeros(d, d); k], vec![DMatrix::zeros(d, d); k * k], 0.0);
        let partials: Vec<_> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let (mut m, mut cc, mut vv) = zero();
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let ei = DVector::from_column_slice(&e[i * d..(i + 1) * d]);
                    let vi = DVector::from_column_slice(&v[i * d..(i + 1) * d]);
                    let g = &gamma[i * k..(i + 1) * k];
                    let vet = &vi * ei.transpose();
                    let eet = &ei * ei.transpose();
                    vv += vi.norm_squared();
                    for a in 0..k {
                        if g[a] == 0.0 {
                            continue;
                        }
                        m[a] += &vet * g[a];
                        for b in 0..k {
                            if g[b] != 0.0 {
                                cc[a * k + b] += &eet * (g[a] * g[b]);
                            }
                        }
                    }
                }
                (m, cc, vv)
            })
            .collect();
        let (mut m, mut c, mut vv) = zero();
        for (pm, pc, pv) in partials {
            m.iter_mut().zip(pm).for_each(|(a, b)| *a += b);
            c.iter_mut().zip(pc).for_each(|(a, b)| *a += b);
            vv += pv;
        }
        if !vv.is_finite() || m.iter().chain(&c).any(|x| x.iter().any(|y| !y.is_finite())) {
            return Err(Error::usage("demonstration yields a non-finite objective"));
        }
        Ok(Self {
            d,
            k,
            gamma,
            e,
            v,
            vv,
            m,
            c,
            best: Mutex::new(None),
        })
    }

    pub fn num_params(&self) -> usize {
        self.k * self.d * self.d
    }

    /// Parameters of `A_k = -(1 + eps) I` for every component.
    pub fn initial_params(&self) -> Vec<f64> {
        let d = self.d;
        let mut x = vec![0.0; self.num_params()];
        for k in 0..self.k {
            let mut idx = k * d * d;
            for p in 0..d {
                for q in 0..=p {
                    x[idx] = if p == q { 1.0 } else { 0.0 };
                    idx += 1;
                }
            }
        }
        x
    }

    /// System matrices for a parameter vector.
    pub fn matrices(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        (0..self.k).map(|k| self.matrix(x, k)).collect()
    }

    fn unpack(&self, x: &[f64], k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.d;
        let mut l = DMatrix::zeros(d, d);
        let mut s = DMatrix::zeros(d, d);
        let mut idx = k * d * d;
        for p in 0..d {
            for q in 0..=p {
                l[(p, q)] = x[idx];
                idx += 1;
            }
        }
        for p in 0..d {
            for q in 0..p {
                s[(p, q)] = x[idx];
                s[(q, p)] = -x[idx];
                idx += 1;
            }
        }
        (l, s)
    }

    fn matrix(&self, x: &[f64], k: usize) -> DMatrix<f64> {
        let (l, s) = self.unpack(x, k);
        let p = &l * l.transpose();
        let p = (&p + p.transpose()) * 0.5;
        s - p - DMatrix::identity(self.d, self.d) * EPS_INTERNAL
    }

    /// `J` and its gradient from the precomputed sufficient statistics.
    pub fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (d, k) = (self.d, self.k);
        let a = self.matrices(x);
        let mut j = self.vv;
        let mut grads = Vec::with_capacity(k);
        let mut w = DMatrix::zeros(d, d);
        for p in 0..k {
            // C_pq = C_qp, so W_p = sum_q A_q C_qp serves both terms.
            w.fill(0.0);
            for q in 0..k {
                w.gemm(1.0, &a[q], &self.c[p * k + q], 1.0);
            }
            j += a[p].dot(&w) - 2.0 * a[p].dot(&self.m[p]);
            // dJ/dA_p = -2 M_p + 2 W_p
            grads.push((&w - &self.m[p]) * 2.0);
        }
        let mut out = vec![0.0; self.num_params()];
        for (kk, g) in grads.iter().enumerate() {
            let (l, _) = self.unpack(x, kk);
            let gl = -(g + g.transpose()) * &l;
            let mut idx = kk * d * d;
            for p in 0..d {
                for q in 0..=p {
                    out[idx] = gl[(p, q)];
                    idx += 1;
                }
            }
            for p in 0..d {
                for q in 0..p {
                    out[idx] = g[(p, q)] - g[(q, p)];
                    idx += 1;
                }
            }
        }
        (j, out)
    }

    /// `J` summed observation by observation.
    pub fn direct_value(&self, x: &[f64]) -> f64 {
        let (d, k) = (self.d, self.k);
        let a = self.matrices(x);
        let n = self.e.len() / d;
        (0..n)
            .map(|i| {
                let e = DVector::from_column_slice(&self.e[i * d..(i + 1) * d]);
                let mut f = DVector::zeros(d);
                for kk in 0..k {
                    f += &a[kk] * &e * self.gamma[i * k + kk];
                }
                (DVector::from_column_slice(&self.v[i * d..(i + 1) * d]) - f).norm_squared()
            })
            .sum()
    }

    fn record(&self, x: &[f64], j: f64) {
        let mut best = self.best.lock().expect("poisoned");
        if j.is_finite() && best.as_ref().is_none_or(|b| j < b.0) {
            *best = Some((j, x.to_vec()));
        }
    }
}

struct Problem<'a>(&'a Objective);

impl CostFunction for Problem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let (j, _) = self.0.value_and_gradient(x);
        self.0.record(x, j);
        Ok(j)
    }
}

impl Gradient for Problem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, x: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.0.value_and_gradient(x).1)
    }
}

/// Position-mode responsibilities of every demonstration sample, N x K
/// row-major, and the number of fallbacks.
fn demo_gamma(comps: &[MixingComponent], demo: &Demonstration) -> (Vec<f64>, usize) {
    let k = comps.len();
    let probe = LpvDsModel {
        a: vec![DMatrix::zeros(demo.dim(), demo.dim()); k],
        b: vec![DVector::zeros(demo.dim()); k],
        mixing: comps.to_vec(),
        attractor: demo.attractor().clone(),
    };
    let rows: Vec<Mixing> = (0..demo.len())
        .into_par_iter()
        .map(|i| mixing(&probe, &demo.position(i), MixingMode::Position, None).expect("dimensions match"))
        .collect();
    let fallbacks = rows.iter().filter(|r| r.fallback).count();
    (rows.into_iter().flat_map(|r| r.gamma).collect(), fallbacks)
}

/// Fit one stable system per mixing component by minimizing
/// `J = sum_i |xi_dot_i - f(xi_i)|^2` over the demonstration.
pub fn fit(mixing: Vec<MixingComponent>, demo: &Demonstration, config: &FitConfig) -> Result<(LpvDsModel, FitReport)> {
    if mixing.is_empty() {
        return Err(Error::usage("no mixing components to fit"));
    }
    if let Some(m) = mixing.iter().find(|m| m.mean().len() != demo.dim()) {
        return Err(Error::DimensionMismatch {
            expected: demo.dim(),
            found: m.mean().len(),
        });
    }
    let k = mixing.len();
    let (gamma, fallbacks) = demo_gamma(&mixing, demo);
    let objective = Objective::new(gamma, k, demo.positions(), demo.velocities(), demo.attractor())?;
    let x0 = objective.initial_params();
    let (j0, _) = objective.value_and_gradient(&x0);
    if !j0.is_finite() {
        return Err(Error::usage("objective is not finite at the initial point"));
    }
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), config.memory)
        .with_tolerance_grad(config.grad_tol)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| Error::numerical(e.to_string()))?;
    let result = Executor::new(Problem(&objective), solver)
        .configure(|s| s.param(x0.clone()).max_iters(config.max_iters))
        .run();
    let (mut x, mut iterations) = (x0.clone(), 0);
    if let Ok(res) = &result {
        let state = res.state();
        if let Some(p) = state.get_best_param() {
            x = p.clone();
        }
        iterations = state.get_iter();
    }
    // The solver can stop with a line-search error near the optimum; the
    // best point evaluated so far is still valid.
    if let Some((jb, xb)) = objective.best.lock().expect("poisoned").take() {
        if jb < objective.value_and_gradient(&x).0 {
            x = xb;
        }
    }
    let (j, g) = objective.value_and_gradient(&x);
    let grad_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !j.is_finite() {
        return Err(Error::numerical("objective diverged"));
    }
    let converged = grad_inf <= config.grad_tol
        || matches!(&result, Ok(r) if r.state().get_termination_reason() == Some(&TerminationReason::SolverConverged));
    let model = LpvDsModel::new(objective.matrices(&x), mixing, demo.attractor().clone())?;
    Ok((
        model,
        FitReport {
            objective_init: j0,
            objective: j,
            iterations,
            grad_inf,
            converged,
            mixing_fallbacks: fallbacks,
        },
    ))
}

/// Mixing components from sampled DAMM components.
pub fn mixing_from_damm(components: &[DammComponent]) -> Result<Vec<MixingComponent>> {
    components.iter().map(MixingComponent::from_damm).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    /// T x d, starting with the initial state.
    pub states: DMatrix<f64>,
    /// T x d, the model velocity at each state.
    pub velocities: DMatrix<f64>,
    pub dt: f64,
    pub converged: bool,
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Integration hit a non-finite state; `partial` holds the steps so far.
#[derive(Debug, Clone, thiserror::Error)]
#[error("integration produced a non-finite state after {} steps", .partial.len())]
pub struct IntegrationError {
    pub partial: RolloutTrace,
}

impl From<IntegrationError> for Error {
    fn from(e: IntegrationError) -> Self {
        Error::Numerical(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub conv_tol: f64,
    pub integrator: Integrator,
}

impl RolloutConfig {
    pub fn new(dt: f64, max_steps: usize, conv_tol: f64) -> Self {
        Self {
            dt,
            max_steps,
            conv_tol,
            integrator: Integrator::Rk4,
        }
    }
}

/// Integrate from `xi0` until within `conv_tol` of the attractor or
/// `max_steps` steps have been taken.
pub fn rollout(
    model: &LpvDsModel,
    xi0: &DVector<f64>,
    config: &RolloutConfig,
) -> std::result::Result<RolloutTrace, RolloutFailure> {
    let dt = config.dt;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(RolloutFailure::Invalid(Error::usage("dt must be positive")));
    }
    if xi0.len() != model.dim() {
        return Err(RolloutFailure::Invalid(Error::DimensionMismatch {
            expected: model.dim(),
            found: xi0.len(),
        }));
    }
    let mut states = vec![xi0.clone()];
    let mut vels = vec![velocity(model, xi0)];
    let star = model.attractor();
    let mut converged = (xi0 - star).norm() <= config.conv_tol;
    let pack = |states: &[DVector<f64>], vels: &[DVector<f64>], converged| RolloutTrace {
        states: DMatrix::from_fn(states.len(), model.dim(), |i, j| states[i][j]),
        velocities: DMatrix::from_fn(vels.len(), model.dim(), |i, j| vels[i][j]),
        dt,
        converged,
    };
    let mut step = 0;
    while !converged && step < config.max_steps {
        let x = states.last().expect("nonempty");
        let k1 = vels.last().expect("nonempty").clone();
        let next = match config.integrator {
            Integrator::Euler => x + &k1 * dt,
            Integrator::Rk4 => {
                let k2 = velocity(model, &(x + &k1 * (dt / 2.0)));
                let k3 = velocity(model, &(x + &k2 * (dt / 2.0)));
                let k4 = velocity(model, &(x + &k3 * dt));
                x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(RolloutFailure::NonFinite(IntegrationError {
                partial: pack(&states, &vels, false),
            }));
        }
        converged = (&next - star).norm() <= config.conv_tol;
        vels.push(velocity(model, &next));
        states.push(next);
        step += 1;
    }
    Ok(pack(&states, &vels, converged))
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutFailure {
    #[error(transparent)]
    Invalid(Error),
    #[error(transparent)]
    NonFinite(IntegrationError),
}

impl From<RolloutFailure> for Error {
    fn from(e: RolloutFailure) -> Self {
        match e {
            RolloutFailure::Invalid(e) => e,
            RolloutFailure::NonFinite(e) => e.into(),
        }
    }
}
