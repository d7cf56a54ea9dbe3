//! Geometry of the unit sphere S^{d-1} embedded in R^d.
//!
//! Points are [`UnitVector`]s, tangent vectors carry their base point. The
//! slice-level helpers (`dist`, `log_into`) are used on hot paths where
//! allocating a `TangentVector` per call would dominate the cost.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a unit vector's norm from one.
pub const UNIT_TOL: f64 = 1e-9;
/// Maximum |v . base| for a vector to count as tangent at `base`.
pub const TANGENT_TOL: f64 = 1e-8;
/// Log map refuses pairs with `p . q <= -1 + ANTIPODAL_TOL`.
pub const ANTIPODAL_TOL: f64 = 1e-9;

const EXP_ZERO_NORM: f64 = 1e-12;
const FRECHET_STEP_TOL: f64 = 1e-9;
const FRECHET_MAX_ITERS: usize = 100;
// Large enough that the nudged base clears ANTIPODAL_TOL (1 - cos(1e-4) = 5e-9).
const ANTIPODAL_NUDGE: f64 = 1e-4;

/// A point on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(DVector<f64>);

impl UnitVector {
    /// Wrap a vector that is already unit norm (within [`UNIT_TOL`]).
    pub fn new(coords: DVector<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::usage("unit vectors need dimension >= 2"));
        }
        let n = coords.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::usage(format!("vector norm {n} is not 1")));
        }
        Ok(Self(coords))
    }

    /// Normalize an arbitrary nonzero vector.
    pub fn normalize(coords: DVector<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::usage("unit vectors need dimension >= 2"));
        }
        let n = coords.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Degenerate("cannot normalize a zero vector".into()));
        }
        Ok(Self(coords / n))
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::normalize(DVector::from_column_slice(coords))
    }

    /// The i-th standard basis vector of R^dim.
    pub fn axis(dim: usize, i: usize) -> Self {
        assert!(dim >= 2 && i < dim);
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn negated(&self) -> Self {
        Self(-&self.0)
    }

    /// Rotate/reflect by an orthogonal matrix.
    pub fn transformed(&self, rotation: &DMatrix<f64>) -> Result<Self> {
        Self::normalize(rotation * &self.0)
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(v))
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(u: UnitVector) -> Self {
        u.0.as_slice().to_vec()
    }
}

/// A vector in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: DVector<f64>,
    base: UnitVector,
}

impl TangentVector {
    pub fn new(base: UnitVector, coords: DVector<f64>) -> Result<Self> {
        check_dims(base.dim(), coords.len())?;
        if coords.dot(base.coords()).abs() > TANGENT_TOL {
            return Err(Error::usage("vector is not tangent at the base point"));
        }
        Ok(Self { coords, base })
    }

    /// Project an ambient vector onto the tangent space at `base`.
    pub fn project(base: UnitVector, ambient: &DVector<f64>) -> Result<Self> {
        check_dims(base.dim(), ambient.len())?;
        let coords = ambient - base.coords() * ambient.dot(base.coords());
        Ok(Self { coords, base })
    }

    pub fn zero(base: UnitVector) -> Self {
        let coords = DVector::zeros(base.dim());
        Self { coords, base }
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn base(&self) -> &UnitVector {
        &self.base
    }

    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Angle between two unit vectors given as slices.
///
/// Uses `atan2(|q - (p.q) p|, p.q)`, which agrees with `acos(clamp(p.q))`
/// but keeps full precision for nearly identical or nearly antipodal pairs.
#[inline]
pub fn dist(p: &[f64], q: &[f64]) -> f64 {
    let c = dot(p, q);
    let s2: f64 = p
        .iter()
        .zip(q)
        .map(|(pi, qi)| {
            let r = qi - c * pi;
            r * r
        })
        .sum();
    s2.sqrt().atan2(c.clamp(-1.0, 1.0))
}

/// Writes `log_p(q)` into `out`. Fails for (near-)antipodal pairs.
pub(crate) fn log_into(p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
    let c = dot(p, q);
    if c <= -1.0 + ANTIPODAL_TOL {
        return Err(Error::Degenerate(
            "logarithmic map of an antipodal point is not unique".into(),
        ));
    }
    let mut s2 = 0.0;
    for ((o, pi), qi) in out.iter_mut().zip(p).zip(q) {
        *o = qi - c * pi;
        s2 += *o * *o;
    }
    let s = s2.sqrt();
    if s == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return Ok(());
    }
    let theta = s.atan2(c);
    let scale = theta / s;
    out.iter_mut().for_each(|o| *o *= scale);
    Ok(())
}

/// Writes `exp_p(v)` into `out` and renormalizes it.
pub(crate) fn exp_into(p: &[f64], v: &[f64], out: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n < EXP_ZERO_NORM {
        out.copy_from_slice(p);
        return;
    }
    let (s, c) = n.sin_cos();
    for ((o, pi), vi) in out.iter_mut().zip(p).zip(v) {
        *o = pi * c + vi * (s / n);
    }
    let m = dot(out, out).sqrt();
    out.iter_mut().for_each(|o| *o /= m);
}

/// Geodesic (great-circle) distance, in `[0, pi]`.
pub fn geodesic_distance(p: &UnitVector, q: &UnitVector) -> Result<f64> {
    check_dims(p.dim(), q.dim())?;
    Ok(dist(p.as_slice(), q.as_slice()))
}

/// Logarithmic map: the tangent vector at `p` pointing along the geodesic to
/// `q`, with length equal to the geodesic distance.
pub fn log_map(p: &UnitVector, q: &UnitVector) -> Result<TangentVector> {
    check_dims(p.dim(), q.dim())?;
    let mut out = vec![0.0; p.dim()];
    log_into(p.as_slice(), q.as_slice(), &mut out)?;
    Ok(TangentVector {
        coords: DVector::from_vec(out),
        base: p.clone(),
    })
}

/// Exponential map: follow the geodesic from `p` along `v` for `|v|`.
pub fn exp_map(p: &UnitVector, v: &TangentVector) -> Result<UnitVector> {
    check_dims(p.dim(), v.coords.len())?;
    let mut out = vec![0.0; p.dim()];
    exp_into(p.as_slice(), v.coords.as_slice(), &mut out);
    Ok(UnitVector(DVector::from_vec(out)))
}

/// Result of the iterative Frechet mean.
#[derive(Debug, Clone)]
pub struct FrechetMean {
    pub mean: UnitVector,
    pub iterations: usize,
    /// False when the iteration limit was hit before the step fell below
    /// tolerance; `mean` then holds the last iterate.
    pub converged: bool,
}

/// Weighted Frechet (Karcher) mean by the fixed point
/// `mu <- exp_mu(weighted mean of log_mu(q_i))`.
pub fn frechet_mean(points: &[UnitVector], weights: Option<&[f64]>) -> Result<FrechetMean> {
    let first = points
        .first()
        .ok_or_else(|| Error::usage("Frechet mean of an empty set"))?;
    let dim = first.dim();
    for p in points {
        check_dims(dim, p.dim())?;
    }
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                found: w.len(),
            });
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::usage("weights must be nonnegative with a positive sum"));
        }
    }
    let flat: Vec<f64> = points.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
    let (mean, iterations, converged) = frechet_mean_flat(&flat, dim, weights)?;
    Ok(FrechetMean {
        mean: UnitVector(DVector::from_vec(mean)),
        iterations,
        converged,
    })
}

/// Frechet mean of points stored row-wise in `flat` (each row of length `dim`).
pub(crate) fn frechet_mean_flat(
    flat: &[f64],
    dim: usize,
    weights: Option<&[f64]>,
) -> Result<(Vec<f64>, usize, bool)> {
    frechet_mean_rows(flat.chunks_exact(dim), dim, weights)
}

/// Frechet mean over an iterator of rows; the iterator must be cloneable so
/// it can be walked once per fixed-point step.
pub(crate) fn frechet_mean_rows<'a, I>(
    rows: I,
    dim: usize,
    weights: Option<&[f64]>,
) -> Result<(Vec<f64>, usize, bool)>
where
    I: Iterator<Item = &'a [f64]> + Clone,
{
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);

    // Start at the normalized Euclidean mean, or the first point if the
    // points nearly cancel.
    let mut mu = vec![0.0; dim];
    let mut total_w = 0.0;
    let mut first: Option<&[f64]> = None;
    for (i, q) in rows.clone().enumerate() {
        if first.is_none() {
            first = Some(q);
        }
        let w = weight(i);
        total_w += w;
        for (m, x) in mu.iter_mut().zip(q) {
            *m += w * x;
        }
    }
    let first = first.ok_or_else(|| Error::usage("Frechet mean of an empty set"))?;
    let n = dot(&mu, &mu).sqrt() / total_w;
    if n < 1e-6 {
        mu.copy_from_slice(first);
    } else {
        let m = dot(&mu, &mu).sqrt();
        mu.iter_mut().for_each(|x| *x /= m);
    }

    let mut step = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    for it in 1..=FRECHET_MAX_ITERS {
        if mean_log(&mu, rows.clone(), &weight, total_w, &mut step, &mut tmp).is_err() {
            nudge(&mut mu);
            mean_log(&mu, rows.clone(), &weight, total_w, &mut step, &mut tmp)?;
        }
        exp_into(&mu, &step, &mut next);
        std::mem::swap(&mut mu, &mut next);
        if dot(&step, &step).sqrt() <= FRECHET_STEP_TOL {
            return Ok((mu, it, true));
        }
    }
    Ok((mu, FRECHET_MAX_ITERS, false))
}

fn mean_log<'a, I, W>(
    mu: &[f64],
    rows: I,
    weight: &W,
    total_w: f64,
    step: &mut [f64],
    tmp: &mut [f64],
) -> Result<()>
where
    I: Iterator<Item = &'a [f64]>,
    W: Fn(usize) -> f64,
{
    step.iter_mut().for_each(|s| *s = 0.0);
    for (i, q) in rows.enumerate() {
        let w = weight(i);
        if w == 0.0 {
            continue;
        }
        log_into(mu, q, tmp)?;
        for (s, t) in step.iter_mut().zip(tmp.iter()) {
            *s += w * t;
        }
    }
    step.iter_mut().for_each(|s| *s /= total_w);
    Ok(())
}

/// Move `mu` by a tiny step along the coordinate axis it is least aligned
/// with, then renormalize.
fn nudge(mu: &mut [f64]) {
    let axis = mu
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    mu[axis] += ANTIPODAL_NUDGE;
    let m = dot(mu, mu).sqrt();
    mu.iter_mut().for_each(|x| *x /= m);
}

/// Scalar directional variance `(1/(N-1)) sum |log_mean(q_i)|^2`.
pub fn directional_variance(points: &[UnitVector], mean: &UnitVector) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::usage("directional variance needs at least two points"));
    }
    let mut acc = 0.0;
    for q in points {
        check_dims(mean.dim(), q.dim())?;
        let d = dist(mean.as_slice(), q.as_slice());
        acc += d * d;
    }
    Ok(acc / (points.len() - 1) as f64)
}

/// Tangent-space covariance `(1/(N-1)) sum log(q_i) log(q_i)^T`.
///
/// Kept for completeness; the mixture model only uses the scalar variance.
pub fn riemannian_covariance(points: &[UnitVector], mean: &UnitVector) -> Result<DMatrix<f64>> {
    if points.len() < 2 {
        return Err(Error::usage("Riemannian covariance needs at least two points"));
    }
    let dim = mean.dim();
    let mut cov = DMatrix::zeros(dim, dim);
    for q in points {
        let v = log_map(mean, q)?;
        cov.ger(1.0, v.coords(), v.coords(), 1.0);
    }
    Ok(cov / (points.len() - 1) as f64)
}
