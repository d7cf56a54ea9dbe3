//! Gaussian, Normal-Inverse-Wishart and Inverse-Gamma building blocks.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative ridge added to a covariance before factorization.
pub const COV_RIDGE: f64 = 1e-10;

/// Symmetrize and add `COV_RIDGE * trace/d` to the diagonal.
pub fn regularize(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    let mut s = (cov + cov.transpose()) * 0.5;
    let ridge = COV_RIDGE * s.trace().abs() / d as f64;
    for i in 0..d {
        s[(i, i)] += ridge;
    }
    s
}

/// Log of the multivariate gamma function Gamma_d(a).
pub fn ln_mv_gamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * PI.ln()
        + (0..d).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

/// A multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    /// Builds the density after regularizing `cov`.
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: cov.nrows(),
            });
        }
        let reg = regularize(cov);
        let chol = Cholesky::new(reg)
            .ok_or_else(|| Error::numerical("covariance is not positive definite"))?
            .unpack();
        let log_det = 2.0 * chol.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::numerical("covariance has a non-finite determinant"));
        }
        Ok(Self {
            mean,
            chol,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `(x - mu)^T Sigma^-1 (x - mu)` by forward substitution.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut buf = [0.0f64; 8];
        let mut heap;
        let y: &mut [f64] = if d <= buf.len() {
            &mut buf[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut acc = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * y[j];
            }
            y[i] = s / self.chol[(i, i)];
            acc += y[i] * y[i];
        }
        acc
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(x)
    }
}

/// Normal-Inverse-Wishart hyperparameters `(mu0, kappa, nu, psi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Niw {
    pub mu0: DVector<f64>,
    pub kappa: f64,
    pub nu: f64,
    pub psi: DMatrix<f64>,
}

/// Running sufficient statistics of a set of vectors.
#[derive(Debug, Clone)]
pub struct SuffStats {
    pub n: usize,
    pub sum: DVector<f64>,
    pub sum_sq: DMatrix<f64>,
}

impl SuffStats {
    pub fn new(d: usize) -> Self {
        Self {
            n: 0,
            sum: DVector::zeros(d),
            sum_sq: DMatrix::zeros(d, d),
        }
    }

    pub fn from_rows<'a>(d: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut s = Self::new(d);
        for r in rows {
            s.add(r);
        }
        s
    }

    pub fn add(&mut self, x: &[f64]) {
        let d = self.sum.len();
        self.n += 1;
        for i in 0..d {
            self.sum[i] += x[i];
            for j in 0..d {
                self.sum_sq[(i, j)] += x[i] * x[j];
            }
        }
    }

    pub fn mean(&self) -> Option<DVector<f64>> {
        (self.n > 0).then(|| &self.sum / self.n as f64)
    }

    /// Centered scatter matrix `sum (x - xbar)(x - xbar)^T`.
    pub fn scatter(&self) -> DMatrix<f64> {
        match self.mean() {
            Some(m) => &self.sum_sq - &m * m.transpose() * self.n as f64,
            None => DMatrix::zeros(self.sum.len(), self.sum.len()),
        }
    }
}

impl Niw {
    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// Conjugate update given data statistics.
    pub fn posterior(&self, stats: &SuffStats) -> Niw {
        let n = stats.n as f64;
        if stats.n == 0 {
            return self.clone();
        }
        let xbar = stats.mean().expect("nonempty");
        let kappa = self.kappa + n;
        let nu = self.nu + n;
        let mu0 = (&self.mu0 * self.kappa + &stats.sum) / kappa;
        let diff = &xbar - &self.mu0;
        let mut psi = &self.psi + stats.scatter() + &diff * diff.transpose() * (self.kappa * n / kappa);
        psi = (&psi + psi.transpose()) * 0.5;
        Niw { mu0, kappa, nu, psi }
    }

    /// Log marginal likelihood of the data summarized by `stats`.
    pub fn log_marginal(&self, stats: &SuffStats) -> f64 {
        let d = self.dim();
        let df = d as f64;
        let n = stats.n as f64;
        let post = self.posterior(stats);
        -(n * df / 2.0) * PI.ln() + ln_mv_gamma(d, post.nu / 2.0) - ln_mv_gamma(d, self.nu / 2.0)
            + (self.nu / 2.0) * log_det_spd(&self.psi)
            - (post.nu / 2.0) * log_det_spd(&post.psi)
            + (df / 2.0) * (self.kappa.ln() - post.kappa.ln())
    }

    /// Posterior predictive (multivariate Student-t) log density of `x`
    /// given this distribution as the current posterior.
    pub fn log_predictive(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let df = d as f64;
        let dof = self.nu - df + 1.0;
        let scale = &self.psi * ((self.kappa + 1.0) / (self.kappa * dof));
        student_t_log_density(x, &self.mu0, &scale, dof)
    }

    /// Draw `(mu, Sigma)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let sigma = sample_inverse_wishart(&self.psi, self.nu, rng)?;
        let chol = Cholesky::new(regularize(&sigma))
            .ok_or_else(|| Error::numerical("sampled covariance is not positive definite"))?;
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        let mu = &self.mu0 + chol.l() * z / self.kappa.sqrt();
        Ok((mu, sigma))
    }
}

fn log_det_spd(m: &DMatrix<f64>) -> f64 {
    match Cholesky::new(regularize(m)) {
        Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>(),
        None => f64::NAN,
    }
}

/// Multivariate Student-t log density with location `mu`, scale `scale`,
/// and `dof` degrees of freedom.
pub fn student_t_log_density(x: &[f64], mu: &DVector<f64>, scale: &DMatrix<f64>, dof: f64) -> f64 {
    let d = mu.len() as f64;
    let g = match Gaussian::new(mu.clone(), scale) {
        Ok(g) => g,
        Err(_) => return f64::NEG_INFINITY,
    };
    let delta = g.mahalanobis_sq(x);
    // log_norm of the Gaussian carries -0.5 (d ln 2pi + ln|S|).
    let half_log_det = -g.log_norm - 0.5 * d * LN_2PI;
    ln_gamma((dof + d) / 2.0) - ln_gamma(dof / 2.0) - (d / 2.0) * (dof * PI).ln() - half_log_det
        - ((dof + d) / 2.0) * (delta / dof).ln_1p()
}

/// Draw from an inverse-Wishart via the Bartlett decomposition.
///
/// With `psi = C C^T` and `A` the Bartlett factor of `W(I, nu)`,
/// `Sigma = (C A^-T)(C A^-T)^T`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    psi: &DMatrix<f64>,
    nu: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = psi.nrows();
    if nu <= d as f64 - 1.0 {
        return Err(Error::usage(format!(
            "inverse-Wishart needs nu > d - 1 (nu = {nu}, d = {d})"
        )));
    }
    let c = Cholesky::<f64, Dyn>::new(regularize(psi))
        .ok_or_else(|| Error::numerical("scale matrix is not positive definite"))?
        .unpack();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(nu - i as f64)
            .map_err(|e| Error::numerical(format!("chi-squared: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    // T = C A^-T  <=>  A T^T = C^T  (A lower triangular).
    let tt = a
        .solve_lower_triangular(&c.transpose())
        .ok_or_else(|| Error::numerical("singular Bartlett factor"))?;
    let t = tt.transpose();
    let sigma = &t * t.transpose();
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Inverse-gamma hyperparameters for the variance of a zero-mean normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    /// Update with `n` observations whose squares sum to `sum_sq`.
    pub fn posterior(&self, n: usize, sum_sq: f64) -> InvGamma {
        InvGamma {
            shape: self.shape + n as f64 / 2.0,
            scale: self.scale + sum_sq / 2.0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.scale / (self.shape - 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let g = Gamma::new(self.shape, 1.0 / self.scale)
            .map_err(|e| Error::numerical(format!("gamma: {e}")))?;
        Ok(1.0 / g.sample(rng))
    }

    /// Log marginal of `n` zero-mean normal observations with squares
    /// summing to `sum_sq`.
    pub fn log_marginal(&self, n: usize, sum_sq: f64) -> f64 {
        let post = self.posterior(n, sum_sq);
        ln_gamma(post.shape) - ln_gamma(self.shape) + self.shape * self.scale.ln()
            - post.shape * post.scale.ln()
            - n as f64 / 2.0 * LN_2PI
    }

    /// Predictive log density of one more observation `r`: a Student-t with
    /// `2 shape` degrees of freedom and squared scale `scale / shape`.
    pub fn log_predictive(&self, r: f64) -> f64 {
        let (a, b) = (self.shape, self.scale);
        ln_gamma(a + 0.5) - ln_gamma(a) - 0.5 * (LN_2PI + b.ln()) - (a + 0.5) * (r * r / (2.0 * b)).ln_1p()
    }
}

/// Log of a sum of exponentials.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sample an index from unnormalized log-probabilities using one uniform.
pub(crate) fn sample_log_categorical(logp: &[f64], u: f64) -> usize {
    let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logp.iter().map(|x| (x - m).exp()).sum();
    let mut target = u * total;
    for (k, x) in logp.iter().enumerate() {
        target -= (x - m).exp();
        if target < 0.0 {
            return k;
        }
    }
    // Rounding at the top end: last index with nonzero mass.
    logp.iter()
        .rposition(|x| (x - m).exp() > 0.0)
        .unwrap_or(logp.len() - 1)
}

/// Dirichlet draw with the given concentration parameters.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut g: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .map(|d| d.sample(rng))
                .map_err(|e| Error::numerical(format!("gamma: {e}")))
        })
        .collect::<Result<_>>()?;
    let total: f64 = g.iter().sum();
    if !(total > 0.0) {
        return Err(Error::numerical("Dirichlet draw underflowed"));
    }
    g.iter_mut().for_each(|x| *x /= total);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn gaussian_density_at_mean() {
        let g = Gaussian::new(DVector::zeros(3), &DMatrix::identity(3, 3)).unwrap();
        assert!((g.log_density(&[0.0, 0.0, 0.0]) + 1.5 * LN_2PI).abs() < 1e-9);
    }

    #[test]
    fn gaussian_matches_direct_formula() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let mu = DVector::from_vec(vec![1.0, -1.0]);
        let g = Gaussian::new(mu.clone(), &cov).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.4]);
        let diff = &x - &mu;
        let q = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[(0, 0)];
        let expected = -0.5 * (2.0 * LN_2PI + cov.determinant().ln() + q);
        assert!((g.log_density(x.as_slice()) - expected).abs() < 1e-8);
    }

    #[test]
    fn singular_covariance_is_regularized() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Gaussian::new(DVector::zeros(2), &cov).is_ok());
        assert!(Gaussian::new(DVector::zeros(2), &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn inverse_wishart_mean() {
        let psi = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let nu = 8.0;
        let mut rng = stream(1, &[]);
        let n = 40_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            acc += sample_inverse_wishart(&psi, nu, &mut rng).unwrap();
        }
        let mean = acc / n as f64;
        let expected = &psi / (nu - 3.0);
        assert!((mean - &expected).norm() / expected.norm() < 0.02);
    }

    #[test]
    fn mv_gamma_reduces_to_gamma() {
        assert!((ln_mv_gamma(1, 3.7) - ln_gamma(3.7)).abs() < 1e-12);
    }

    #[test]
    fn niw_marginal_is_product_of_predictives() {
        let prior = Niw {
            mu0: DVector::from_vec(vec![0.5, -0.2]),
            kappa: 0.7,
            nu: 5.0,
            psi: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
        };
        let xs = [[0.1, 0.3], [1.2, -0.4], [-0.7, 0.9], [0.4, 0.4]];
        let mut stats = SuffStats::new(2);
        let mut chain = 0.0;
        for x in &xs {
            chain += prior.posterior(&stats).log_predictive(x);
            stats.add(x);
        }
        assert!((chain - prior.log_marginal(&stats)).abs() < 1e-9);
    }

    #[test]
    fn inv_gamma_marginal_is_product_of_predictives() {
        let prior = InvGamma { shape: 2.0, scale: 0.1 };
        let rs = [0.1, 0.25, 0.0, 0.4];
        let mut chain = 0.0;
        let mut ss = 0.0;
        for (i, r) in rs.iter().enumerate() {
            chain += prior.posterior(i, ss).log_predictive(*r);
            ss += r * r;
        }
        assert!((chain - prior.log_marginal(rs.len(), ss)).abs() < 1e-12);
    }

    #[test]
    fn categorical_sampling_edges() {
        assert_eq!(sample_log_categorical(&[0.0], 0.999), 0);
        assert_eq!(sample_log_categorical(&[0.0, f64::NEG_INFINITY], 0.999_999), 0);
        assert_eq!(sample_log_categorical(&[f64::NEG_INFINITY, 0.0], 0.0), 1);
        let lp = [(0.2f64).ln(), (0.8f64).ln()];
        assert_eq!(sample_log_categorical(&lp, 0.1), 0);
        assert_eq!(sample_log_categorical(&lp, 0.3), 1);
    }

    #[test]
    fn log_sum_exp_basic() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
