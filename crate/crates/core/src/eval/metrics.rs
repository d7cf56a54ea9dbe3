//! Accuracy metrics for learned dynamics and clusterings.

use nalgebra::DMatrix;

use crate::damm::Demonstration;
use crate::error::{Error, Result};
use crate::lpvds::{evaluate, LpvDsModel, MixingMode};

fn predictions(model: &LpvDsModel, demo: &Demonstration) -> Result<Vec<nalgebra::DVector<f64>>> {
    if model.dim() != demo.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: demo.dim(),
        });
    }
    (0..demo.len())
        .map(|i| evaluate(model, &demo.position(i), MixingMode::Position, None))
        .collect()
}

/// Mean velocity-error norm `(1/N) sum_i |xi_dot_i - f(xi_i)|`.
///
/// Named after the benchmark's "RMSE" column, whose formula is this mean
/// of norms.
pub fn rmse(model: &LpvDsModel, demo: &Demonstration) -> Result<f64> {
    let f = predictions(model, demo)?;
    let total: f64 = f
        .iter()
        .enumerate()
        .map(|(i, fi)| (demo.velocity(i) - fi).norm())
        .sum();
    Ok(total / demo.len() as f64)
}

/// `|1 - cos|` between a prediction and a reference velocity. A zero
/// prediction scores 1.
pub fn cosine_error(prediction: &[f64], reference: &[f64]) -> f64 {
    let dot: f64 = prediction.iter().zip(reference).map(|(a, b)| a * b).sum();
    let np = prediction.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nr = reference.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 {
        return 1.0;
    }
    (1.0 - (dot / (np * nr)).clamp(-1.0, 1.0)).abs()
}

/// Mean `|1 - cos(f(xi_i), xi_dot_i)|` over samples with nonzero
/// reference velocity.
pub fn edot(model: &LpvDsModel, demo: &Demonstration) -> Result<f64> {
    let f = predictions(model, demo)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, fi) in f.iter().enumerate() {
        let r = demo.velocity(i);
        if r.norm() > 0.0 {
            total += cosine_error(fi.as_slice(), r.as_slice());
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::usage("every reference velocity is zero"));
    }
    Ok(total / n as f64)
}

/// Dynamic time warping distance between two series (rows are samples)
/// with Euclidean point cost and steps (1,0), (0,1), (1,1).
pub fn dtwd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Err(Error::usage("DTW needs two nonempty series"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    let cost = |i: usize, j: usize| (a.row(i) - b.row(j)).norm();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = best + cost(i, j);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0usize; ka * kb];
    let (mut ra, mut rb) = (vec![0usize; ka], vec![0usize; kb]);
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        ra[x] += 1;
        rb[y] += 1;
    }
    let c2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&x| c2(x)).sum();
    let sa: f64 = ra.iter().map(|&x| c2(x)).sum();
    let sb: f64 = rb.iter().map(|&x| c2(x)).sum();
    let expected = sa * sb / c2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
