//! Seeded synthetic demonstrations converging to the origin.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::damm::Demonstration;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Heading swing of the S-curve in radians. Headings stay within about 70
/// degrees of the direction to the attractor, which a system stable under
/// `|x - x*|^2` can follow.
const S_SWING: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    /// Straight approach.
    Line,
    /// Spiral-in whose heading swings one way and back.
    SCurve,
    /// Zigzag: the heading flips several times on the way in, so nearby
    /// samples on adjacent legs move in very different directions.
    MultiBehavior,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Line, Shape::SCurve, Shape::MultiBehavior];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Line => "line",
            Shape::SCurve => "s-curve",
            Shape::MultiBehavior => "multi-behavior",
        }
    }

    /// Point at path parameter `s` in [0, 1], before per-demo variation.
    fn point(self, s: f64, scale: f64, phase: f64) -> [f64; 2] {
        let (r, phi) = match self {
            Shape::Line => return [-scale * (1.0 - s), 0.5 * scale * (1.0 - s)],
            Shape::SCurve => (scale * (1.0 - s), PI + phase + S_SWING * (2.0 * PI * s).sin()),
            Shape::MultiBehavior => {
                let legs = 4.0;
                let u = (s * legs).fract();
                let tri = if ((s * legs) as u64).is_multiple_of(2) { u } else { 1.0 - u };
                (scale * (1.0 - s), 0.5 * PI + phase + 1.2 * (tri - 0.5))
            }
        };
        [r * phi.cos(), r * phi.sin()]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown shape {s:?} (expected line, s-curve or multi-behavior)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub demos: usize,
    pub samples: usize,
    /// Duration of one demonstration in seconds.
    pub duration: f64,
    /// Relative spread of the per-demo scale and absolute spread (rad) of
    /// the per-demo phase.
    pub spread: f64,
    /// Standard deviation of additive position noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            demos: 3,
            samples: 150,
            duration: 3.0,
            spread: 0.05,
            noise: 1e-3,
        }
    }
}

/// Sample `config.demos` noisy copies of `shape`. Time runs uniformly and
/// the path parameter is `s = 1 - (1 - t/T)^2`, so each demo slows down to
/// rest at the origin. Velocities are central differences of the noisy
/// positions.
pub fn generate(shape: Shape, seed: u64, config: &SyntheticConfig) -> Result<Demonstration> {
    if config.demos == 0 || config.samples < 3 || !(config.duration > 0.0) {
        return Err(Error::usage("need at least one demo of three samples and a positive duration"));
    }
    let n = config.demos * config.samples;
    let dt = config.duration / (config.samples - 1) as f64;
    let mut pos = DMatrix::zeros(n, 2);
    let mut boundaries = Vec::new();
    for demo in 0..config.demos {
        let mut rng = rng::stream(seed, &[demo as u64, tag::INIT]);
        let gauss = |rng: &mut rng::StreamRng| -> f64 { rng.sample(StandardNormal) };
        let scale = 1.0 + config.spread * gauss(&mut rng);
        let phase = config.spread * gauss(&mut rng);
        let start = demo * config.samples;
        boundaries.push(start);
        for i in 0..config.samples {
            let tau = i as f64 / (config.samples - 1) as f64;
            let s = 1.0 - (1.0 - tau).powi(2);
            let p = shape.point(s, scale, phase);
            // Noise fades out so every demo ends exactly at the attractor.
            let fade = 1.0 - s;
            for (j, v) in p.iter().enumerate() {
                pos[(start + i, j)] = v + fade * config.noise * gauss(&mut rng);
            }
        }
    }
    let mut vel = DMatrix::zeros(n, 2);
    for &start in &boundaries {
        let end = start + config.samples;
        for i in start..end {
            let (a, b, h) = if i == start {
                (i, i + 1, dt)
            } else if i == end - 1 {
                (i - 1, i, dt)
            } else {
                (i - 1, i + 1, 2.0 * dt)
            };
            let row = (pos.row(b) - pos.row(a)) / h;
            vel.set_row(i, &row);
        }
        vel.row_mut(end - 1).fill(0.0);
    }
    Demonstration::new(pos, vel, boundaries, DVector::zeros(2))
}
