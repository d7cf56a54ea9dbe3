//! Fixtures shared by the criterion benchmarks under `benches/`.

use damm_ds::damm::{build_observations, default_velocity_floor};
use damm_ds::eval::synthetic::{generate, Shape, SyntheticConfig};
use damm_ds::{DammModel, Demonstration, NiwPrior, PriorOptions};

/// Three S-curve demos with `samples` points each.
pub fn s_curve(samples: usize) -> Demonstration {
    let cfg = SyntheticConfig {
        samples,
        ..SyntheticConfig::default()
    };
    generate(Shape::SCurve, 11, &cfg).expect("valid synthetic config")
}

pub fn damm_model(demo: &Demonstration) -> DammModel {
    let prior = NiwPrior::from_positions(demo.positions(), &PriorOptions::default()).expect("prior");
    let obs = build_observations(demo, default_velocity_floor(demo)).expect("observations");
    DammModel::new(&obs, prior).expect("model")
}
