//! Benchmark fixtures shared by the criterion suites.

use steerkit::model::build_synthetic_model;
use steerkit::{HookPoint, Model, ModelConfig, SteeringVector};

pub fn bench_model() -> Model {
    build_synthetic_model(&ModelConfig::tiny(), 0).expect("tiny config is valid")
}

/// `n` deterministic vectors of width `d` with varied signs.
pub fn bench_vectors(n: usize, d: usize) -> Vec<SteeringVector> {
    (0..n)
        .map(|i| {
            let values = (0..d).map(|j| (((i * 31 + j * 17) % 23) as f32 - 11.0) / 7.0).collect();
            let mut v = SteeringVector::new(HookPoint::block_output(1), values, "caa");
            v.created_at = 0;
            v
        })
        .collect()
}
