use proptest::prelude::*;
use steerkit::applier::PlanRef;
use steerkit::eval::metrics::{defense_rate, harmonic_mean_rubric};
use steerkit::merge::{merge, MergeSpec, MergeStrategy};
use steerkit::{HookPoint, SteeringVector};

fn vector(values: Vec<f32>) -> SteeringVector {
    let mut v = SteeringVector::new(HookPoint::block_output(1), values, "caa");
    v.created_at = 0;
    v
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-4.0f32..4.0, d), n)
}

proptest! {
    #[test]
    fn linear_matches_weighted_sum(inputs in rows(3, 6), weights in prop::collection::vec(-2.0f64..2.0, 3)) {
        let spec = MergeSpec::new(
            MergeStrategy::Linear,
            inputs.iter().cloned().map(vector).zip(weights.iter().copied()).collect(),
        );
        let got = merge(&spec).unwrap().values;
        for j in 0..6 {
            let oracle: f64 = inputs.iter().zip(&weights).map(|(x, w)| w * x[j] as f64).sum();
            prop_assert!((got[j] as f64 - oracle).abs() <= 1e-5 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn ties_on_agreeing_signs_is_the_mean(inputs in rows(4, 5)) {
        // Force every coordinate positive so nothing is elected away.
        let positive: Vec<Vec<f32>> = inputs.iter().map(|r| r.iter().map(|x| x.abs() + 0.5).collect()).collect();
        let spec = MergeSpec::new(MergeStrategy::Ties, positive.iter().cloned().map(|v| (vector(v), 1.0)).collect());
        let got = merge(&spec).unwrap().values;
        for j in 0..5 {
            let mean = positive.iter().map(|r| r[j] as f64).sum::<f64>() / 4.0;
            prop_assert!((got[j] as f64 - mean).abs() <= 1e-5 * mean);
        }
    }

    #[test]
    fn ties_density_bounds_support(input in prop::collection::vec(-4.0f32..4.0, 10), density in 0.05f64..1.0) {
        let spec = MergeSpec::new(MergeStrategy::Ties, vec![(vector(input.clone()), 1.0)]).with_density(density);
        let got = merge(&spec).unwrap().values;
        let kept = got.iter().filter(|x| **x != 0.0).count();
        prop_assert!(kept <= (density * 10.0).ceil() as usize);
        for (g, x) in got.iter().zip(&input) {
            prop_assert!(*g == 0.0 || g == x);
        }
    }

    #[test]
    fn defense_rate_counts_strictly_below_half(scores in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let oracle = scores.iter().filter(|&&s| s < 0.5).count() as f64 / scores.len() as f64;
        prop_assert_eq!(defense_rate(&scores).unwrap(), oracle);
    }

    #[test]
    fn rubric_hm_oracle(c in 0u8..=2, i in 0u8..=2, f in 0u8..=2) {
        let got = harmonic_mean_rubric(c, i, f).unwrap();
        let oracle = if c == 0 || i == 0 || f == 0 {
            0.0
        } else {
            3.0 / (1.0 / c as f64 + 1.0 / i as f64 + 1.0 / f as f64)
        };
        prop_assert!((got - oracle).abs() < 1e-12);
    }
}

#[test]
fn plan_digest_ignores_json_key_order() {
    let id = "b".repeat(64);
    let a: PlanRef = serde_json::from_str(&format!(
        r#"{{"attachments":[{{"vector_id":"{id}","multiplier":0.5}}],"prompt_steer":"Be calm. "}}"#
    ))
    .unwrap();
    let b: PlanRef = serde_json::from_str(&format!(
        r#"{{"prompt_steer":"Be calm. ","attachments":[{{"multiplier":0.5,"vector_id":"{id}"}}]}}"#
    ))
    .unwrap();
    assert_eq!(a.digest(), b.digest());
    let c: PlanRef = serde_json::from_str(&format!(
        r#"{{"attachments":[{{"vector_id":"{id}","multiplier":0.75}}],"prompt_steer":"Be calm. "}}"#
    ))
    .unwrap();
    assert_ne!(a.digest(), c.digest());
}

#[test]
fn rubric_rejects_out_of_range() {
    assert!(harmonic_mean_rubric(3, 1, 1).is_err());
}
