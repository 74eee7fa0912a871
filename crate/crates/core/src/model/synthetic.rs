//! Seeded random models for tests, benches and the bundled demo.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{BlockWeights, Model, ModelConfig, ModelWeights};

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize, std: f32) -> Matrix {
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn vector(&mut self, len: usize, mean: f32, std: f32) -> Vec<f32> {
        let normal = Normal::new(mean, std).expect("positive std");
        (0..len).map(|_| normal.sample(&mut self.rng)).collect()
    }
}

pub fn build_synthetic_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let d = config.d_model;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let attn_std = 1.0 / (d as f32).sqrt();
    let tok_emb = init.matrix(config.vocab_size, d, 1.0);
    let pos_emb = init.matrix(config.max_seq_len, d, 0.3);
    let blocks = (0..config.n_layers)
        .map(|_| BlockWeights {
            ln1_gamma: init.vector(d, 1.0, 0.05),
            ln1_beta: init.vector(d, 0.0, 0.05),
            wq: init.matrix(d, d, attn_std),
            wk: init.matrix(d, d, attn_std),
            wv: init.matrix(d, d, attn_std),
            wo: init.matrix(d, d, attn_std),
            ln2_gamma: init.vector(d, 1.0, 0.05),
            ln2_beta: init.vector(d, 0.0, 0.05),
            w1: init.matrix(d, config.d_ff, attn_std),
            b1: init.vector(config.d_ff, 0.0, 0.05),
            w2: init.matrix(config.d_ff, d, 1.0 / (config.d_ff as f32).sqrt()),
            b2: init.vector(d, 0.0, 0.05),
        })
        .collect();
    let weights = ModelWeights {
        tok_emb,
        pos_emb,
        blocks,
        lnf_gamma: vec![1.0; d],
        lnf_beta: vec![0.0; d],
        unembed: init.matrix(d, config.vocab_size, 2.0 / (d as f32).sqrt()),
    };
    Model::new(config.clone(), weights)
}

/// Builds a synthetic model with a planted concept direction.
///
/// The returned direction is the first basis vector of the hidden space.
/// Row 0 of the unembedding is rewritten to `+1` on set-A columns, `-1` on
/// set-B columns and `0` elsewhere, so adding `α · direction` at the
/// final-hidden site shifts every A logit by `+α`, every B logit by `-α`
/// and leaves all other logits untouched.
pub fn build_demo_concept_model(
    config: &ModelConfig,
    concept_a: &[u32],
    concept_b: &[u32],
    seed: u64,
) -> Result<(Model, Vec<f32>)> {
    if concept_a.is_empty() || concept_b.is_empty() {
        return Err(Error::InvalidArgument("concept token sets must be non-empty".into()));
    }
    let a: BTreeSet<u32> = concept_a.iter().copied().collect();
    let b: BTreeSet<u32> = concept_b.iter().copied().collect();
    if let Some(t) = a.intersection(&b).next() {
        return Err(Error::InvalidArgument(format!(
            "concept token sets overlap at token {t}"
        )));
    }
    if let Some(&t) = a.iter().chain(&b).find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: t,
            vocab_size: config.vocab_size,
        });
    }
    let model = build_synthetic_model(config, seed)?;
    let mut weights = model.weights().clone();
    let row = weights.unembed.row_mut(0);
    for (tok, w) in row.iter_mut().enumerate() {
        let tok = tok as u32;
        *w = if a.contains(&tok) {
            1.0
        } else if b.contains(&tok) {
            -1.0
        } else {
            0.0
        };
    }
    let mut direction = vec![0.0f32; config.d_model];
    direction[0] = 1.0;
    Ok((Model::new(config.clone(), weights)?, direction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Hook, HookPoint};

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let cfg = ModelConfig::tiny();
        let a = build_synthetic_model(&cfg, 1).unwrap();
        let b = build_synthetic_model(&cfg, 1).unwrap();
        let c = build_synthetic_model(&cfg, 2).unwrap();
        assert_eq!(a.weights_digest(), b.weights_digest());
        assert_eq!(a, b);
        assert_ne!(a.weights_digest(), c.weights_digest());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            n_heads: 5,
            ..ModelConfig::tiny()
        };
        assert!(build_synthetic_model(&cfg, 0).is_err());
    }

    #[test]
    fn overlapping_sets_rejected() {
        let cfg = ModelConfig::tiny();
        assert!(build_demo_concept_model(&cfg, &[1, 2], &[2, 3], 0).is_err());
        assert!(build_demo_concept_model(&cfg, &[], &[3], 0).is_err());
        assert!(build_demo_concept_model(&cfg, &[1], &[300], 0).is_err());
    }

    fn gap(logits: &[f32], a: &[u32], b: &[u32]) -> f64 {
        let sum = |s: &[u32]| s.iter().map(|&t| logits[t as usize] as f64).sum::<f64>();
        sum(a) - sum(b)
    }

    #[test]
    fn concept_gap_is_linear_in_alpha() {
        let cfg = ModelConfig::tiny();
        let (a, b) = ([10u32, 11, 12], [20u32, 21]);
        let (model, dir) = build_demo_concept_model(&cfg, &a, &b, 3).unwrap();
        let point = HookPoint::final_hidden(cfg.n_layers);
        let tokens = [72u32, 105];
        let gap_at = |alpha: f32| {
            let logits = model
                .next_token_logits(&tokens, &[Hook::new(point, &dir, alpha)], None)
                .unwrap();
            gap(&logits, &a, &b)
        };
        let base = {
            let logits = model.next_token_logits(&tokens, &[], None).unwrap();
            gap(&logits, &a, &b)
        };
        let (g0, g1, g2, gm1) = (gap_at(0.0), gap_at(1.0), gap_at(2.0), gap_at(-1.0));
        assert_eq!(g0, base);
        // Each unit of alpha moves |A| + |B| = 5 logit units.
        assert!(((g1 - g0) - 5.0).abs() < 1e-4);
        assert!(((g2 - g1) - (g1 - g0)).abs() < 1e-4);
        assert!(((gm1 - g0) + (g1 - g0)).abs() < 1e-4);
    }
}
