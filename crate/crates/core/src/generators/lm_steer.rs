//! LM-Steer: a learned linear map on the final hidden state, read out
//! through the frozen output embeddings.
//!
//! With steer sign `s` (+1 on matching text, −1 on not-matching text) the
//! logit of token `v` is `e_vᵀ(h + s·ε·W·h)`. Training minimizes the mean
//! next-token cross-entropy over completion tokens, using hidden states
//! cached from the frozen model, so the gradient is closed form:
//!
//! `∂CE/∂W = s·ε · E(p − y) hᵀ` averaged over target positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::SteeringDataset;
use crate::error::{Error, Result};
use crate::model::{ByteTokenizer, LogitProcessor, Model};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSteerConfig {
    pub steps: usize,
    pub lr: f64,
    /// Factor W = U·V with this inner rank; `None` trains the full matrix.
    #[serde(default)]
    pub rank: Option<usize>,
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LmSteerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.5,
            rank: None,
            epsilon: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmSteerMatrix {
    pub d_model: usize,
    /// Effective d_model × d_model map (U·V when factored).
    pub w: Vec<f32>,
    pub factors: Option<(Matrix, Matrix)>,
    pub epsilon: f32,
    pub steps: usize,
    pub lr: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

impl LmSteerMatrix {
    pub fn identity(d_model: usize, epsilon: f32) -> Self {
        let mut w = vec![0.0; d_model * d_model];
        for i in 0..d_model {
            w[i * d_model + i] = 1.0;
        }
        Self {
            d_model,
            w,
            factors: None,
            epsilon,
            steps: 0,
            lr: 0.0,
            initial_loss: 0.0,
            final_loss: 0.0,
            loss_history: Vec::new(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().all(|&x| x == 0.0)
    }

    /// `W · h`
    fn apply(&self, hidden: &[f32]) -> Vec<f32> {
        let d = self.d_model;
        (0..d)
            .map(|i| self.w[i * d..(i + 1) * d].iter().zip(hidden).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn digest(&self) -> String {
        crate::digest::json_digest(&(self.d_model, &self.w, self.epsilon))
    }
}

/// Logit adjustment `Eᵀ(α·ε·W·h)`, to be added to the unsteered logits.
pub fn apply_lm_steer_logits(
    matrix: &LmSteerMatrix,
    multiplier: f32,
    unembed: &Matrix,
    hidden: &[f32],
) -> Result<Vec<f32>> {
    if hidden.len() != matrix.d_model || unembed.rows != matrix.d_model {
        return Err(Error::ShapeMismatch(format!(
            "LM-Steer matrix is {}-dimensional, hidden {} and unembedding {} rows",
            matrix.d_model,
            hidden.len(),
            unembed.rows
        )));
    }
    let mut adjustment = vec![0.0f32; unembed.cols];
    if multiplier == 0.0 {
        return Ok(adjustment);
    }
    let scale = multiplier * matrix.epsilon;
    let shift: Vec<f32> = matrix.apply(hidden).into_iter().map(|x| scale * x).collect();
    crate::tensor::vec_mat(&shift, unembed, &mut adjustment);
    Ok(adjustment)
}

/// Applies a trained LM-Steer map at every decoding step.
pub struct LmSteerProcessor<'a> {
    pub matrix: &'a LmSteerMatrix,
    pub multiplier: f32,
    pub unembed: &'a Matrix,
}

impl LogitProcessor for LmSteerProcessor<'_> {
    fn process(&self, hidden: &[f32], logits: &mut [f32]) {
        let adj = apply_lm_steer_logits(self.matrix, self.multiplier, self.unembed, hidden)
            .expect("processor dimensions checked when the plan was applied");
        for (l, a) in logits.iter_mut().zip(adj) {
            *l += a;
        }
    }
}

/// One cached text: hidden states at the positions that predict `targets`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerExample {
    pub hidden: Vec<Vec<f64>>,
    pub targets: Vec<u32>,
    pub sign: f64,
}

/// The frozen pieces of the LM-Steer objective.
#[derive(Debug, Clone)]
pub struct LmSteerProblem {
    pub d_model: usize,
    pub vocab_size: usize,
    /// d_model × vocab_size, row-major.
    pub unembed: Vec<f64>,
    pub epsilon: f64,
    pub examples: Vec<SteerExample>,
}

impl LmSteerProblem {
    fn n_targets(&self) -> usize {
        self.examples.iter().map(|e| e.targets.len()).sum()
    }

    /// Mean cross-entropy at `w` (d × d, row-major), plus its gradient.
    pub fn loss_and_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let (d, vocab) = (self.d_model, self.vocab_size);
        let count = self.n_targets().max(1) as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; d * d];
        let mut g = vec![0.0; d];
        let mut logits = vec![0.0; vocab];
        let mut back = vec![0.0; d];
        let mut ex_grad = vec![0.0; d * d];
        // Per-example accumulation keeps mirrored examples cancelling exactly.
        for ex in &self.examples {
            let coef = ex.sign * self.epsilon;
            ex_grad.iter_mut().for_each(|x| *x = 0.0);
            for (h, &y) in ex.hidden.iter().zip(&ex.targets) {
                for i in 0..d {
                    let wh: f64 = (0..d).map(|j| w[i * d + j] * h[j]).sum();
                    g[i] = h[i] + coef * wh;
                }
                logits.iter_mut().for_each(|l| *l = 0.0);
                for (i, &gi) in g.iter().enumerate() {
                    let row = &self.unembed[i * vocab..(i + 1) * vocab];
                    for (l, &e) in logits.iter_mut().zip(row) {
                        *l += gi * e;
                    }
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                let log_z = max + z.ln();
                loss += log_z - logits[y as usize];
                // back = E (p − y)
                for (i, b) in back.iter_mut().enumerate() {
                    let row = &self.unembed[i * vocab..(i + 1) * vocab];
                    let mut acc = 0.0;
                    for (v, &e) in row.iter().enumerate() {
                        let p = (logits[v] - log_z).exp();
                        acc += e * (p - if v == y as usize { 1.0 } else { 0.0 });
                    }
                    *b = acc;
                }
                for i in 0..d {
                    let bi = coef * back[i] / count;
                    for j in 0..d {
                        ex_grad[i * d + j] += bi * h[j];
                    }
                }
            }
            grad.iter_mut().zip(&ex_grad).for_each(|(g, e)| *g += e);
        }
        (loss / count, grad)
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.loss_and_grad(w).0
    }
}

/// Caches final hidden states for every completion token of both sides of
/// every pair. Matching and not-matching examples are interleaved per pair.
pub fn build_lm_steer_problem(model: &Model, dataset: &SteeringDataset, epsilon: f64) -> Result<LmSteerProblem> {
    dataset.validate()?;
    let cfg = model.config();
    let mut examples = Vec::with_capacity(2 * dataset.pairs.len());
    for pair in &dataset.pairs {
        let prompt_len = pair.prompt.len();
        for (text, sign) in [(pair.matching_text(), 1.0), (pair.not_matching_text(), -1.0)] {
            let tokens = ByteTokenizer.encode_checked(&text, cfg.vocab_size)?;
            let hidden = model.final_hidden(&tokens, &[], None)?;
            let first = prompt_len.max(1);
            let mut ex = SteerExample {
                hidden: Vec::new(),
                targets: Vec::new(),
                sign,
            };
            for (t, &target) in tokens.iter().enumerate().skip(first) {
                ex.hidden.push(hidden.row(t - 1).iter().map(|&x| x as f64).collect());
                ex.targets.push(target);
            }
            examples.push(ex);
        }
    }
    let unembed = model.unembedding().data.iter().map(|&x| x as f64).collect();
    Ok(LmSteerProblem {
        d_model: cfg.d_model,
        vocab_size: cfg.vocab_size,
        unembed,
        epsilon,
        examples,
    })
}

pub fn train_lm_steer(model: &Model, dataset: &SteeringDataset, cfg: &LmSteerConfig) -> Result<LmSteerMatrix> {
    let problem = build_lm_steer_problem(model, dataset, cfg.epsilon)?;
    train_lm_steer_on(&problem, cfg)
}

/// Plain gradient descent. The returned matrix is the lowest-loss iterate,
/// so `final_loss <= initial_loss` always holds.
pub fn train_lm_steer_on(problem: &LmSteerProblem, cfg: &LmSteerConfig) -> Result<LmSteerMatrix> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("LM-Steer steps must be >= 1".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument("LM-Steer lr must be positive".into()));
    }
    if problem.examples.is_empty() {
        return Err(Error::InvalidArgument("LM-Steer needs at least one example".into()));
    }
    let d = problem.d_model;

    // Full rank starts at W = 0. Factored starts at U random, V = 0 so the
    // first gradient on V is non-zero.
    let mut factors = cfg.rank.map(|r| {
        let r = r.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let u: Vec<f64> = (0..d * r).map(|_| normal.sample(&mut rng)).collect();
        (r, u, vec![0.0f64; r * d])
    });
    let mut w = vec![0.0f64; d * d];
    let compose = |r: usize, u: &[f64], v: &[f64], w: &mut [f64]| {
        for i in 0..d {
            for j in 0..d {
                w[i * d + j] = (0..r).map(|k| u[i * r + k] * v[k * d + j]).sum();
            }
        }
    };

    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::INFINITY, w.clone(), factors.clone());
    for step in 0..=cfg.steps {
        if let Some((r, u, v)) = &factors {
            compose(*r, u, v, &mut w);
        }
        let (loss, grad) = problem.loss_and_grad(&w);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        history.push(loss);
        if loss < best.0 || step == 0 {
            best = (loss, w.clone(), factors.clone());
        }
        if step == cfg.steps {
            break;
        }
        match &mut factors {
            None => {
                for (wi, gi) in w.iter_mut().zip(&grad) {
                    *wi -= cfg.lr * gi;
                }
            }
            Some((r, u, v)) => {
                let r = *r;
                // grad_U = G Vᵀ, grad_V = Uᵀ G
                let mut gu = vec![0.0; d * r];
                let mut gv = vec![0.0; r * d];
                for i in 0..d {
                    for k in 0..r {
                        gu[i * r + k] = (0..d).map(|j| grad[i * d + j] * v[k * d + j]).sum();
                    }
                }
                for k in 0..r {
                    for j in 0..d {
                        gv[k * d + j] = (0..d).map(|i| u[i * r + k] * grad[i * d + j]).sum();
                    }
                }
                u.iter_mut().zip(&gu).for_each(|(x, g)| *x -= cfg.lr * g);
                v.iter_mut().zip(&gv).for_each(|(x, g)| *x -= cfg.lr * g);
            }
        }
    }

    let (final_loss, best_w, best_factors) = best;
    let to_f32 = |xs: &[f64]| xs.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    Ok(LmSteerMatrix {
        d_model: d,
        w: to_f32(&best_w),
        factors: best_factors.map(|(r, u, v)| (Matrix::from_vec(d, r, to_f32(&u)), Matrix::from_vec(r, d, to_f32(&v)))),
        epsilon: problem.epsilon as f32,
        steps: cfg.steps,
        lr: cfg.lr,
        initial_loss: history[0],
        final_loss,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ContrastivePair;
    use crate::model::{build_synthetic_model, ModelConfig};

    fn toy_problem(seed: u64) -> LmSteerProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let (d, vocab) = (4, 6);
        let mut sample = |k: usize| (0..k).map(|_| n.sample(&mut rng)).collect::<Vec<f64>>();
        let unembed = sample(d * vocab);
        let examples = (0..4)
            .map(|i| SteerExample {
                hidden: (0..3).map(|_| sample(d)).collect(),
                targets: vec![(i % vocab) as u32, ((i + 2) % vocab) as u32, 5],
                sign: if i % 2 == 0 { 1.0 } else { -1.0 },
            })
            .collect();
        LmSteerProblem {
            d_model: d,
            vocab_size: vocab,
            unembed,
            epsilon: 0.5,
            examples,
        }
    }

    #[test]
    fn gradient_matches_central_differences_at_zero() {
        let prob = toy_problem(1);
        let w = vec![0.0; 16];
        let (_, grad) = prob.loss_and_grad(&w);
        let h = 1e-5;
        let mut num = vec![0.0; 16];
        for k in 0..16 {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[k] += h;
            minus[k] -= h;
            num[k] = (prob.loss(&plus) - prob.loss(&minus)) / (2.0 * h);
        }
        let diff: f64 = grad.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-4, "rel err {}", diff / scale);
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = LmSteerConfig {
            steps: 0,
            ..LmSteerConfig::default()
        };
        assert!(train_lm_steer_on(&toy_problem(0), &cfg).is_err());
    }

    #[test]
    fn identical_sides_keep_w_at_zero() {
        let mut prob = toy_problem(2);
        let base = prob.examples[0].clone();
        let mut neg = base.clone();
        neg.sign = -1.0;
        prob.examples = vec![base, neg];
        let m = train_lm_steer_on(
            &prob,
            &LmSteerConfig {
                steps: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m.is_zero());
    }

    #[test]
    fn training_reduces_loss() {
        let prob = toy_problem(3);
        for rank in [None, Some(2)] {
            let cfg = LmSteerConfig {
                steps: 50,
                lr: 0.5,
                rank,
                ..Default::default()
            };
            let m = train_lm_steer_on(&prob, &cfg).unwrap();
            assert!(
                m.final_loss < m.initial_loss,
                "{rank:?}: {} vs {}",
                m.final_loss,
                m.initial_loss
            );
            assert!(m.w.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn divergence_reported() {
        let prob = toy_problem(4);
        let cfg = LmSteerConfig {
            steps: 200,
            lr: f64::MAX,
            ..Default::default()
        };
        assert!(matches!(train_lm_steer_on(&prob, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn logit_adjustment_algebra() {
        let cfg = ModelConfig::tiny();
        let model = build_synthetic_model(&cfg, 9).unwrap();
        let h: Vec<f32> = (0..cfg.d_model).map(|i| (i as f32 * 0.37).sin()).collect();
        let e = model.unembedding();
        let eye = LmSteerMatrix::identity(cfg.d_model, 1.0);

        let zero = apply_lm_steer_logits(&eye, 0.0, e, &h).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));

        let mut base = vec![0.0; cfg.vocab_size];
        crate::tensor::vec_mat(&h, e, &mut base);
        let adj = apply_lm_steer_logits(&eye, 1.0, e, &h).unwrap();
        let doubled: Vec<f32> = h.iter().map(|x| 2.0 * x).collect();
        let mut expect = vec![0.0; cfg.vocab_size];
        crate::tensor::vec_mat(&doubled, e, &mut expect);
        for ((b, a), x) in base.iter().zip(&adj).zip(&expect) {
            assert!((b + a - x).abs() < 1e-4);
        }

        let neg = apply_lm_steer_logits(&eye, -1.0, e, &h).unwrap();
        for (a, n) in adj.iter().zip(&neg) {
            assert_eq!(*a, -*n);
        }
        assert!(apply_lm_steer_logits(&eye, 1.0, e, &h[..3]).is_err());
    }

    #[test]
    fn trains_on_model_cache() {
        let cfg = ModelConfig::tiny();
        let model = build_synthetic_model(&cfg, 9).unwrap();
        let ds = SteeringDataset::new(
            vec![
                ContrastivePair::new("I am ", "glad", "sad"),
                ContrastivePair::new("It is ", "good", "bad"),
            ],
            "joy",
            "test",
        )
        .unwrap();
        let m = train_lm_steer(
            &model,
            &ds,
            &LmSteerConfig {
                steps: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.loss_history.len(), 11);
        assert!(m.final_loss <= m.initial_loss);
    }
}
