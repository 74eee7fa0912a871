//! A small pre-norm decoder-only transformer with learned position
//! embeddings and additive hooks on the residual stream.
//!
//! Every forward pass can record the activation at each [`HookPoint`]; the
//! recorded value is the one the next stage consumes, i.e. after any hook
//! at that point has been applied. Hooks at the same point run in the order
//! they are given.

mod config;
pub mod container;
mod hooks;
mod sampling;
mod synthetic;
mod tokenizer;
mod weights;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::digest::{f32s_to_le_bytes, sha256_hex};
use crate::error::{Error, Result};
use crate::tensor::{gelu, layer_norm, matmul, softmax, vec_mat, Matrix};

pub use config::ModelConfig;
pub use container::{NamedTensor, TensorFile};
pub use hooks::{Hook, HookPoint, Site};
pub use sampling::{argmax, sample_token, SamplingMode, SamplingParams};
pub use synthetic::{build_demo_concept_model, build_synthetic_model};
pub use tokenizer::ByteTokenizer;
pub use weights::{BlockWeights, ModelWeights};

/// Activations recorded during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub activations: BTreeMap<HookPoint, Matrix>,
}

impl ForwardTrace {
    pub fn get(&self, point: &HookPoint) -> Option<&Matrix> {
        self.activations.get(point)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// seq_len × vocab_size
    pub logits: Matrix,
    pub trace: ForwardTrace,
}

/// Adjusts next-token logits given the final hidden state at that position.
///
/// Runs after every activation hook, so `hidden` already includes them.
pub trait LogitProcessor: Send + Sync {
    fn process(&self, hidden: &[f32], logits: &mut [f32]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = TensorFile::read(path)?;
        Self::from_tensor_file(&mut file)
    }

    pub fn from_tensor_file(file: &mut TensorFile) -> Result<Self> {
        let config: ModelConfig =
            serde_json::from_value(file.config.clone()).map_err(|e| Error::Format(format!("model config: {e}")))?;
        config.validate()?;
        let weights = ModelWeights::from_tensors(&config, file)?;
        Self::new(config, weights)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        TensorFile {
            config: serde_json::to_value(&self.config).expect("config serializes"),
            tensors: self.weights.to_tensors(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().write(path.as_ref())
    }

    /// SHA-256 over every weight tensor in file order.
    pub fn weights_digest(&self) -> String {
        let mut bytes = Vec::new();
        for t in self.weights.to_tensors() {
            bytes.extend_from_slice(t.name.as_bytes());
            bytes.extend_from_slice(&f32s_to_le_bytes(&t.data));
        }
        sha256_hex(&bytes)
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.weights.unembed
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn check_hooks(&self, hooks: &[Hook<'_>]) -> Result<()> {
        for h in hooks {
            h.point.validate(self.config.n_layers)?;
            if h.vector.len() != self.config.d_model {
                return Err(Error::ShapeMismatch(format!(
                    "hook vector at {} has dimension {}, model d_model is {}",
                    h.point,
                    h.vector.len(),
                    self.config.d_model
                )));
            }
            if !h.multiplier.is_finite() {
                return Err(Error::NonFinite(format!("multiplier at {}", h.point)));
            }
        }
        Ok(())
    }

    /// Full forward pass: logits for every position plus the activation trace.
    pub fn forward(&self, tokens: &[u32], hooks: &[Hook<'_>]) -> Result<ForwardOutput> {
        let mut trace = ForwardTrace::default();
        let hidden = self.final_hidden(tokens, hooks, Some(&mut trace))?;
        let logits = matmul(&hidden, &self.weights.unembed);
        Ok(ForwardOutput { logits, trace })
    }

    /// Final hidden states (seq_len × d_model) after every hook has run.
    pub fn final_hidden(
        &self,
        tokens: &[u32],
        hooks: &[Hook<'_>],
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        self.check_hooks(hooks)?;
        let cfg = &self.config;
        let w = &self.weights;
        let (n, d) = (tokens.len(), cfg.d_model);

        let mut x = Matrix::zeros(n, d);
        for (pos, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(pos);
            for ((r, &e), &p) in row.iter_mut().zip(w.tok_emb.row(tok as usize)).zip(w.pos_emb.row(pos)) {
                *r = e + p;
            }
        }
        self.hook_site(&mut x, HookPoint::block_output(0), hooks, trace.as_deref_mut());

        for (layer, block) in w.blocks.iter().enumerate() {
            self.block_forward(block, &mut x);
            self.hook_site(&mut x, HookPoint::block_output(layer + 1), hooks, trace.as_deref_mut());
        }

        let eps = cfg.layernorm_epsilon as f32;
        let mut out = Matrix::zeros(n, d);
        for pos in 0..n {
            layer_norm(x.row(pos), &w.lnf_gamma, &w.lnf_beta, eps, out.row_mut(pos));
        }
        self.hook_site(&mut out, HookPoint::final_hidden(cfg.n_layers), hooks, trace);
        Ok(out)
    }

    fn hook_site(&self, x: &mut Matrix, point: HookPoint, hooks: &[Hook<'_>], trace: Option<&mut ForwardTrace>) {
        for hook in hooks.iter().filter(|h| h.point == point) {
            for pos in 0..x.rows {
                hook.apply_row(x.row_mut(pos));
            }
        }
        if let Some(trace) = trace {
            trace.activations.insert(point, x.clone());
        }
    }

    fn block_forward(&self, b: &BlockWeights, x: &mut Matrix) {
        let cfg = &self.config;
        let (n, d) = (x.rows, cfg.d_model);
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let eps = cfg.layernorm_epsilon as f32;

        let mut normed = Matrix::zeros(n, d);
        for pos in 0..n {
            layer_norm(x.row(pos), &b.ln1_gamma, &b.ln1_beta, eps, normed.row_mut(pos));
        }
        let q = matmul(&normed, &b.wq);
        let k = matmul(&normed, &b.wk);
        let v = matmul(&normed, &b.wv);
        let scale = 1.0 / (hd as f32).sqrt();

        let mut attn = Matrix::zeros(n, d);
        let mut scores = vec![0.0f32; n];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for t in 0..n {
                let qt = &q.row(t)[cols.clone()];
                for (s, score) in scores.iter_mut().enumerate().take(t + 1) {
                    let ks = &k.row(s)[cols.clone()];
                    *score = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let probs = softmax(&scores[..=t]);
                let out = &mut attn.row_mut(t)[cols.clone()];
                for (s, &p) in probs.iter().enumerate() {
                    let vs = &v.row(s)[cols.clone()];
                    for (o, &vv) in out.iter_mut().zip(vs) {
                        *o += p as f32 * vv;
                    }
                }
            }
        }
        let attn_out = matmul(&attn, &b.wo);
        for (xi, ai) in x.data.iter_mut().zip(&attn_out.data) {
            *xi += ai;
        }

        let mut hidden = vec![0.0f32; cfg.d_ff];
        let mut mlp_out = vec![0.0f32; d];
        let mut normed_row = vec![0.0f32; d];
        for pos in 0..n {
            layer_norm(x.row(pos), &b.ln2_gamma, &b.ln2_beta, eps, &mut normed_row);
            vec_mat(&normed_row, &b.w1, &mut hidden);
            for (hv, &bias) in hidden.iter_mut().zip(&b.b1) {
                *hv = gelu(*hv + bias);
            }
            vec_mat(&hidden, &b.w2, &mut mlp_out);
            for ((xi, &m), &bias) in x.row_mut(pos).iter_mut().zip(&mlp_out).zip(&b.b2) {
                *xi += m + bias;
            }
        }
    }

    /// Logits at the last position, with an optional processor applied.
    pub fn next_token_logits(
        &self,
        tokens: &[u32],
        hooks: &[Hook<'_>],
        processor: Option<&dyn LogitProcessor>,
    ) -> Result<Vec<f32>> {
        let hidden = self.final_hidden(tokens, hooks, None)?;
        let last = hidden.row(hidden.rows - 1);
        let mut logits = vec![0.0f32; self.config.vocab_size];
        vec_mat(last, &self.weights.unembed, &mut logits);
        if let Some(p) = processor {
            p.process(last, &mut logits);
        }
        Ok(logits)
    }

    /// Autoregressive continuation; returns only the new tokens.
    pub fn generate(&self, prompt: &[u32], sampling: &SamplingParams, hooks: &[Hook<'_>]) -> Result<Vec<u32>> {
        self.generate_streaming(prompt, sampling, hooks, None, |_| true)
    }

    /// Like [`Model::generate`], calling `on_token` after each sampled token.
    /// Returning `false` from the callback stops generation early.
    pub fn generate_streaming(
        &self,
        prompt: &[u32],
        sampling: &SamplingParams,
        hooks: &[Hook<'_>],
        processor: Option<&dyn LogitProcessor>,
        mut on_token: impl FnMut(u32) -> bool,
    ) -> Result<Vec<u32>> {
        sampling.validate()?;
        self.check_tokens(prompt)?;
        let total = prompt.len() + sampling.max_new_tokens;
        if total > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut tokens = prompt.to_vec();
        let mut generated = Vec::with_capacity(sampling.max_new_tokens);
        for _ in 0..sampling.max_new_tokens {
            let logits = self.next_token_logits(&tokens, hooks, processor)?;
            let next = sample_token(&logits, sampling, &mut rng);
            tokens.push(next);
            generated.push(next);
            if !on_token(next) {
                break;
            }
        }
        Ok(generated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 32,
            max_seq_len: 16,
            layernorm_epsilon: 1e-5,
        };
        build_synthetic_model(&cfg, 7).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model();
        let a = m.forward(&[1, 2, 3], &[]).unwrap();
        let b = m.forward(&[1, 2, 3], &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_multiplier_is_identity() {
        let m = model();
        let v = vec![1.5f32; 8];
        let base = m.forward(&[4, 5, 6], &[]).unwrap();
        let hooked = m
            .forward(&[4, 5, 6], &[Hook::new(HookPoint::block_output(1), &v, 0.0)])
            .unwrap();
        assert_eq!(base.logits, hooked.logits);
    }

    #[test]
    fn hook_adds_scaled_vector_at_site() {
        let m = model();
        let v: Vec<f32> = (0..8).map(|i| i as f32 * 0.25 - 1.0).collect();
        let point = HookPoint::block_output(1);
        let base = m.forward(&[1, 9, 3, 7], &[]).unwrap();
        let hooked = m.forward(&[1, 9, 3, 7], &[Hook::new(point, &v, 2.0)]).unwrap();
        let mut expected = base.trace.get(&point).unwrap().clone();
        for pos in 0..expected.rows {
            for (x, &vi) in expected.row_mut(pos).iter_mut().zip(&v) {
                *x += 2.0 * vi;
            }
        }
        assert_eq!(hooked.trace.get(&point).unwrap(), &expected);
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let m = model();
        let a = m.forward(&[1, 2, 3, 4], &[]).unwrap();
        let b = m.forward(&[1, 2, 30, 31], &[]).unwrap();
        assert_eq!(a.logits.row(0), b.logits.row(0));
        assert_eq!(a.logits.row(1), b.logits.row(1));
        assert_ne!(a.logits.row(2), b.logits.row(2));
    }

    #[test]
    fn forward_errors() {
        let m = model();
        assert!(matches!(
            m.forward(&[40], &[]),
            Err(Error::TokenOutOfRange { id: 40, .. })
        ));
        assert!(matches!(
            m.forward(&[1; 17], &[]),
            Err(Error::SequenceTooLong { len: 17, .. })
        ));
        let short = vec![1.0f32; 7];
        assert!(matches!(
            m.forward(&[1], &[Hook::new(HookPoint::block_output(1), &short, 1.0)]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn generate_rejects_zero_tokens_and_overflow() {
        let m = model();
        assert!(m.generate(&[1], &SamplingParams::greedy(0), &[]).is_err());
        assert!(matches!(
            m.generate(&[1; 10], &SamplingParams::greedy(7), &[]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(m.generate(&[], &SamplingParams::greedy(1), &[]).is_err());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let m = model();
        let s = SamplingParams::top_k(5, 1.0, 8, 11);
        assert_eq!(
            m.generate(&[1, 2], &s, &[]).unwrap(),
            m.generate(&[1, 2], &s, &[]).unwrap()
        );
        let g = SamplingParams::greedy(8);
        let v = vec![0.3f32; 8];
        let zero = [Hook::new(HookPoint::block_output(1), &v, 0.0)];
        assert_eq!(
            m.generate(&[1, 2], &g, &[]).unwrap(),
            m.generate(&[1, 2], &g, &zero).unwrap()
        );
    }

    #[test]
    fn load_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = model();
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.config().n_layers, 2);
        loaded.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn load_rejects_truncated_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = model();
        let bytes = m.to_tensor_file().to_bytes();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::ShapeMismatch(_))));

        let mut file = m.to_tensor_file();
        file.tensors.last_mut().unwrap().data[3] = f32::NAN;
        file.write(&path).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::NonFinite(_))));

        assert!(matches!(
            Model::load(dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }
}
