//! Sparse autoencoder over activations at one hook point.
//!
//! `f = relu(W_enc (a − b_dec) + b_enc)`, `â = W_dec f + b_dec`, loss
//! `mean_n ‖a − â‖² + λ‖f‖₁`. Decoder columns are kept at unit norm: after
//! initialization and after every gradient step.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::PromptSet;
use crate::error::{Error, Result};
use crate::model::{ByteTokenizer, HookPoint, Model, NamedTensor, TensorFile};
use crate::vector::SteeringVector;

use super::ActivationSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    /// Number of features.
    pub m: usize,
    pub l1: f64,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            m: 32,
            l1: 1e-3,
            steps: 500,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeFeature {
    pub id: usize,
    pub label: String,
    pub mean_activation: f64,
    pub top_contexts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub point: HookPoint,
    pub d_model: usize,
    pub m: usize,
    pub l1: f64,
    /// m × d_model
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    /// d_model × m; column `k` is feature `k`'s direction.
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
    pub features: Vec<SaeFeature>,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradients {
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SaeHeader {
    kind: String,
    point: HookPoint,
    d_model: usize,
    m: usize,
    l1: f64,
    features: Vec<SaeFeature>,
}

impl SaeModel {
    /// Random unit decoder columns, tied encoder, `b_dec` at the data mean.
    pub fn init(point: HookPoint, d_model: usize, m: usize, l1: f64, seed: u64, data_mean: Vec<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let w_dec: Vec<f64> = (0..d_model * m).map(|_| normal.sample(&mut rng)).collect();
        let mut sae = Self {
            point,
            d_model,
            m,
            l1,
            w_enc: vec![0.0; m * d_model],
            b_enc: vec![0.0; m],
            w_dec,
            b_dec: data_mean,
            features: default_features(m),
            loss_history: Vec::new(),
        };
        sae.normalize_decoder();
        for k in 0..m {
            for j in 0..d_model {
                sae.w_enc[k * d_model + j] = sae.w_dec[j * m + k];
            }
        }
        sae
    }

    pub fn decoder_column(&self, k: usize) -> Vec<f64> {
        (0..self.d_model).map(|j| self.w_dec[j * self.m + k]).collect()
    }

    pub fn decoder_norms(&self) -> Vec<f64> {
        (0..self.m)
            .map(|k| self.decoder_column(k).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }

    pub fn normalize_decoder(&mut self) {
        for (k, norm) in self.decoder_norms().into_iter().enumerate() {
            if norm > 0.0 {
                for j in 0..self.d_model {
                    self.w_dec[j * self.m + k] /= norm;
                }
            }
        }
    }

    fn pre_activations(&self, a: &[f64]) -> Vec<f64> {
        let d = self.d_model;
        (0..self.m)
            .map(|k| {
                let row = &self.w_enc[k * d..(k + 1) * d];
                row.iter()
                    .zip(a)
                    .zip(&self.b_dec)
                    .map(|((w, x), b)| w * (x - b))
                    .sum::<f64>()
                    + self.b_enc[k]
            })
            .collect()
    }

    pub fn encode(&self, a: &[f64]) -> Vec<f64> {
        self.pre_activations(a).into_iter().map(|x| x.max(0.0)).collect()
    }

    pub fn decode(&self, f: &[f64]) -> Vec<f64> {
        (0..self.d_model)
            .map(|j| {
                let row = &self.w_dec[j * self.m..(j + 1) * self.m];
                row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + self.b_dec[j]
            })
            .collect()
    }

    /// `W_dec · s` without the decoder bias.
    pub fn decode_direction(&self, s: &[f64]) -> Vec<f64> {
        (0..self.d_model)
            .map(|j| {
                let row = &self.w_dec[j * self.m..(j + 1) * self.m];
                row.iter().zip(s).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Mean over rows of `‖a − â‖² + λ‖f‖₁`, with closed-form gradients.
    #[allow(clippy::needless_range_loop)]
    pub fn loss_and_grad(&self, data: &[Vec<f64>]) -> (f64, SaeGradients) {
        let (d, m) = (self.d_model, self.m);
        let n = data.len().max(1) as f64;
        let mut g = SaeGradients {
            w_enc: vec![0.0; m * d],
            b_enc: vec![0.0; m],
            w_dec: vec![0.0; d * m],
            b_dec: vec![0.0; d],
        };
        let mut loss = 0.0;
        for a in data {
            let pre = self.pre_activations(a);
            let f: Vec<f64> = pre.iter().map(|x| x.max(0.0)).collect();
            let recon = self.decode(&f);
            let r: Vec<f64> = recon.iter().zip(a).map(|(x, y)| x - y).collect();
            loss += r.iter().map(|x| x * x).sum::<f64>() + self.l1 * f.iter().sum::<f64>();

            for j in 0..d {
                let two_r = 2.0 * r[j] / n;
                g.b_dec[j] += two_r;
                for k in 0..m {
                    g.w_dec[j * m + k] += two_r * f[k];
                }
            }
            for k in 0..m {
                if pre[k] <= 0.0 {
                    continue;
                }
                let back: f64 = (0..d).map(|j| 2.0 * self.w_dec[j * m + k] * r[j]).sum::<f64>() + self.l1;
                let dpre = back / n;
                g.b_enc[k] += dpre;
                for j in 0..d {
                    g.w_enc[k * d + j] += dpre * (a[j] - self.b_dec[j]);
                    g.b_dec[j] -= dpre * self.w_enc[k * d + j];
                }
            }
        }
        (loss / n, g)
    }

    /// Mean squared reconstruction error per coordinate.
    pub fn reconstruction_mse(&self, data: &[Vec<f64>]) -> f64 {
        let total: f64 = data
            .iter()
            .map(|a| {
                self.decode(&self.encode(a))
                    .iter()
                    .zip(a)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
            })
            .sum();
        total / (data.len() * self.d_model).max(1) as f64
    }

    fn step(&mut self, grads: &SaeGradients, lr: f64) {
        let upd = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(x, y)| *x -= lr * y);
        upd(&mut self.w_enc, &grads.w_enc);
        upd(&mut self.b_enc, &grads.b_enc);
        upd(&mut self.w_dec, &grads.w_dec);
        upd(&mut self.b_dec, &grads.b_dec);
        self.normalize_decoder();
    }

    fn is_finite(&self) -> bool {
        [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec]
            .iter()
            .all(|p| p.iter().all(|x| x.is_finite()))
    }

    pub fn feature(&self, id: usize) -> Result<&SaeFeature> {
        self.features
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("feature {id} out of range for {} features", self.m)))
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let header = SaeHeader {
            kind: "sae".into(),
            point: self.point,
            d_model: self.d_model,
            m: self.m,
            l1: self.l1,
            features: self.features.clone(),
        };
        let f32s = |xs: &[f64]| xs.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        TensorFile {
            config: serde_json::to_value(header).expect("header serializes"),
            tensors: vec![
                NamedTensor::new("w_enc", vec![self.m, self.d_model], f32s(&self.w_enc)),
                NamedTensor::new("b_enc", vec![self.m], f32s(&self.b_enc)),
                NamedTensor::new("w_dec", vec![self.d_model, self.m], f32s(&self.w_dec)),
                NamedTensor::new("b_dec", vec![self.d_model], f32s(&self.b_dec)),
            ],
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().write(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = TensorFile::read(path.as_ref())?;
        let header: SaeHeader =
            serde_json::from_value(file.config.clone()).map_err(|e| Error::Format(format!("sae header: {e}")))?;
        if header.kind != "sae" {
            return Err(Error::Format(format!(
                "expected an sae checkpoint, got {:?}",
                header.kind
            )));
        }
        let (d, m) = (header.d_model, header.m);
        let mut take = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
            let t = file
                .take(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing sae tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape
                )));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("sae tensor {name}")));
            }
            Ok(t.data.into_iter().map(f64::from).collect())
        };
        let mut features = header.features;
        if features.len() != m {
            features = default_features(m);
        }
        Ok(Self {
            point: header.point,
            d_model: d,
            m,
            l1: header.l1,
            w_enc: take("w_enc", vec![m, d])?,
            b_enc: take("b_enc", vec![m])?,
            w_dec: take("w_dec", vec![d, m])?,
            b_dec: take("b_dec", vec![d])?,
            features,
            loss_history: Vec::new(),
        })
    }
}

fn default_features(m: usize) -> Vec<SaeFeature> {
    (0..m)
        .map(|id| SaeFeature {
            id,
            label: String::new(),
            mean_activation: 0.0,
            top_contexts: Vec::new(),
        })
        .collect()
}

pub fn train_sae(activations: &ActivationSet, cfg: &SaeConfig) -> Result<SaeModel> {
    train_sae_observed(activations, cfg, |_, _| {})
}

/// Trains with plain gradient descent and calls `observe(step, model)`
/// after every step. Returns the lowest-loss iterate.
pub fn train_sae_observed(
    activations: &ActivationSet,
    cfg: &SaeConfig,
    mut observe: impl FnMut(usize, &SaeModel),
) -> Result<SaeModel> {
    if cfg.m == 0 {
        return Err(Error::InvalidArgument("SAE needs m >= 1 features".into()));
    }
    if !(cfg.l1 >= 0.0 && cfg.l1.is_finite()) {
        return Err(Error::InvalidArgument(
            "SAE l1 coefficient must be a finite value >= 0".into(),
        ));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument("SAE lr must be positive".into()));
    }
    if activations.is_empty() {
        return Err(Error::InvalidArgument("SAE needs at least one activation".into()));
    }
    let d = activations.d_model();
    let data: Vec<Vec<f64>> = (0..activations.len())
        .map(|i| activations.rows.row(i).iter().map(|&x| x as f64).collect())
        .collect();
    let mut mean = vec![0.0; d];
    for a in &data {
        mean.iter_mut().zip(a).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= data.len() as f64);

    let mut sae = SaeModel::init(activations.point, d, cfg.m, cfg.l1, cfg.seed, mean);
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, SaeModel)> = None;
    for step in 0..=cfg.steps {
        let (loss, grads) = sae.loss_and_grad(&data);
        if !loss.is_finite() || !sae.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        history.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, sae.clone()));
        }
        if step == cfg.steps {
            break;
        }
        sae.step(&grads, cfg.lr);
        observe(step, &sae);
    }
    let (_, mut best) = best.expect("at least one evaluation");
    best.loss_history = history;
    Ok(best)
}

pub fn sae_feature_vector(sae: &SaeModel, feature_id: usize) -> Result<SteeringVector> {
    let feature = sae.feature(feature_id)?;
    let values = sae.decoder_column(feature_id).into_iter().map(|x| x as f32).collect();
    let mut v = SteeringVector::new(sae.point, values, "sae_feature").with_concept(feature.label.clone());
    v.tags.push(format!("feature:{feature_id}"));
    Ok(v)
}

/// Case-insensitive substring match on labels, ranked by mean activation.
/// An empty query matches every feature.
pub fn search_sae_features(sae: &SaeModel, query: &str, top_n: usize) -> Vec<SaeFeature> {
    let q = query.to_lowercase();
    let mut hits: Vec<&SaeFeature> = sae
        .features
        .iter()
        .filter(|f| f.label.to_lowercase().contains(&q))
        .collect();
    hits.sort_by(|a, b| b.mean_activation.total_cmp(&a.mean_activation).then(a.id.cmp(&b.id)));
    hits.into_iter().take(top_n).cloned().collect()
}

const CONTEXT_WINDOW: usize = 8;

/// Labels each feature by its `top_k_contexts` highest-activating token
/// contexts over `corpus` (joined with `" | "`) and records its mean
/// activation over every corpus token. Features that never fire are
/// labeled `"inactive"`.
pub fn label_sae_features(
    sae: &SaeModel,
    model: &Model,
    corpus: &PromptSet,
    top_k_contexts: usize,
) -> Result<SaeModel> {
    if sae.d_model != model.config().d_model {
        return Err(Error::ShapeMismatch(format!(
            "SAE width {} vs model d_model {}",
            sae.d_model,
            model.config().d_model
        )));
    }
    let mut sums = vec![0.0f64; sae.m];
    let mut count = 0usize;
    let mut tops: Vec<Vec<(f64, String)>> = vec![Vec::new(); sae.m];
    for text in &corpus.prompts {
        let tokens = ByteTokenizer.encode_checked(text, model.config().vocab_size)?;
        let trace = model.forward(&tokens, &[])?.trace;
        let act = trace
            .get(&sae.point)
            .ok_or_else(|| Error::InvalidArgument(format!("hook point {} not traced", sae.point)))?;
        for pos in 0..act.rows {
            let a: Vec<f64> = act.row(pos).iter().map(|&x| x as f64).collect();
            let f = sae.encode(&a);
            count += 1;
            let context = ByteTokenizer.decode(&tokens[pos.saturating_sub(CONTEXT_WINDOW - 1)..=pos]);
            for (k, &fk) in f.iter().enumerate() {
                sums[k] += fk;
                if fk > 0.0 {
                    tops[k].push((fk, context.clone()));
                }
            }
        }
    }
    let mut out = sae.clone();
    for (k, feature) in out.features.iter_mut().enumerate() {
        let mut ctx = std::mem::take(&mut tops[k]);
        // Stable sort keeps corpus order among equal activations.
        ctx.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut seen = BTreeMap::new();
        let chosen: Vec<String> = ctx
            .into_iter()
            .filter(|(_, c)| seen.insert(c.clone(), ()).is_none())
            .take(top_k_contexts)
            .map(|(_, c)| c)
            .collect();
        feature.mean_activation = if count == 0 { 0.0 } else { sums[k] / count as f64 };
        feature.label = if chosen.is_empty() {
            "inactive".to_string()
        } else {
            chosen.join(" | ")
        };
        feature.top_contexts = chosen;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_synthetic_model, ModelConfig};
    use crate::tensor::Matrix;

    fn random_set(n: usize, d: usize, seed: u64) -> ActivationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let data = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
        ActivationSet::new(HookPoint::block_output(1), Matrix::from_vec(n, d, data)).unwrap()
    }

    #[test]
    fn decoder_columns_stay_unit_norm() {
        let set = random_set(16, 4, 0);
        let cfg = SaeConfig {
            m: 8,
            l1: 0.1,
            steps: 50,
            lr: 0.05,
            seed: 1,
        };
        let mut worst: f64 = 0.0;
        let sae = train_sae_observed(&set, &cfg, |_, s| {
            for n in s.decoder_norms() {
                worst = worst.max((n - 1.0).abs());
            }
        })
        .unwrap();
        assert!(worst < 1e-6, "norm deviation {worst}");
        assert!(sae.loss_history.last().unwrap() <= &sae.loss_history[0]);
    }

    pub(crate) fn subspace_set(n: usize, d: usize, seed: u64) -> ActivationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        // Orthonormal basis of a random plane via Gram-Schmidt.
        let mut u: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= nu);
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(x, y)| *x -= dot * y);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let (a, b) = (normal.sample(&mut rng), normal.sample(&mut rng));
            data.extend((0..d).map(|j| (a * u[j] + b * v[j]) as f32));
        }
        ActivationSet::new(HookPoint::block_output(1), Matrix::from_vec(n, d, data)).unwrap()
    }

    #[test]
    fn recovers_plane_without_sparsity_penalty() {
        let set = subspace_set(64, 4, 11);
        let data: Vec<Vec<f64>> = (0..set.len())
            .map(|i| set.rows.row(i).iter().map(|&x| x as f64).collect())
            .collect();
        let cfg = SaeConfig {
            m: 8,
            l1: 0.0,
            steps: 2000,
            lr: 0.05,
            seed: 2,
        };
        let sae = train_sae(&set, &cfg).unwrap();
        let mse = sae.reconstruction_mse(&data);
        eprintln!(
            "mse {mse} first {} last {}",
            sae.loss_history[0],
            sae.loss_history.last().unwrap()
        );
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn gradients_match_central_differences() {
        let set = random_set(6, 4, 21);
        let data: Vec<Vec<f64>> = (0..set.len())
            .map(|i| set.rows.row(i).iter().map(|&x| x as f64).collect())
            .collect();
        let mut sae = SaeModel::init(set.point, 4, 8, 0.3, 5, vec![0.1, -0.2, 0.05, 0.0]);
        sae.b_enc
            .iter_mut()
            .enumerate()
            .for_each(|(k, b)| *b = 0.05 * k as f64 - 0.1);
        let (_, g) = sae.loss_and_grad(&data);
        let analytic: Vec<f64> = [&g.w_enc, &g.b_enc, &g.w_dec, &g.b_dec]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        let h = 1e-6;
        let mut numeric = Vec::new();
        for which in 0..4 {
            let len = [sae.w_enc.len(), sae.b_enc.len(), sae.w_dec.len(), sae.b_dec.len()][which];
            for i in 0..len {
                let eval = |delta: f64| {
                    let mut s = sae.clone();
                    [&mut s.w_enc, &mut s.b_enc, &mut s.w_dec, &mut s.b_dec][which][i] += delta;
                    s.loss_and_grad(&data).0
                };
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            }
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-4, "rel err {}", diff / scale);
    }

    #[test]
    fn invalid_configs_rejected() {
        let set = random_set(4, 4, 0);
        assert!(train_sae(
            &set,
            &SaeConfig {
                m: 0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(train_sae(
            &set,
            &SaeConfig {
                l1: -1.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn feature_vector_is_unit_and_checked() {
        let set = random_set(8, 4, 3);
        let cfg = SaeConfig {
            m: 6,
            steps: 10,
            ..Default::default()
        };
        let sae = train_sae(&set, &cfg).unwrap();
        let v = sae_feature_vector(&sae, 2).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-6);
        assert_eq!(v.values, sae_feature_vector(&sae, 2).unwrap().values);
        assert!(sae_feature_vector(&sae, 6).is_err());
    }

    #[test]
    fn search_conventions() {
        let set = random_set(8, 4, 3);
        let mut sae = train_sae(
            &set,
            &SaeConfig {
                m: 3,
                steps: 1,
                ..Default::default()
            },
        )
        .unwrap();
        for (f, (label, mean)) in
            sae.features
                .iter_mut()
                .zip([("French words", 0.2), ("Chinese text", 0.1), ("numbers", 0.9)])
        {
            f.label = label.into();
            f.mean_activation = mean;
        }
        let hits = search_sae_features(&sae, "chinese", 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, 1);
        let all = search_sae_features(&sae, "", 2);
        assert_eq!(all.iter().map(|f| f.id).collect::<Vec<_>>(), vec![2, 0]);
        assert!(search_sae_features(&sae, "klingon", 5).is_empty());
    }

    #[test]
    fn labeling_is_deterministic_and_marks_inactive() {
        let cfg = ModelConfig::tiny();
        let model = build_synthetic_model(&cfg, 5).unwrap();
        let point = HookPoint::block_output(1);
        let texts: Vec<String> = ["the cat sat", "le chat", "der Hund"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let acts = super::super::collect_activations(&model, &texts, point, Default::default()).unwrap();
        let mut sae = train_sae(
            &acts,
            &SaeConfig {
                m: 4,
                steps: 5,
                ..Default::default()
            },
        )
        .unwrap();
        // Force feature 3 dead.
        for j in 0..sae.d_model {
            sae.w_enc[3 * sae.d_model + j] = 0.0;
        }
        sae.b_enc[3] = -1.0;
        let corpus = PromptSet::new(texts).unwrap();
        let a = label_sae_features(&sae, &model, &corpus, 1).unwrap();
        let b = label_sae_features(&sae, &model, &corpus, 1).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.features[3].label, "inactive");
        assert_eq!(a.features[3].mean_activation, 0.0);
        for f in &a.features[..3] {
            assert!(f.top_contexts.len() <= 1);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let set = random_set(8, 4, 3);
        let sae = train_sae(
            &set,
            &SaeConfig {
                m: 5,
                steps: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.bin");
        sae.save(&path).unwrap();
        let loaded = SaeModel::load(&path).unwrap();
        assert_eq!(loaded.m, 5);
        assert_eq!(loaded.point, sae.point);
        for (a, b) in loaded.w_dec.iter().zip(&sae.w_dec) {
            assert!((a - b).abs() < 1e-6);
        }
        let bytes = std::fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
}
