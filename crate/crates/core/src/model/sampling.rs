use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Greedy,
    TopK,
    TopP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    #[serde(default = "default_mode")]
    pub mode: SamplingMode,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> SamplingMode {
    SamplingMode::Greedy
}
fn default_k() -> usize {
    40
}
fn default_p() -> f64 {
    0.9
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_new_tokens() -> usize {
    16
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            k: default_k(),
            p: default_p(),
            temperature: default_temperature(),
            max_new_tokens: default_max_new_tokens(),
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn top_k(k: usize, temperature: f64, max_new_tokens: usize, seed: u64) -> Self {
        Self {
            mode: SamplingMode::TopK,
            k,
            temperature,
            max_new_tokens,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be >= 1".into()));
        }
        if self.mode == SamplingMode::Greedy {
            return Ok(());
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidArgument(format!("p must lie in (0, 1], got {}", self.p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub fn sample_token<R: Rng + ?Sized>(logits: &[f32], params: &SamplingParams, rng: &mut R) -> u32 {
    if params.mode == SamplingMode::Greedy {
        return argmax(logits);
    }
    let scaled: Vec<f32> = logits.iter().map(|&l| (l as f64 / params.temperature) as f32).collect();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));

    let kept: Vec<usize> = match params.mode {
        SamplingMode::TopK => order.into_iter().take(params.k).collect(),
        SamplingMode::TopP => {
            let probs = softmax(&scaled);
            let mut cum = 0.0;
            let mut kept = Vec::new();
            for idx in order {
                kept.push(idx);
                cum += probs[idx];
                if cum >= params.p {
                    break;
                }
            }
            kept
        }
        SamplingMode::Greedy => unreachable!(),
    };
    let kept_logits: Vec<f32> = kept.iter().map(|&i| scaled[i]).collect();
    let probs = softmax(&kept_logits);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return kept[i] as u32;
        }
    }
    *kept.last().expect("at least one candidate") as u32
}
