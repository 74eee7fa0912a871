//! Combining steering vectors: weighted sum, TIES, and DARE followed by TIES.
//!
//! All per-coordinate reductions sum their terms in sorted order, so the
//! result does not depend on the order of the inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::vector::SteeringVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    Linear,
    Ties,
    DareTies,
}

impl MergeStrategy {
    pub fn method_name(self) -> &'static str {
        match self {
            MergeStrategy::Linear => "merge_linear",
            MergeStrategy::Ties => "merge_ties",
            MergeStrategy::DareTies => "merge_dare_ties",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeInput {
    pub vector: SteeringVector,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    pub strategy: MergeStrategy,
    pub inputs: Vec<MergeInput>,
    /// Fraction of coordinates each input keeps when trimming.
    pub density: f64,
    pub drop_rate: f64,
    pub seed: u64,
}

/// Serializable form of a [`MergeSpec`] that names inputs by vector id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRequest {
    pub strategy: MergeStrategy,
    pub inputs: Vec<MergeInputRef>,
    #[serde(default = "one")]
    pub density: f64,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeInputRef {
    pub vector_id: String,
    #[serde(default = "one")]
    pub weight: f64,
}

impl MergeSpec {
    pub fn new(strategy: MergeStrategy, inputs: Vec<(SteeringVector, f64)>) -> Self {
        Self {
            strategy,
            inputs: inputs
                .into_iter()
                .map(|(vector, weight)| MergeInput { vector, weight })
                .collect(),
            density: 1.0,
            drop_rate: 0.0,
            seed: 0,
        }
    }

    pub fn with_density(mut self, density: f64) -> Self {
        self.density = density;
        self
    }

    pub fn with_drop(mut self, drop_rate: f64, seed: u64) -> Self {
        self.drop_rate = drop_rate;
        self.seed = seed;
        self
    }

    /// Reference form, with inputs sorted by id so permuted specs agree.
    pub fn to_request(&self) -> MergeRequest {
        let mut inputs: Vec<MergeInputRef> = self
            .inputs
            .iter()
            .map(|i| MergeInputRef {
                vector_id: i.vector.digest(),
                weight: i.weight,
            })
            .collect();
        inputs.sort_by(|a, b| a.vector_id.cmp(&b.vector_id).then(a.weight.total_cmp(&b.weight)));
        MergeRequest {
            strategy: self.strategy,
            inputs,
            density: self.density,
            drop_rate: self.drop_rate,
            seed: self.seed,
            name: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("merge needs at least one input".into()))?;
        for input in &self.inputs {
            let v = &input.vector;
            v.validate()?;
            if v.layer != first.vector.layer || v.site != first.vector.site {
                return Err(Error::ShapeMismatch(format!(
                    "cannot merge a vector at {} with one at {}",
                    v.hook_point(),
                    first.vector.hook_point()
                )));
            }
            if v.d_model() != first.vector.d_model() {
                return Err(Error::ShapeMismatch(format!(
                    "cannot merge dimension {} with dimension {}",
                    v.d_model(),
                    first.vector.d_model()
                )));
            }
            if !input.weight.is_finite() {
                return Err(Error::NonFinite("merge weight".into()));
            }
        }
        Ok(())
    }

    fn scaled_inputs(&self) -> Vec<Vec<f64>> {
        self.inputs
            .iter()
            .map(|i| i.vector.values.iter().map(|&x| i.weight * x as f64).collect())
            .collect()
    }

    fn finish(&self, values: Vec<f64>) -> SteeringVector {
        let first = &self.inputs[0].vector;
        let mut parents: Vec<String> = self.inputs.iter().map(|i| i.vector.digest()).collect();
        parents.sort();
        parents.dedup();
        let mut concepts: Vec<&str> = self
            .inputs
            .iter()
            .map(|i| i.vector.concept_label.as_str())
            .filter(|c| !c.is_empty())
            .collect();
        concepts.sort();
        concepts.dedup();
        let request = serde_json::to_value(self.to_request()).expect("request serializes");
        let mut out = SteeringVector::new(
            first.hook_point(),
            values.into_iter().map(|x| x as f32).collect(),
            self.strategy.method_name(),
        )
        .with_concept(concepts.join("+"))
        .with_provenance("merge", json_digest(&request));
        out.parents = parents;
        out.merge_spec = Some(request);
        out
    }
}

fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// `Σ_i λ_i · v_i`
pub fn linear_merge(spec: &MergeSpec) -> Result<SteeringVector> {
    spec.validate()?;
    let scaled = spec.scaled_inputs();
    let d = scaled[0].len();
    let values = (0..d)
        .map(|j| sorted_sum(scaled.iter().map(|v| v[j]).collect()))
        .collect();
    Ok(spec.finish(values))
}

/// Zeroes all but the `keep` largest-magnitude coordinates; ties keep the
/// lower index.
fn trim(v: &[f64], keep: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    for &j in order.iter().take(keep) {
        out[j] = v[j];
    }
    out
}

fn ties_core(scaled: &[Vec<f64>], density: f64) -> Result<Vec<f64>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "TIES density must lie in (0, 1], got {density}"
        )));
    }
    let d = scaled[0].len();
    let keep = ((density * d as f64).ceil() as usize).clamp(1, d);
    let trimmed: Vec<Vec<f64>> = scaled.iter().map(|v| trim(v, keep)).collect();
    let values = (0..d)
        .map(|j| {
            let column: Vec<f64> = trimmed.iter().map(|t| t[j]).collect();
            let elected = sorted_sum(column.clone());
            if elected == 0.0 {
                return 0.0;
            }
            let agree: Vec<f64> = column
                .into_iter()
                .filter(|&x| x != 0.0 && (x > 0.0) == (elected > 0.0))
                .collect();
            let n = agree.len() as f64;
            sorted_sum(agree) / n
        })
        .collect();
    Ok(values)
}

/// Trim, elect sign, disjoint mean.
pub fn ties_merge(spec: &MergeSpec) -> Result<SteeringVector> {
    spec.validate()?;
    let values = ties_core(&spec.scaled_inputs(), spec.density)?;
    Ok(spec.finish(values))
}

/// Per-input RNG keyed by the merge seed and the input's content id, so
/// reordering inputs never changes which coordinates are dropped.
fn drop_rng(seed: u64, parent_digest: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(parent_digest.as_bytes());
    let bytes: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(bytes)
}

/// Random drop with rate `p` and `1/(1−p)` rescaling of survivors, then TIES.
pub fn dare_ties_merge(spec: &MergeSpec) -> Result<SteeringVector> {
    spec.validate()?;
    let p = spec.drop_rate;
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "DARE drop rate must lie in [0, 1), got {p}"
        )));
    }
    let dropped: Vec<Vec<f64>> = spec
        .inputs
        .iter()
        .map(|input| {
            let mut rng = drop_rng(spec.seed, &input.vector.digest());
            input
                .vector
                .values
                .iter()
                .map(|&x| {
                    let draw: f64 = rng.random();
                    if draw < p {
                        0.0
                    } else {
                        input.weight * (x as f64 / (1.0 - p))
                    }
                })
                .collect()
        })
        .collect();
    let values = ties_core(&dropped, spec.density)?;
    Ok(spec.finish(values))
}

pub fn merge(spec: &MergeSpec) -> Result<SteeringVector> {
    match spec.strategy {
        MergeStrategy::Linear => linear_merge(spec),
        MergeStrategy::Ties => ties_merge(spec),
        MergeStrategy::DareTies => dare_ties_merge(spec),
    }
}
