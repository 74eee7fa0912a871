//! Steering target atoms, simplified: CAA measured in SAE feature space,
//! masked to the most salient atoms, then decoded back.
//!
//! 1. mean SAE feature activations over the matching and not-matching sides;
//! 2. atom score = mean⁺ − mean⁻;
//! 3. keep the ⌈ρ·m⌉ atoms with the largest |score| (ties: lower id);
//! 4. vector = W_dec · masked scores.

use serde::{Deserialize, Serialize};

use crate::datasets::SteeringDataset;
use crate::error::{Error, Result};
use crate::vector::SteeringVector;

use super::{ActivationSource, PositionRule, SaeModel};

pub const STA_VARIANT_TAG: &str = "sta-simplified";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaConfig {
    pub keep_fraction: f64,
}

impl Default for StaConfig {
    fn default() -> Self {
        Self { keep_fraction: 0.25 }
    }
}

/// Decodes `scores` after zeroing all but the top-⌈ρ·m⌉ atoms by magnitude.
pub fn sta_from_scores(sae: &SaeModel, scores: &[f64], keep_fraction: f64) -> Result<Vec<f32>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    if scores.len() != sae.m {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} atoms",
            scores.len(),
            sae.m
        )));
    }
    let keep = ((keep_fraction * sae.m as f64).ceil() as usize).clamp(1, sae.m);
    let mut order: Vec<usize> = (0..sae.m).collect();
    order.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    let mut masked = vec![0.0; sae.m];
    for &k in &order[..keep] {
        masked[k] = scores[k];
    }
    Ok(sae.decode_direction(&masked).into_iter().map(|x| x as f32).collect())
}

/// Per-atom score: mean SAE activation on matching minus not-matching texts.
pub fn sae_contrast_scores<S: ActivationSource + ?Sized>(
    source: &S,
    dataset: &SteeringDataset,
    sae: &SaeModel,
) -> Result<Vec<f64>> {
    dataset.validate()?;
    if sae.d_model != source.d_model() {
        return Err(Error::ShapeMismatch(format!(
            "SAE width {} vs model d_model {}",
            sae.d_model,
            source.d_model()
        )));
    }
    let side_means = |texts: Vec<String>| -> Result<Vec<f64>> {
        let acts = source.activations(&texts, sae.point, PositionRule::FinalToken)?;
        let mut mean = vec![0.0; sae.m];
        for i in 0..acts.len() {
            let a: Vec<f64> = acts.rows.row(i).iter().map(|&x| x as f64).collect();
            mean.iter_mut().zip(sae.encode(&a)).for_each(|(m, f)| *m += f);
        }
        mean.iter_mut().for_each(|m| *m /= acts.len() as f64);
        Ok(mean)
    };
    let pos = side_means(dataset.pairs.iter().map(|p| p.matching_text()).collect())?;
    let neg = side_means(dataset.pairs.iter().map(|p| p.not_matching_text()).collect())?;
    Ok(pos.iter().zip(&neg).map(|(p, n)| p - n).collect())
}

pub fn generate_sta<S: ActivationSource + ?Sized>(
    source: &S,
    dataset: &SteeringDataset,
    sae: &SaeModel,
    cfg: &StaConfig,
) -> Result<SteeringVector> {
    let scores = sae_contrast_scores(source, dataset, sae)?;
    let values = sta_from_scores(sae, &scores, cfg.keep_fraction)?;
    let mut v = SteeringVector::new(sae.point, values, "sta")
        .with_concept(dataset.concept_label.clone())
        .with_provenance(dataset.source.clone(), String::new());
    v.tags.push(STA_VARIANT_TAG.to_string());
    v.validate()?;
    Ok(v)
}
