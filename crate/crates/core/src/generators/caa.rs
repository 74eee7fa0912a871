//! Contrastive activation addition: the mean activation difference between
//! concept-positive and concept-negative completions.

use crate::datasets::SteeringDataset;
use crate::error::{Error, Result};
use crate::model::HookPoint;
use crate::vector::SteeringVector;

use super::{ActivationSet, ActivationSource, PositionRule};

/// `(1/N) Σ_i (pos_i − neg_i)`, accumulated in f64.
pub fn caa_from_activations(pos: &ActivationSet, neg: &ActivationSet) -> Result<Vec<f32>> {
    if pos.len() != neg.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} positive vs {} negative activations",
            pos.len(),
            neg.len()
        )));
    }
    if pos.d_model() != neg.d_model() {
        return Err(Error::ShapeMismatch(format!(
            "positive width {} vs negative width {}",
            pos.d_model(),
            neg.d_model()
        )));
    }
    let (n, d) = (pos.len(), pos.d_model());
    let mut acc = vec![0.0f64; d];
    for i in 0..n {
        for ((a, &p), &q) in acc.iter_mut().zip(pos.rows.row(i)).zip(neg.rows.row(i)) {
            *a += p as f64 - q as f64;
        }
    }
    Ok(acc.into_iter().map(|s| (s / n as f64) as f32).collect())
}

pub fn generate_caa<S: ActivationSource + ?Sized>(
    source: &S,
    dataset: &SteeringDataset,
    point: HookPoint,
    rule: PositionRule,
) -> Result<SteeringVector> {
    dataset.validate()?;
    let pos: Vec<String> = dataset.pairs.iter().map(|p| p.matching_text()).collect();
    let neg: Vec<String> = dataset.pairs.iter().map(|p| p.not_matching_text()).collect();
    let pos = source.activations(&pos, point, rule)?;
    let neg = source.activations(&neg, point, rule)?;
    if pos.d_model() != source.d_model() {
        return Err(Error::ShapeMismatch(format!(
            "activation width {} differs from source d_model {}",
            pos.d_model(),
            source.d_model()
        )));
    }
    let values = caa_from_activations(&pos, &neg)?;
    let mut v = SteeringVector::new(point, values, "caa")
        .with_concept(dataset.concept_label.clone())
        .with_provenance(dataset.source.clone(), String::new());
    if rule == PositionRule::MeanPool {
        v.tags.push("mean-pool".into());
    }
    v.validate()?;
    Ok(v)
}
