//! The steering vector: a direction at one hook point plus the metadata
//! needed to reproduce it.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::digest::{f32s_to_le_bytes, json_digest};
use crate::error::{Error, Result};
use crate::model::{HookPoint, Site};
use crate::tensor::l2_norm;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_source: String,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub layer: usize,
    pub site: Site,
    pub values: Vec<f32>,
    pub method: String,
    pub concept_label: String,
    /// UI default only; the applier always uses the multiplier it is given.
    pub default_multiplier: f32,
    pub provenance: Provenance,
    /// Content ids of the vectors this one was merged from.
    pub parents: Vec<String>,
    pub merge_spec: Option<serde_json::Value>,
    pub tags: Vec<String>,
    /// Unix seconds.
    pub created_at: u64,
}

/// Fields that define a vector's identity. Name, tags and creation time
/// are deliberately absent so relabeling never changes the id.
#[derive(Serialize)]
struct IdentityPayload<'a> {
    layer: usize,
    site: Site,
    d_model: usize,
    values_b64: String,
    method: &'a str,
    concept_label: &'a str,
    default_multiplier: f32,
    dataset_source: &'a str,
    config_digest: &'a str,
    parents: &'a [String],
    merge_spec: &'a Option<serde_json::Value>,
}

impl SteeringVector {
    pub fn new(point: HookPoint, values: Vec<f32>, method: impl Into<String>) -> Self {
        Self {
            layer: point.layer,
            site: point.site,
            values,
            method: method.into(),
            concept_label: String::new(),
            default_multiplier: 1.0,
            provenance: Provenance::default(),
            parents: Vec::new(),
            merge_spec: None,
            tags: Vec::new(),
            created_at: now_unix(),
        }
    }

    pub fn with_concept(mut self, label: impl Into<String>) -> Self {
        self.concept_label = label.into();
        self
    }

    pub fn with_provenance(mut self, dataset_source: impl Into<String>, config_digest: impl Into<String>) -> Self {
        self.provenance = Provenance {
            dataset_source: dataset_source.into(),
            config_digest: config_digest.into(),
        };
        self
    }

    pub fn hook_point(&self) -> HookPoint {
        HookPoint {
            layer: self.layer,
            site: self.site,
        }
    }

    pub fn d_model(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn values_b64(&self) -> String {
        B64.encode(f32s_to_le_bytes(&self.values))
    }

    /// Content id: SHA-256 of the canonical identity payload.
    pub fn digest(&self) -> String {
        json_digest(&IdentityPayload {
            layer: self.layer,
            site: self.site,
            d_model: self.values.len(),
            values_b64: self.values_b64(),
            method: &self.method,
            concept_label: &self.concept_label,
            default_multiplier: self.default_multiplier,
            dataset_source: &self.provenance.dataset_source,
            config_digest: &self.provenance.config_digest,
            parents: &self.parents,
            merge_spec: &self.merge_spec,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidArgument("steering vector has no values".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} steering vector", self.method)));
        }
        if !self.default_multiplier.is_finite() {
            return Err(Error::NonFinite("default multiplier".into()));
        }
        Ok(())
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = -*v);
        out
    }
}

/// Current time in unix seconds, or `SOURCE_DATE_EPOCH` when set so that
/// reproducible runs emit byte-identical artifacts.
pub fn now_unix() -> u64 {
    if let Some(epoch) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
    {
        return epoch;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
