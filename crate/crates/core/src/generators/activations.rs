use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ByteTokenizer, HookPoint, Model};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRule {
    #[default]
    FinalToken,
    MeanPool,
}

/// N activations × d_model at one hook point.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub point: HookPoint,
    pub rows: Matrix,
    /// Index of the source text each row came from.
    pub source_ids: Vec<usize>,
}

impl ActivationSet {
    pub fn new(point: HookPoint, rows: Matrix) -> Result<Self> {
        if rows.rows == 0 {
            return Err(Error::InvalidArgument("activation set is empty".into()));
        }
        if !rows.is_finite() {
            return Err(Error::NonFinite("activation set".into()));
        }
        let source_ids = (0..rows.rows).collect();
        Ok(Self {
            point,
            rows,
            source_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows == 0
    }

    pub fn d_model(&self) -> usize {
        self.rows.cols
    }

    pub fn scaled(&self, c: f32) -> Self {
        let mut out = self.clone();
        out.rows.data.iter_mut().for_each(|v| *v *= c);
        out
    }
}

/// Anything that can turn texts into activations at a hook point.
pub trait ActivationSource {
    fn d_model(&self) -> usize;
    fn activations(&self, texts: &[String], point: HookPoint, rule: PositionRule) -> Result<ActivationSet>;
}

impl ActivationSource for Model {
    fn d_model(&self) -> usize {
        self.config().d_model
    }

    fn activations(&self, texts: &[String], point: HookPoint, rule: PositionRule) -> Result<ActivationSet> {
        collect_activations(self, texts, point, rule)
    }
}

pub fn collect_activations(
    model: &Model,
    texts: &[String],
    point: HookPoint,
    rule: PositionRule,
) -> Result<ActivationSet> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no texts to collect activations from".into()));
    }
    point.validate(model.config().n_layers)?;
    let d = model.config().d_model;
    let mut rows = Matrix::zeros(texts.len(), d);
    for (i, text) in texts.iter().enumerate() {
        let tokens = ByteTokenizer.encode_checked(text, model.config().vocab_size)?;
        let out = model.forward(&tokens, &[])?;
        let act = out.trace.get(&point).expect("every hook point is traced");
        let row = rows.row_mut(i);
        match rule {
            PositionRule::FinalToken => row.copy_from_slice(act.row(act.rows - 1)),
            PositionRule::MeanPool => {
                for (j, r) in row.iter_mut().enumerate() {
                    let sum: f64 = (0..act.rows).map(|p| act.get(p, j) as f64).sum();
                    *r = (sum / act.rows as f64) as f32;
                }
            }
        }
    }
    ActivationSet::new(point, rows)
}

/// Activations at every token position of every text, one row per token.
pub fn collect_token_activations(model: &Model, texts: &[String], point: HookPoint) -> Result<ActivationSet> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no texts to collect activations from".into()));
    }
    point.validate(model.config().n_layers)?;
    let d = model.config().d_model;
    let mut data = Vec::new();
    for text in texts {
        let tokens = ByteTokenizer.encode_checked(text, model.config().vocab_size)?;
        let out = model.forward(&tokens, &[])?;
        data.extend_from_slice(&out.trace.get(&point).expect("every hook point is traced").data);
    }
    let rows = data.len() / d;
    ActivationSet::new(point, Matrix::from_vec(rows, d, data))
}
