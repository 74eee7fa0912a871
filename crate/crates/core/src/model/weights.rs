use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::config::ModelConfig;
use super::container::{NamedTensor, TensorFile};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// vocab_size × d_model
    pub tok_emb: Matrix,
    /// max_seq_len × d_model
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub lnf_gamma: Vec<f32>,
    pub lnf_beta: Vec<f32>,
    /// d_model × vocab_size; column `v` is the output embedding of token `v`.
    pub unembed: Matrix,
}

impl ModelWeights {
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        let mat = |out: &mut Vec<NamedTensor>, name: String, m: &Matrix| {
            out.push(NamedTensor::new(name, vec![m.rows, m.cols], m.data.clone()));
        };
        let vector = |out: &mut Vec<NamedTensor>, name: String, v: &[f32]| {
            out.push(NamedTensor::new(name, vec![v.len()], v.to_vec()));
        };
        mat(&mut out, "tok_emb".into(), &self.tok_emb);
        mat(&mut out, "pos_emb".into(), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            vector(&mut out, format!("blocks.{i}.ln1.gamma"), &b.ln1_gamma);
            vector(&mut out, format!("blocks.{i}.ln1.beta"), &b.ln1_beta);
            mat(&mut out, format!("blocks.{i}.attn.wq"), &b.wq);
            mat(&mut out, format!("blocks.{i}.attn.wk"), &b.wk);
            mat(&mut out, format!("blocks.{i}.attn.wv"), &b.wv);
            mat(&mut out, format!("blocks.{i}.attn.wo"), &b.wo);
            vector(&mut out, format!("blocks.{i}.ln2.gamma"), &b.ln2_gamma);
            vector(&mut out, format!("blocks.{i}.ln2.beta"), &b.ln2_beta);
            mat(&mut out, format!("blocks.{i}.mlp.w1"), &b.w1);
            vector(&mut out, format!("blocks.{i}.mlp.b1"), &b.b1);
            mat(&mut out, format!("blocks.{i}.mlp.w2"), &b.w2);
            vector(&mut out, format!("blocks.{i}.mlp.b2"), &b.b2);
        }
        vector(&mut out, "ln_f.gamma".into(), &self.lnf_gamma);
        vector(&mut out, "ln_f.beta".into(), &self.lnf_beta);
        mat(&mut out, "unembed".into(), &self.unembed);
        out
    }

    pub fn from_tensors(cfg: &ModelConfig, file: &mut TensorFile) -> Result<Self> {
        let d = cfg.d_model;
        let mut take_mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let t = take(file, name, &[rows, cols])?;
            Ok(Matrix::from_vec(rows, cols, t))
        };
        let tok_emb = take_mat("tok_emb", cfg.vocab_size, d)?;
        let pos_emb = take_mat("pos_emb", cfg.max_seq_len, d)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(BlockWeights {
                ln1_gamma: take(file, &p("ln1.gamma"), &[d])?,
                ln1_beta: take(file, &p("ln1.beta"), &[d])?,
                wq: Matrix::from_vec(d, d, take(file, &p("attn.wq"), &[d, d])?),
                wk: Matrix::from_vec(d, d, take(file, &p("attn.wk"), &[d, d])?),
                wv: Matrix::from_vec(d, d, take(file, &p("attn.wv"), &[d, d])?),
                wo: Matrix::from_vec(d, d, take(file, &p("attn.wo"), &[d, d])?),
                ln2_gamma: take(file, &p("ln2.gamma"), &[d])?,
                ln2_beta: take(file, &p("ln2.beta"), &[d])?,
                w1: Matrix::from_vec(d, cfg.d_ff, take(file, &p("mlp.w1"), &[d, cfg.d_ff])?),
                b1: take(file, &p("mlp.b1"), &[cfg.d_ff])?,
                w2: Matrix::from_vec(cfg.d_ff, d, take(file, &p("mlp.w2"), &[cfg.d_ff, d])?),
                b2: take(file, &p("mlp.b2"), &[d])?,
            });
        }
        let lnf_gamma = take(file, "ln_f.gamma", &[d])?;
        let lnf_beta = take(file, "ln_f.beta", &[d])?;
        let unembed = Matrix::from_vec(d, cfg.vocab_size, take(file, "unembed", &[d, cfg.vocab_size])?);
        if let Some(extra) = file.tensors.first() {
            return Err(Error::Format(format!("unexpected tensor {}", extra.name)));
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gamma,
            lnf_beta,
            unembed,
        })
    }

    /// Checks shapes against `cfg` and that every entry is finite.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let check_mat = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows != rows || m.cols != cols || m.data.len() != rows * cols {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {rows}x{cols}, got {}x{}",
                    m.rows, m.cols
                )));
            }
            Ok(())
        };
        let check_vec = |name: &str, v: &[f32], len: usize| -> Result<()> {
            if v.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected length {len}, got {}",
                    v.len()
                )));
            }
            Ok(())
        };
        check_mat("tok_emb", &self.tok_emb, cfg.vocab_size, d)?;
        check_mat("pos_emb", &self.pos_emb, cfg.max_seq_len, d)?;
        check_mat("unembed", &self.unembed, d, cfg.vocab_size)?;
        check_vec("ln_f.gamma", &self.lnf_gamma, d)?;
        check_vec("ln_f.beta", &self.lnf_beta, d)?;
        if self.blocks.len() != cfg.n_layers {
            return Err(Error::ShapeMismatch(format!(
                "expected {} blocks, got {}",
                cfg.n_layers,
                self.blocks.len()
            )));
        }
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo] {
                check_mat("attn", m, d, d)?;
            }
            check_mat("mlp.w1", &b.w1, d, cfg.d_ff)?;
            check_mat("mlp.w2", &b.w2, cfg.d_ff, d)?;
            for v in [&b.ln1_gamma, &b.ln1_beta, &b.ln2_gamma, &b.ln2_beta, &b.b2] {
                check_vec("block vector", v, d)?;
            }
            check_vec("mlp.b1", &b.b1, cfg.d_ff)?;
        }
        for t in self.to_tensors() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {}", t.name)));
            }
        }
        Ok(())
    }
}

fn take(file: &mut TensorFile, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let t = file
        .take(name)
        .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name}")))?;
    if t.shape != shape {
        return Err(Error::ShapeMismatch(format!(
            "{name}: config implies {shape:?}, file declares {:?}",
            t.shape
        )));
    }
    Ok(t.data)
}
