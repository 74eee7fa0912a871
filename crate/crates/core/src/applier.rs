//! Executes a steering plan against an unmodified base model.
//!
//! Order within one decoding step is fixed: the prompt-steer prefix is
//! prepended once before tokenization, activation attachments are added at
//! their hook points in listed order, and the LM-Steer adjustment is applied
//! to the logits last, from the already steered final hidden state.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::PromptSet;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::generators::{LmSteerMatrix, LmSteerProcessor};
use crate::model::{ByteTokenizer, ForwardTrace, Hook, LogitProcessor, Model, SamplingParams};
use crate::store::VectorStore;
use crate::vector::SteeringVector;

#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub vector: SteeringVector,
    /// The effective addition is `multiplier · values`; the vector's own
    /// default multiplier is never applied on top.
    pub multiplier: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmSteerAttachment {
    pub id: String,
    pub matrix: LmSteerMatrix,
    pub multiplier: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SteeringPlan {
    pub attachments: Vec<Attachment>,
    pub lm_steer: Option<LmSteerAttachment>,
    pub prompt_steer: Option<String>,
    /// Reserved for decoding-based methods; anything non-empty is rejected.
    pub decoding_steer: Option<Value>,
}

/// JSON form of a plan, naming stored artifacts by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRef {
    #[serde(default)]
    pub attachments: Vec<AttachmentRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_steer: Option<LmSteerRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_steer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoding_steer: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachmentRef {
    pub vector_id: String,
    pub multiplier: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSteerRef {
    pub id: String,
    pub multiplier: f32,
}

impl PlanRef {
    /// SHA-256 of the canonical JSON form. Absent optional fields are
    /// omitted rather than written as null.
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    /// Loads every referenced artifact from `store`.
    pub fn resolve(&self, store: &VectorStore) -> Result<SteeringPlan> {
        let attachments = self
            .attachments
            .iter()
            .map(|a| {
                Ok(Attachment {
                    vector: store.load_by_id(&a.vector_id)?.vector,
                    multiplier: a.multiplier,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lm_steer = match &self.lm_steer {
            Some(r) => {
                let file = store.load_lm_steer(&r.id)?;
                Some(LmSteerAttachment {
                    id: file.id,
                    matrix: file.matrix,
                    multiplier: r.multiplier,
                })
            }
            None => None,
        };
        Ok(SteeringPlan {
            attachments,
            lm_steer,
            prompt_steer: self.prompt_steer.clone(),
            decoding_steer: self.decoding_steer.clone(),
        })
    }
}

impl SteeringPlan {
    pub fn to_ref(&self) -> PlanRef {
        PlanRef {
            attachments: self
                .attachments
                .iter()
                .map(|a| AttachmentRef {
                    vector_id: a.vector.digest(),
                    multiplier: a.multiplier,
                })
                .collect(),
            lm_steer: self.lm_steer.as_ref().map(|l| LmSteerRef {
                id: l.id.clone(),
                multiplier: l.multiplier,
            }),
            prompt_steer: self.prompt_steer.clone(),
            decoding_steer: self.decoding_steer.clone(),
        }
    }

    pub fn digest(&self) -> String {
        self.to_ref().digest()
    }

    pub fn is_empty(&self) -> bool {
        self.attachments.is_empty() && self.lm_steer.is_none() && self.prompt_steer.is_none()
    }
}

fn is_blank(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::Object(m) => m.is_empty(),
        Value::Array(a) => a.is_empty(),
        Value::String(s) => s.is_empty(),
        _ => false,
    }
}

/// A base model paired with a validated plan. Cheap to clone and safe to
/// share; each generation call owns its RNG and trace.
#[derive(Debug, Clone)]
pub struct WrappedModel {
    base: Arc<Model>,
    plan: SteeringPlan,
    plan_digest: String,
    weights_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Continuation only; neither the prompt nor the prompt-steer prefix.
    pub text: String,
    pub tokens: Vec<u32>,
    /// Activations over prompt plus continuation, when requested.
    pub trace: Option<ForwardTrace>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRow {
    pub prompt: String,
    pub output: String,
    pub plan_digest: String,
    pub seed: u64,
}

pub fn apply_plan(model: Arc<Model>, plan: SteeringPlan) -> Result<WrappedModel> {
    if plan.decoding_steer.as_ref().is_some_and(|v| !is_blank(v)) {
        return Err(Error::NotImplemented("decoding-based steering".into()));
    }
    let weights_digest = model.weights_digest();
    let cfg = model.config();
    for a in &plan.attachments {
        a.vector.validate()?;
        a.vector.hook_point().validate(cfg.n_layers)?;
        if a.vector.d_model() != cfg.d_model {
            return Err(Error::ShapeMismatch(format!(
                "{} vector has dimension {}, model has d_model {}",
                a.vector.method,
                a.vector.d_model(),
                cfg.d_model
            )));
        }
        if !a.multiplier.is_finite() {
            return Err(Error::NonFinite("attachment multiplier".into()));
        }
    }
    if let Some(l) = &plan.lm_steer {
        if l.matrix.d_model != cfg.d_model || l.matrix.w.len() != cfg.d_model * cfg.d_model {
            return Err(Error::ShapeMismatch(format!(
                "LM-Steer matrix has d_model {}, model has {}",
                l.matrix.d_model, cfg.d_model
            )));
        }
        if !l.multiplier.is_finite() {
            return Err(Error::NonFinite("LM-Steer multiplier".into()));
        }
    }
    let plan_digest = plan.digest();
    let wrapped = WrappedModel {
        base: model,
        plan,
        plan_digest,
        weights_digest,
    };
    wrapped.verify_unchanged()?;
    Ok(wrapped)
}

impl WrappedModel {
    pub fn base(&self) -> &Arc<Model> {
        &self.base
    }

    pub fn plan(&self) -> &SteeringPlan {
        &self.plan
    }

    pub fn plan_digest(&self) -> &str {
        &self.plan_digest
    }

    pub fn weights_digest(&self) -> &str {
        &self.weights_digest
    }

    /// Confirms the base weights still hash to the digest taken at wrap time.
    pub fn verify_unchanged(&self) -> Result<()> {
        let now = self.base.weights_digest();
        if now != self.weights_digest {
            return Err(Error::DigestMismatch {
                id: "model weights".into(),
                actual: now,
            });
        }
        Ok(())
    }

    pub fn hooks(&self) -> Vec<Hook<'_>> {
        self.plan
            .attachments
            .iter()
            .map(|a| Hook::new(a.vector.hook_point(), &a.vector.values, a.multiplier))
            .collect()
    }

    /// Tokens actually fed to the model: prompt-steer prefix plus prompt.
    pub fn input_tokens(&self, prompt: &str) -> Result<Vec<u32>> {
        let text = match &self.plan.prompt_steer {
            Some(prefix) => format!("{prefix}{prompt}"),
            None => prompt.to_string(),
        };
        ByteTokenizer.encode_checked(&text, self.base.config().vocab_size)
    }

    fn processor(&self) -> Option<LmSteerProcessor<'_>> {
        self.plan.lm_steer.as_ref().map(|l| LmSteerProcessor {
            matrix: &l.matrix,
            multiplier: l.multiplier,
            unembed: self.base.unembedding(),
        })
    }

    pub fn steered_generate(&self, prompt: &str, sampling: &SamplingParams, with_trace: bool) -> Result<Generation> {
        self.steered_generate_streaming(prompt, sampling, with_trace, |_| true)
    }

    /// Streams token ids to `on_token`; returning `false` stops early.
    pub fn steered_generate_streaming(
        &self,
        prompt: &str,
        sampling: &SamplingParams,
        with_trace: bool,
        on_token: impl FnMut(u32) -> bool,
    ) -> Result<Generation> {
        let input = self.input_tokens(prompt)?;
        let hooks = self.hooks();
        let processor = self.processor();
        let tokens = self.base.generate_streaming(
            &input,
            sampling,
            &hooks,
            processor.as_ref().map(|p| p as &dyn LogitProcessor),
            on_token,
        )?;
        let trace = if with_trace {
            let mut full = input;
            full.extend_from_slice(&tokens);
            Some(self.base.forward(&full, &hooks)?.trace)
        } else {
            None
        };
        Ok(Generation {
            text: ByteTokenizer.decode(&tokens),
            tokens,
            trace,
        })
    }

    /// Unsteered generation from the same base model.
    pub fn base_generate(&self, prompt: &str, sampling: &SamplingParams) -> Result<Generation> {
        self.base_generate_streaming(prompt, sampling, |_| true)
    }

    pub fn base_generate_streaming(
        &self,
        prompt: &str,
        sampling: &SamplingParams,
        on_token: impl FnMut(u32) -> bool,
    ) -> Result<Generation> {
        let input = ByteTokenizer.encode_checked(prompt, self.base.config().vocab_size)?;
        let tokens = self.base.generate_streaming(&input, sampling, &[], None, on_token)?;
        Ok(Generation {
            text: ByteTokenizer.decode(&tokens),
            tokens,
            trace: None,
        })
    }

    /// Baseline and steered continuations with the same seed.
    pub fn compare_generate(&self, prompt: &str, sampling: &SamplingParams) -> Result<(String, String)> {
        let baseline = self.base_generate(prompt, sampling)?;
        let steered = self.steered_generate(prompt, sampling, false)?;
        Ok((baseline.text, steered.text))
    }

    /// Generates one row per prompt, in prompt order, and writes them as JSONL.
    pub fn batch_generate(
        &self,
        prompts: &PromptSet,
        sampling: &SamplingParams,
        output: &Path,
    ) -> Result<Vec<OutputRow>> {
        if prompts.is_empty() {
            return Err(Error::Dataset("prompt set is empty".into()));
        }
        let rows = prompts
            .prompts
            .iter()
            .map(|p| {
                Ok(OutputRow {
                    prompt: p.clone(),
                    output: self.steered_generate(p, sampling, false)?.text,
                    plan_digest: self.plan_digest.clone(),
                    seed: sampling.seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut body = String::new();
        for row in &rows {
            body.push_str(&serde_json::to_string(row)?);
            body.push('\n');
        }
        write_atomic(output, body.as_bytes())?;
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_demo_concept_model, build_synthetic_model, HookPoint, ModelConfig};

    fn model() -> Arc<Model> {
        Arc::new(build_synthetic_model(&ModelConfig::tiny(), 3).unwrap())
    }

    fn attach(values: Vec<f32>, layer: usize, multiplier: f32) -> Attachment {
        Attachment {
            vector: SteeringVector::new(HookPoint::block_output(layer), values, "caa"),
            multiplier,
        }
    }

    #[test]
    fn empty_plan_is_neutral() {
        let m = model();
        let w = apply_plan(m.clone(), SteeringPlan::default()).unwrap();
        let sampling = SamplingParams::top_k(5, 0.8, 12, 42);
        let (base, steered) = w.compare_generate("hello", &sampling).unwrap();
        assert_eq!(base, steered);
        let direct = m.generate(&ByteTokenizer.encode("hello"), &sampling, &[]).unwrap();
        assert_eq!(ByteTokenizer.decode(&direct), steered);
    }

    #[test]
    fn zero_multipliers_are_neutral() {
        let m = model();
        let plan = SteeringPlan {
            attachments: vec![attach(vec![3.0; 16], 1, 0.0)],
            ..Default::default()
        };
        let w = apply_plan(m, plan).unwrap();
        let (base, steered) = w.compare_generate("abc", &SamplingParams::greedy(10)).unwrap();
        assert_eq!(base, steered);
    }

    #[test]
    fn rejects_bad_plans() {
        let m = model();
        let wrong_dim = SteeringPlan {
            attachments: vec![attach(vec![1.0; 8], 1, 1.0)],
            ..Default::default()
        };
        assert!(matches!(apply_plan(m.clone(), wrong_dim), Err(Error::ShapeMismatch(_))));
        let decoding = SteeringPlan {
            decoding_steer: Some(serde_json::json!({"method": "contrastive"})),
            ..Default::default()
        };
        assert!(matches!(apply_plan(m.clone(), decoding), Err(Error::NotImplemented(_))));
        let bad_layer = SteeringPlan {
            attachments: vec![attach(vec![1.0; 16], 9, 1.0)],
            ..Default::default()
        };
        assert!(apply_plan(m, bad_layer).is_err());
    }

    #[test]
    fn weights_are_untouched() {
        let m = model();
        let before = m.weights_digest();
        let plan = SteeringPlan {
            attachments: vec![attach(vec![0.5; 16], 1, 2.0)],
            lm_steer: Some(LmSteerAttachment {
                id: "x".into(),
                matrix: LmSteerMatrix::identity(16, 0.1),
                multiplier: 1.0,
            }),
            ..Default::default()
        };
        let w = apply_plan(m.clone(), plan).unwrap();
        w.steered_generate("xyz", &SamplingParams::greedy(5), true).unwrap();
        w.verify_unchanged().unwrap();
        assert_eq!(m.weights_digest(), before);
    }

    #[test]
    fn prompt_steer_prefixes_input() {
        let plan = SteeringPlan {
            prompt_steer: Some("Answer in French. ".into()),
            ..Default::default()
        };
        let w = apply_plan(model(), plan).unwrap();
        assert_eq!(
            w.input_tokens("Hi").unwrap(),
            ByteTokenizer.encode("Answer in French. Hi")
        );
        let g = w.steered_generate("Hi", &SamplingParams::greedy(4), false).unwrap();
        assert_eq!(g.tokens.len(), 4);
    }

    #[test]
    fn overlong_prefixed_prompt_fails() {
        let plan = SteeringPlan {
            prompt_steer: Some("x".repeat(120)),
            ..Default::default()
        };
        let w = apply_plan(model(), plan).unwrap();
        assert!(matches!(
            w.steered_generate("hello", &SamplingParams::greedy(8), false),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn trace_differs_by_plan_sum() {
        let m = model();
        let v1: Vec<f32> = (0..16).map(|i| i as f32 * 0.1).collect();
        let v2: Vec<f32> = (0..16).map(|i| 1.0 - i as f32 * 0.05).collect();
        let plan = SteeringPlan {
            attachments: vec![attach(v1.clone(), 1, 1.5), attach(v2.clone(), 1, -0.5)],
            ..Default::default()
        };
        let w = apply_plan(m.clone(), plan).unwrap();
        let point = HookPoint::block_output(1);
        let tokens = ByteTokenizer.encode("steer");
        let base = m.forward(&tokens, &[]).unwrap();
        let steered = m.forward(&tokens, &w.hooks()).unwrap();
        let mut expected = base.trace.get(&point).unwrap().clone();
        for r in 0..expected.rows {
            for (j, x) in expected.row_mut(r).iter_mut().enumerate() {
                *x += 1.5 * v1[j];
                *x += -0.5 * v2[j];
            }
        }
        assert_eq!(steered.trace.get(&point).unwrap(), &expected);
    }

    #[test]
    fn sign_symmetry() {
        let m = model();
        let v: Vec<f32> = (0..16).map(|i| (i as f32 - 7.5) * 0.2).collect();
        let a = apply_plan(
            m.clone(),
            SteeringPlan {
                attachments: vec![attach(v.clone(), 2, 1.25)],
                ..Default::default()
            },
        )
        .unwrap();
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let b = apply_plan(
            m,
            SteeringPlan {
                attachments: vec![attach(neg, 2, -1.25)],
                ..Default::default()
            },
        )
        .unwrap();
        let s = SamplingParams::greedy(6);
        let ga = a.steered_generate("sym", &s, true).unwrap();
        let gb = b.steered_generate("sym", &s, true).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn demo_concept_mass_rises_with_alpha() {
        let cfg = ModelConfig::tiny();
        let (m, dir) = build_demo_concept_model(&cfg, &[65, 66, 67], &[88, 89], 5).unwrap();
        let m = Arc::new(m);
        let point = HookPoint::final_hidden(cfg.n_layers);
        let mass = |alpha: f32| {
            let v = SteeringVector::new(point, dir.clone(), "known_direction");
            let w = apply_plan(
                m.clone(),
                SteeringPlan {
                    attachments: vec![Attachment {
                        vector: v,
                        multiplier: alpha,
                    }],
                    ..Default::default()
                },
            )
            .unwrap();
            let logits = m
                .next_token_logits(&w.input_tokens("the").unwrap(), &w.hooks(), None)
                .unwrap();
            let p = crate::tensor::softmax(&logits);
            [65usize, 66, 67].iter().map(|&t| p[t]).sum::<f64>()
        };
        assert!(mass(1.0) > mass(0.0));
    }

    #[test]
    fn batch_rows_follow_prompt_order() {
        let dir = tempfile::tempdir().unwrap();
        let w = apply_plan(model(), SteeringPlan::default()).unwrap();
        let prompts = PromptSet::new(vec!["one".into(), "two".into(), "three".into()]).unwrap();
        let s = SamplingParams::top_k(8, 1.0, 6, 11);
        let out = dir.path().join("out.jsonl");
        let rows = w.batch_generate(&prompts, &s, &out).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.prompt.as_str()).collect::<Vec<_>>(),
            ["one", "two", "three"]
        );
        let first = std::fs::read(&out).unwrap();
        w.batch_generate(&prompts, &s, &out).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), first);
        let empty = PromptSet {
            prompts: vec![],
            references: vec![],
        };
        assert!(w.batch_generate(&empty, &s, &out).is_err());
    }

    #[test]
    fn plan_ref_round_trip_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let store = VectorStore::open(dir.path()).unwrap();
        let v = SteeringVector::new(HookPoint::block_output(1), vec![0.25; 16], "caa");
        let id = store.save_vector("v", &v).unwrap();
        let plan_ref = PlanRef {
            attachments: vec![AttachmentRef {
                vector_id: id.clone(),
                multiplier: -2.0,
            }],
            ..Default::default()
        };
        let plan = plan_ref.resolve(&store).unwrap();
        assert_eq!(plan.to_ref(), plan_ref);
        assert_eq!(plan.digest(), plan_ref.digest());
        let json = serde_json::to_string(&plan_ref).unwrap();
        assert_eq!(
            json,
            format!(r#"{{"attachments":[{{"vector_id":"{id}","multiplier":-2.0}}]}}"#)
        );
        let missing = PlanRef {
            attachments: vec![AttachmentRef {
                vector_id: "a".repeat(64),
                multiplier: 1.0,
            }],
            ..Default::default()
        };
        assert!(matches!(missing.resolve(&store), Err(Error::NotFound(_))));
    }
}
