//! The generate → apply → evaluate pipeline driven by a resolved config.
//!
//! Every invocation writes `manifest.json` in the output directory, on
//! failure too, naming the stage that failed. Stages that were not run keep
//! whatever the previous manifest recorded for them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use steerkit::applier::{apply_plan, Attachment, LmSteerAttachment, SteeringPlan};
use steerkit::datasets::{load_pairs, load_prompts, FormatHint, PromptSet, SteeringDataset};
use steerkit::eval::run_eval;
use steerkit::generators::{
    collect_token_activations, generate_caa, generate_sta, label_sae_features, sae_contrast_scores, sae_feature_vector,
    train_lm_steer, train_sae, LmSteerConfig, SaeConfig, SaeModel, StaConfig,
};
use steerkit::hparams::{ApplyConfig, GenerateConfig, ResolvedConfig, SaeSource};
use steerkit::store::VectorStore;
use steerkit::vector::now_unix;
use steerkit::{Error, HookPoint, Model, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUTPUT_FILE: &str = "outputs.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Apply,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Generate, Stage::Apply, Stage::Evaluate];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Apply => "apply",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// "ok", "skipped" or "failed".
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureInfo {
    pub stage: Stage,
    pub error_code: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub status: String,
    pub config_digest: String,
    pub created_at: u64,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureInfo>,
    /// Method name → ids of vectors generated for it.
    #[serde(default)]
    pub vectors: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_steer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_steer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sae_checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_file: Option<String>,
}

pub struct Pipeline<'a> {
    cfg: &'a ResolvedConfig,
    out_dir: PathBuf,
    model: Option<Arc<Model>>,
    dataset: Option<SteeringDataset>,
    sae_cache: Vec<(SaeSource, SaeModel)>,
    manifest: Manifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a ResolvedConfig) -> Self {
        let out_dir = cfg.path(&cfg.top.output_dir);
        let previous: Option<Manifest> = std::fs::read(out_dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let mut manifest = previous.unwrap_or_default();
        manifest.schema_version = 1;
        manifest.stages.clear();
        manifest.failure = None;
        Self {
            cfg,
            out_dir,
            model: None,
            dataset: None,
            sae_cache: Vec::new(),
            manifest,
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Runs `stages` in fixed order and writes the manifest either way.
    pub fn run(&mut self, stages: &[Stage]) -> Result<&Manifest> {
        if Stage::ALL.iter().all(|s| stages.contains(s)) {
            self.manifest = Manifest {
                schema_version: 1,
                ..Default::default()
            };
        }
        self.manifest.config_digest = self.cfg.digest();
        self.manifest.created_at = now_unix();
        let mut outcome = Ok(());
        for stage in Stage::ALL {
            if !stages.contains(&stage) {
                continue;
            }
            if outcome.is_err() {
                self.record(stage, "skipped", Some("an earlier stage failed".into()));
                continue;
            }
            match self.run_stage(stage) {
                Ok(note) => self.record(stage, if note.is_some() { "skipped" } else { "ok" }, note),
                Err(e) => {
                    self.record(stage, "failed", None);
                    self.manifest.failure = Some(FailureInfo {
                        stage,
                        error_code: e.code().to_string(),
                        message: e.to_string(),
                    });
                    outcome = Err(e);
                }
            }
        }
        self.manifest.status = if outcome.is_ok() { "ok" } else { "failed" }.into();
        write_json(&self.out_dir.join(RESOLVED_CONFIG_FILE), &self.cfg.to_value())?;
        write_json(&self.out_dir.join(MANIFEST_FILE), &self.manifest)?;
        outcome.map(|_| &self.manifest)
    }

    fn record(&mut self, stage: Stage, status: &str, note: Option<String>) {
        self.manifest.stages.push(StageRecord {
            stage,
            status: status.into(),
            note,
        });
    }

    /// `Ok(Some(reason))` means the stage had nothing to do.
    fn run_stage(&mut self, stage: Stage) -> Result<Option<String>> {
        match stage {
            Stage::Generate => {
                if self.cfg.generate.is_empty() {
                    return Ok(Some("no methods_to_generate".into()));
                }
                self.generate()?;
            }
            Stage::Apply => {
                if self.cfg.apply.is_empty() {
                    return Ok(Some("no methods_to_apply".into()));
                }
                self.apply()?;
            }
            Stage::Evaluate => {
                let Some(spec) = &self.cfg.top.evaluation else {
                    return Ok(Some("no evaluation configured".into()));
                };
                let output = self.out_dir.join(OUTPUT_FILE);
                if self.manifest.output_file.is_none() {
                    return Ok(Some("no output file to evaluate".into()));
                }
                let mut report = run_eval(&output, spec)?;
                report.run_config_digest = Some(self.cfg.digest());
                write_json(&self.out_dir.join(REPORT_FILE), &report)?;
                self.manifest.report_file = Some(REPORT_FILE.into());
            }
        }
        Ok(None)
    }

    pub fn model(&mut self) -> Result<Arc<Model>> {
        if let Some(m) = &self.model {
            return Ok(m.clone());
        }
        let m = Arc::new(self.cfg.top.model.build(&self.cfg.root)?);
        self.model = Some(m.clone());
        Ok(m)
    }

    fn store(&self) -> Result<VectorStore> {
        VectorStore::open(self.cfg.path(&self.cfg.top.store_dir))
    }

    fn dataset(&mut self) -> Result<SteeringDataset> {
        if let Some(d) = &self.dataset {
            return Ok(d.clone());
        }
        let path = self
            .cfg
            .top
            .datasets
            .train
            .as_ref()
            .ok_or_else(|| Error::Config("datasets.train is not set".into()))?;
        let d = load_pairs(self.cfg.path(path), FormatHint::Auto)?;
        self.dataset = Some(d.clone());
        Ok(d)
    }

    pub fn sae_corpus(&mut self) -> Result<PromptSet> {
        match &self.cfg.top.datasets.sae_corpus {
            Some(p) => load_prompts(self.cfg.path(p)),
            None => {
                let d = self.dataset()?;
                let texts = d
                    .pairs
                    .iter()
                    .flat_map(|p| [p.matching_text(), p.not_matching_text()])
                    .collect();
                PromptSet::new(texts)
            }
        }
    }

    /// Loads the configured checkpoint, or trains and labels a new SAE and
    /// saves it next to the run outputs.
    pub fn sae(&mut self, src: &SaeSource) -> Result<SaeModel> {
        if let Some((_, sae)) = self.sae_cache.iter().find(|(s, _)| s == src) {
            return Ok(sae.clone());
        }
        let model = self.model()?;
        let sae = match &src.checkpoint {
            Some(p) => SaeModel::load(self.cfg.path(p))?,
            None => {
                let point = HookPoint {
                    layer: src.layer.unwrap_or(model.config().default_layer_for(src.site)),
                    site: src.site,
                };
                let corpus = self.sae_corpus()?;
                let acts = collect_token_activations(&model, &corpus.prompts, point)?;
                let cfg = SaeConfig {
                    m: src.m,
                    l1: src.l1,
                    steps: src.steps,
                    lr: src.lr,
                    seed: src.seed.unwrap_or(self.cfg.top.seed),
                };
                let trained = train_sae(&acts, &cfg)?;
                let labeled = label_sae_features(&trained, &model, &corpus, src.label_top_k)?;
                let name = format!("sae-{}-{}.bin", point.site, point.layer);
                labeled.save(self.out_dir.join(&name))?;
                self.manifest.sae_checkpoint = Some(name);
                labeled
            }
        };
        self.sae_cache.push((src.clone(), sae.clone()));
        Ok(sae)
    }

    fn generate(&mut self) -> Result<()> {
        let store = self.store()?;
        let digest = self.cfg.digest();
        let mut vectors = BTreeMap::new();
        for (kind, gen) in self.cfg.generate.clone() {
            match gen {
                GenerateConfig::Prompt(p) => {
                    let text = match p.text {
                        Some(t) => t,
                        None => p.template.replace("{concept}", &self.dataset()?.concept_label),
                    };
                    self.manifest.prompt_steer = Some(text);
                }
                GenerateConfig::Caa(c) => {
                    let model = self.model()?;
                    let ds = self.dataset()?;
                    let point = HookPoint {
                        layer: c.layer.unwrap_or(model.config().default_layer_for(c.site)),
                        site: c.site,
                    };
                    let mut v = generate_caa(model.as_ref(), &ds, point, c.position)?;
                    v.provenance.config_digest = digest.clone();
                    let id = store.save_vector(&format!("{}-caa", ds.concept_label), &v)?;
                    vectors.insert(kind.as_str().to_string(), vec![id]);
                }
                GenerateConfig::LmSteer(c) => {
                    let model = self.model()?;
                    let ds = self.dataset()?;
                    let cfg = LmSteerConfig {
                        steps: c.steps,
                        lr: c.lr,
                        rank: c.rank,
                        epsilon: c.epsilon,
                        seed: c.seed.unwrap_or(self.cfg.top.seed),
                    };
                    let m = train_lm_steer(&model, &ds, &cfg)?;
                    let id = store.save_lm_steer(&format!("{}-lm_steer", ds.concept_label), &m)?;
                    self.manifest.lm_steer = Some(id);
                }
                GenerateConfig::SaeFeature(c) => {
                    let sae = self.sae(&c.sae)?;
                    let ds = self.dataset()?;
                    let ids = if c.feature_ids.is_empty() {
                        let scores = sae_contrast_scores(self.model()?.as_ref(), &ds, &sae)?;
                        // Highest score; ties go to the lower id.
                        let best = (0..scores.len()).fold(0, |best, k| if scores[k] > scores[best] { k } else { best });
                        vec![best]
                    } else {
                        c.feature_ids.clone()
                    };
                    let mut saved = Vec::new();
                    for fid in ids {
                        let v = sae_feature_vector(&sae, fid)?
                            .with_concept(ds.concept_label.clone())
                            .with_provenance(ds.source.clone(), digest.clone());
                        saved.push(store.save_vector(&format!("{}-sae_feature-{fid}", ds.concept_label), &v)?);
                    }
                    vectors.insert(kind.as_str().to_string(), saved);
                }
                GenerateConfig::Sta(c) => {
                    let sae = self.sae(&c.sae)?;
                    let ds = self.dataset()?;
                    let model = self.model()?;
                    let mut v = generate_sta(
                        model.as_ref(),
                        &ds,
                        &sae,
                        &StaConfig {
                            keep_fraction: c.keep_fraction,
                        },
                    )?;
                    v.provenance.config_digest = digest.clone();
                    let id = store.save_vector(&format!("{}-sta", ds.concept_label), &v)?;
                    vectors.insert(kind.as_str().to_string(), vec![id]);
                }
            }
        }
        for (k, v) in vectors {
            self.manifest.vectors.insert(k, v);
        }
        Ok(())
    }

    /// Builds the steering plan for `methods_to_apply`, in listed order.
    pub fn plan(&mut self) -> Result<SteeringPlan> {
        let store = self.store()?;
        let mut plan = SteeringPlan::default();
        for (kind, cfg) in self.cfg.apply.clone() {
            match cfg {
                ApplyConfig::Prompt(p) => {
                    let text = p
                        .text
                        .or_else(|| self.manifest.prompt_steer.clone())
                        .ok_or_else(|| Error::Config("apply.prompt has no text and no prompt was generated".into()))?;
                    plan.prompt_steer = Some(text);
                }
                ApplyConfig::Vector(v) => {
                    let records = match &v.vector {
                        Some(key) => vec![store.load_vector(key)?],
                        None => self
                            .manifest
                            .vectors
                            .get(kind.as_str())
                            .filter(|ids| !ids.is_empty())
                            .ok_or_else(|| Error::NotFound(format!("no generated {kind} vector to apply")))?
                            .iter()
                            .map(|id| store.load_by_id(id))
                            .collect::<Result<Vec<_>>>()?,
                    };
                    for r in records {
                        plan.attachments.push(Attachment {
                            vector: r.vector,
                            multiplier: v.multiplier,
                        });
                    }
                }
                ApplyConfig::LmSteer(l) => {
                    let key = l
                        .matrix
                        .clone()
                        .or_else(|| self.manifest.lm_steer.clone())
                        .ok_or_else(|| Error::NotFound("no generated lm_steer matrix to apply".into()))?;
                    let file = store.load_lm_steer(&key)?;
                    plan.lm_steer = Some(LmSteerAttachment {
                        id: file.id,
                        matrix: file.matrix,
                        multiplier: l.multiplier,
                    });
                }
            }
        }
        Ok(plan)
    }

    fn apply(&mut self) -> Result<()> {
        let prompts_path = self
            .cfg
            .top
            .datasets
            .eval_prompts
            .as_ref()
            .ok_or_else(|| Error::Config("datasets.eval_prompts is required to apply".into()))?;
        let prompts = load_prompts(self.cfg.path(prompts_path))?;
        let plan = self.plan()?;
        let wrapped = apply_plan(self.model()?, plan)?;
        wrapped.batch_generate(&prompts, &self.cfg.top.sampling, &self.out_dir.join(OUTPUT_FILE))?;
        wrapped.verify_unchanged()?;
        self.manifest.plan_digest = Some(wrapped.plan_digest().to_string());
        self.manifest.output_file = Some(OUTPUT_FILE.into());
        Ok(())
    }
}

/// Convenience wrapper: all stages.
pub fn run_all(cfg: &ResolvedConfig) -> Result<Manifest> {
    let mut p = Pipeline::new(cfg);
    p.run(&Stage::ALL).cloned()
}
