//! Two-tier run configuration.
//!
//! A top-level JSON file names the model, the datasets, which methods to
//! generate and apply, and the evaluation. Each method's parameters come
//! from a per-method object, given inline or as a path to a JSON file.
//! Resolution fills every default, so the resolved form is
//! self-contained: re-resolving it is the identity, and its digest is what
//! run artifacts record.
//!
//! Relative paths resolve against `$STEERKIT_CONFIG_ROOT` when set, else
//! against the directory of the top-level file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::eval::EvalSpec;
use crate::generators::PositionRule;
use crate::model::{
    build_demo_concept_model, build_synthetic_model, container::read_config, Model, ModelConfig, SamplingParams, Site,
};

pub const CONFIG_ROOT_ENV: &str = "STEERKIT_CONFIG_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Prompt,
    Caa,
    LmSteer,
    SaeFeature,
    Sta,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::Prompt,
        MethodKind::Caa,
        MethodKind::LmSteer,
        MethodKind::SaeFeature,
        MethodKind::Sta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Prompt => "prompt",
            MethodKind::Caa => "caa",
            MethodKind::LmSteer => "lm_steer",
            MethodKind::SaeFeature => "sae_feature",
            MethodKind::Sta => "sta",
        }
    }

    /// Whether the method produces an activation vector for the store.
    pub fn yields_vector(self) -> bool {
        matches!(self, MethodKind::Caa | MethodKind::SaeFeature | MethodKind::Sta)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
            Error::Config(format!("unknown method {s:?}; known methods: {}", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// A weights container on disk.
    File { path: String },
    /// Seeded random weights.
    Synthetic {
        #[serde(default = "ModelConfig::tiny")]
        config: ModelConfig,
        #[serde(default)]
        seed: u64,
    },
    /// Synthetic weights with a planted concept direction; the bytes of
    /// `concept_a` and `concept_b` are the two token sets.
    Demo {
        #[serde(default = "ModelConfig::tiny")]
        config: ModelConfig,
        concept_a: String,
        concept_b: String,
        #[serde(default)]
        seed: u64,
    },
}

impl ModelSource {
    pub fn model_config(&self, root: &Path) -> Result<ModelConfig> {
        match self {
            ModelSource::File { path } => {
                let header = read_config(&resolve_path(root, path))?;
                let cfg: ModelConfig =
                    serde_json::from_value(header).map_err(|e| Error::Config(format!("model file {path}: {e}")))?;
                cfg.validate()?;
                Ok(cfg)
            }
            ModelSource::Synthetic { config, .. } | ModelSource::Demo { config, .. } => {
                config.validate()?;
                Ok(config.clone())
            }
        }
    }

    pub fn build(&self, root: &Path) -> Result<Model> {
        match self {
            ModelSource::File { path } => Model::load(resolve_path(root, path)),
            ModelSource::Synthetic { config, seed } => build_synthetic_model(config, *seed),
            ModelSource::Demo {
                config,
                concept_a,
                concept_b,
                seed,
            } => {
                let a: Vec<u32> = concept_a.bytes().map(u32::from).collect();
                let b: Vec<u32> = concept_b.bytes().map(u32::from).collect();
                Ok(build_demo_concept_model(config, &a, &b, *seed)?.0)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    /// Contrastive pairs (JSONL or CSV).
    #[serde(default)]
    pub train: Option<String>,
    /// Prompts for batch generation.
    #[serde(default)]
    pub eval_prompts: Option<String>,
    /// Texts for SAE training and feature labeling; defaults to the
    /// training pairs' texts.
    #[serde(default)]
    pub sae_corpus: Option<String>,
}

fn default_prompt_template() -> String {
    "Respond in a way that expresses {concept}. ".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptGenerate {
    /// Literal steering prompt; when absent the template is filled with
    /// the dataset's concept label.
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default = "default_prompt_template")]
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaaGenerate {
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default = "default_site")]
    pub site: Site,
    #[serde(default)]
    pub position: PositionRule,
}

fn default_site() -> Site {
    Site::BlockOutput
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSteerGenerate {
    #[serde(default = "d_lm_steps")]
    pub steps: usize,
    #[serde(default = "d_lm_lr")]
    pub lr: f64,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default = "d_lm_eps")]
    pub epsilon: f64,
    /// Defaults to the top-level seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn d_lm_steps() -> usize {
    100
}
fn d_lm_lr() -> f64 {
    0.5
}
fn d_lm_eps() -> f64 {
    1e-2
}

/// SAE source shared by `sae_feature` and `sta`: a checkpoint, or training
/// parameters for one fitted on the SAE corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSource {
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default = "default_site")]
    pub site: Site,
    #[serde(default = "d_sae_m")]
    pub m: usize,
    #[serde(default = "d_sae_l1")]
    pub l1: f64,
    #[serde(default = "d_sae_steps")]
    pub steps: usize,
    #[serde(default = "d_sae_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Contexts kept per feature when labeling.
    #[serde(default = "d_label_k")]
    pub label_top_k: usize,
}

fn d_sae_m() -> usize {
    32
}
fn d_sae_l1() -> f64 {
    1e-3
}
fn d_sae_steps() -> usize {
    500
}
fn d_sae_lr() -> f64 {
    0.05
}
fn d_label_k() -> usize {
    3
}

impl Default for SaeSource {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("all fields default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeFeatureGenerate {
    #[serde(default)]
    pub sae: SaeSource,
    /// Features to turn into vectors. Empty means the single feature with
    /// the highest matching-minus-not-matching activation.
    #[serde(default)]
    pub feature_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaGenerate {
    #[serde(default)]
    pub sae: SaeSource,
    #[serde(default = "d_keep")]
    pub keep_fraction: f64,
}

fn d_keep() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GenerateConfig {
    Prompt(PromptGenerate),
    Caa(CaaGenerate),
    LmSteer(LmSteerGenerate),
    SaeFeature(SaeFeatureGenerate),
    Sta(StaGenerate),
}

fn d_multiplier() -> f32 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptApply {
    /// Overrides the generated prompt.
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorApply {
    #[serde(default = "d_multiplier")]
    pub multiplier: f32,
    /// Stored vector id or name; defaults to what this run generated.
    #[serde(default)]
    pub vector: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSteerApply {
    #[serde(default = "d_multiplier")]
    pub multiplier: f32,
    #[serde(default)]
    pub matrix: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ApplyConfig {
    Prompt(PromptApply),
    Vector(VectorApply),
    LmSteer(LmSteerApply),
}

fn d_output_dir() -> String {
    "out".into()
}
fn d_store_dir() -> String {
    "store".into()
}
fn d_range() -> [f32; 2] {
    [-2.0, 2.0]
}

/// Top-level file as written; also the serialized resolved form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub methods_to_generate: Vec<String>,
    #[serde(default)]
    pub methods_to_apply: Vec<String>,
    /// Method name → inline object or path to a per-method file.
    #[serde(default)]
    pub generate: BTreeMap<String, Value>,
    #[serde(default)]
    pub apply: BTreeMap<String, Value>,
    #[serde(default)]
    pub datasets: DatasetPaths,
    #[serde(default)]
    pub evaluation: Option<EvalSpec>,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default = "d_output_dir")]
    pub output_dir: String,
    #[serde(default = "d_store_dir")]
    pub store_dir: String,
    #[serde(default)]
    pub seed: u64,
    /// Multiplier slider bounds offered to clients.
    #[serde(default = "d_range")]
    pub multiplier_range: [f32; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    /// Normalized form: every listed method has a complete inline object.
    pub top: TopConfig,
    pub model_config: ModelConfig,
    /// In `methods_to_generate` order.
    pub generate: Vec<(MethodKind, GenerateConfig)>,
    /// In `methods_to_apply` order, which is also attachment order.
    pub apply: Vec<(MethodKind, ApplyConfig)>,
    /// Base directory for relative paths; not part of the digest.
    pub root: PathBuf,
}

pub fn resolve_path(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn config_root(top_path: &Path) -> PathBuf {
    match std::env::var_os(CONFIG_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root),
        _ => top_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    }
}

fn read_json_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn parse_section<T: DeserializeOwned>(what: &str, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Inline objects pass through; strings are read as per-method files.
fn load_method_value(root: &Path, what: &str, v: Option<&Value>) -> Result<Value> {
    match v {
        None | Some(Value::Null) => Ok(Value::Object(Default::default())),
        Some(Value::String(path)) => {
            let full = resolve_path(root, path);
            if !full.exists() {
                return Err(Error::Config(format!(
                    "{what}: config file {} does not exist",
                    full.display()
                )));
            }
            read_json_file(&full)
        }
        Some(obj @ Value::Object(_)) => Ok(obj.clone()),
        Some(other) => Err(Error::Config(format!(
            "{what}: expected an object or a path, got {other}"
        ))),
    }
}

fn resolve_generate(kind: MethodKind, v: Value, cfg: &ModelConfig, seed: u64) -> Result<GenerateConfig> {
    let what = format!("generate.{kind}");
    let fill_sae = |sae: &mut SaeSource| {
        sae.layer.get_or_insert(cfg.default_layer_for(sae.site));
        sae.seed.get_or_insert(seed);
    };
    Ok(match kind {
        MethodKind::Prompt => GenerateConfig::Prompt(parse_section(&what, v)?),
        MethodKind::Caa => {
            let mut c: CaaGenerate = parse_section(&what, v)?;
            c.layer.get_or_insert(cfg.default_layer_for(c.site));
            GenerateConfig::Caa(c)
        }
        MethodKind::LmSteer => {
            let mut c: LmSteerGenerate = parse_section(&what, v)?;
            c.seed.get_or_insert(seed);
            GenerateConfig::LmSteer(c)
        }
        MethodKind::SaeFeature => {
            let mut c: SaeFeatureGenerate = parse_section(&what, v)?;
            fill_sae(&mut c.sae);
            GenerateConfig::SaeFeature(c)
        }
        MethodKind::Sta => {
            let mut c: StaGenerate = parse_section(&what, v)?;
            fill_sae(&mut c.sae);
            if !(c.keep_fraction > 0.0 && c.keep_fraction <= 1.0) {
                return Err(Error::Config(format!("{what}.keep_fraction must lie in (0, 1]")));
            }
            GenerateConfig::Sta(c)
        }
    })
}

fn resolve_apply(kind: MethodKind, v: Value) -> Result<ApplyConfig> {
    let what = format!("apply.{kind}");
    let out = match kind {
        MethodKind::Prompt => ApplyConfig::Prompt(parse_section(&what, v)?),
        MethodKind::LmSteer => ApplyConfig::LmSteer(parse_section(&what, v)?),
        _ => ApplyConfig::Vector(parse_section(&what, v)?),
    };
    let multiplier = match &out {
        ApplyConfig::Vector(c) => Some(c.multiplier),
        ApplyConfig::LmSteer(c) => Some(c.multiplier),
        ApplyConfig::Prompt(_) => None,
    };
    if multiplier.is_some_and(|m| !m.is_finite()) {
        return Err(Error::Config(format!("{what}.multiplier must be finite")));
    }
    Ok(out)
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("config types serialize")
}

fn parse_methods(what: &str, names: &[String]) -> Result<Vec<MethodKind>> {
    let mut out: Vec<MethodKind> = Vec::new();
    for name in names {
        let kind: MethodKind = name.parse().map_err(|e: Error| Error::Config(format!("{what}: {e}")))?;
        if out.contains(&kind) {
            return Err(Error::Config(format!("{what}: {kind} listed twice")));
        }
        out.push(kind);
    }
    Ok(out)
}

/// Validates `raw` and fills every default.
pub fn resolve(raw: Value, root: &Path) -> Result<ResolvedConfig> {
    let mut top: TopConfig = parse_section("top-level config", raw)?;
    let model_config = top.model.model_config(root)?;
    top.sampling.validate()?;
    let [lo, hi] = top.multiplier_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!(
            "multiplier_range [{lo}, {hi}] is not a finite interval"
        )));
    }
    if let Some(spec) = &top.evaluation {
        spec.validate()?;
    }
    let gen_kinds = parse_methods("methods_to_generate", &top.methods_to_generate)?;
    let apply_kinds = parse_methods("methods_to_apply", &top.methods_to_apply)?;
    for (section, map, listed) in [
        ("generate", &top.generate, &gen_kinds),
        ("apply", &top.apply, &apply_kinds),
    ] {
        for key in map.keys() {
            let kind: MethodKind = key
                .parse()
                .map_err(|e: Error| Error::Config(format!("{section}: {e}")))?;
            if !listed.contains(&kind) {
                return Err(Error::Config(format!(
                    "{section}.{key} is configured but not listed in methods_to_{section}"
                )));
            }
        }
    }

    let mut generate = Vec::new();
    let mut gen_map = BTreeMap::new();
    for &kind in &gen_kinds {
        let v = load_method_value(root, &format!("generate.{kind}"), top.generate.get(kind.as_str()))?;
        let cfg = resolve_generate(kind, v, &model_config, top.seed)?;
        if let GenerateConfig::Caa(CaaGenerate {
            layer: Some(l), site, ..
        }) = &cfg
        {
            crate::model::HookPoint { layer: *l, site: *site }.validate(model_config.n_layers)?;
        }
        gen_map.insert(kind.as_str().to_string(), to_value(&cfg));
        generate.push((kind, cfg));
    }
    let mut apply = Vec::new();
    let mut apply_map = BTreeMap::new();
    for &kind in &apply_kinds {
        let v = load_method_value(root, &format!("apply.{kind}"), top.apply.get(kind.as_str()))?;
        let cfg = resolve_apply(kind, v)?;
        let external = match &cfg {
            ApplyConfig::Vector(c) => c.vector.is_some(),
            ApplyConfig::LmSteer(c) => c.matrix.is_some(),
            ApplyConfig::Prompt(c) => c.text.is_some(),
        };
        if !external && !gen_kinds.contains(&kind) {
            return Err(Error::Config(format!(
                "apply.{kind} names no stored artifact and {kind} is not in methods_to_generate"
            )));
        }
        apply_map.insert(kind.as_str().to_string(), to_value(&cfg));
        apply.push((kind, cfg));
    }
    let needs_pairs = generate
        .iter()
        .any(|(_, c)| !matches!(c, GenerateConfig::Prompt(PromptGenerate { text: Some(_), .. })));
    if needs_pairs && top.datasets.train.is_none() {
        return Err(Error::Config("datasets.train is required to generate vectors".into()));
    }
    top.generate = gen_map;
    top.apply = apply_map;
    Ok(ResolvedConfig {
        top,
        model_config,
        generate,
        apply,
        root: root.to_path_buf(),
    })
}

pub fn load_config(path: &Path) -> Result<ResolvedConfig> {
    resolve(read_json_file(path)?, &config_root(path))
}

/// Loads and applies `key.path=value` overrides.
pub fn load_config_with_overrides(path: &Path, overrides: &[String]) -> Result<ResolvedConfig> {
    let cfg = load_config(path)?;
    if overrides.is_empty() {
        return Ok(cfg);
    }
    validate_overrides(&cfg, overrides)
}

/// Splits `a.b.c=value`; the value parses as JSON, falling back to a plain
/// string so `--set output_dir=runs/x` works unquoted.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key.path=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[String], value: Value, raw: &str) -> Result<()> {
    let mut cur = root;
    for seg in path {
        cur = match cur {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("override {raw:?}: unknown key path")))?;
    }
    *cur = value;
    Ok(())
}

/// Applies overrides to the resolved form and re-validates. Key paths must
/// exist there; optional fields appear as `null` so they can be set.
pub fn validate_overrides(config: &ResolvedConfig, overrides: &[String]) -> Result<ResolvedConfig> {
    let mut v = config.to_value();
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        set_path(&mut v, &path, value, raw)?;
    }
    resolve(v, &config.root)
}

impl ResolvedConfig {
    pub fn to_value(&self) -> Value {
        to_value(&self.top)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.top).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        json_digest(&self.top)
    }

    pub fn path(&self, p: &str) -> PathBuf {
        resolve_path(&self.root, p)
    }

    pub fn generate_config(&self, kind: MethodKind) -> Option<&GenerateConfig> {
        self.generate.iter().find(|(k, _)| *k == kind).map(|(_, c)| c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "model": {"source": "synthetic"},
            "methods_to_generate": ["caa"],
            "methods_to_apply": ["caa"],
            "datasets": {"train": "pairs.jsonl"}
        })
    }

    fn root() -> PathBuf {
        PathBuf::from(".")
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = resolve(minimal(), &root()).unwrap();
        match &cfg.generate[0].1 {
            GenerateConfig::Caa(c) => assert_eq!(c.layer, Some(ModelConfig::tiny().n_layers / 2)),
            other => panic!("{other:?}"),
        }
        match &cfg.apply[0].1 {
            ApplyConfig::Vector(v) => assert_eq!(v.multiplier, 1.0),
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.top.multiplier_range, [-2.0, 2.0]);
    }

    #[test]
    fn merging_is_not_a_generator() {
        let mut raw = minimal();
        raw["methods_to_generate"] = json!(["ties"]);
        let err = resolve(raw, &root()).unwrap_err();
        assert!(err.to_string().contains("unknown method \"ties\""), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut raw = minimal();
        raw["generate"] = json!({"caa": {"layer": 1, "multiplier": 2.0}});
        assert!(resolve(raw, &root()).is_err());
        let mut raw = minimal();
        raw["extra"] = json!(1);
        assert!(resolve(raw, &root()).is_err());
        let mut raw = minimal();
        raw["apply"] = json!({"caa": {"multiplier": "big"}});
        assert!(resolve(raw, &root()).is_err());
    }

    #[test]
    fn resolution_round_trips() {
        let cfg = resolve(minimal(), &root()).unwrap();
        let again = resolve(cfg.to_value(), &root()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn overrides() {
        let cfg = resolve(minimal(), &root()).unwrap();
        for m in [2.0f32, -2.0] {
            let o = validate_overrides(&cfg, &[format!("apply.caa.multiplier={m}")]).unwrap();
            match &o.apply[0].1 {
                ApplyConfig::Vector(v) => assert_eq!(v.multiplier, m),
                other => panic!("{other:?}"),
            }
        }
        assert!(validate_overrides(&cfg, &["nonexistent.key=1".into()]).is_err());
        assert!(validate_overrides(&cfg, &["apply.caa.multiplier=\"x\"".into()]).is_err());
        let o = validate_overrides(&cfg, &["output_dir=runs/a".into()]).unwrap();
        assert_eq!(o.top.output_dir, "runs/a");
        let o = validate_overrides(&cfg, &["generate.caa.layer=0".into()]).unwrap();
        assert!(matches!(&o.generate[0].1, GenerateConfig::Caa(c) if c.layer == Some(0)));
        assert!(validate_overrides(&cfg, &["generate.caa.layer=7".into()]).is_err());
    }

    #[test]
    fn method_files_resolve_against_root() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("caa.json"), r#"{"layer": 0, "position": "mean_pool"}"#).unwrap();
        let mut raw = minimal();
        raw["generate"] = json!({"caa": "caa.json"});
        let top = dir.path().join("top.json");
        std::fs::write(&top, serde_json::to_string(&raw).unwrap()).unwrap();
        let cfg = load_config(&top).unwrap();
        assert!(
            matches!(&cfg.generate[0].1, GenerateConfig::Caa(c) if c.layer == Some(0) && c.position == PositionRule::MeanPool)
        );
        raw["generate"] = json!({"caa": "missing.json"});
        std::fs::write(&top, serde_json::to_string(&raw).unwrap()).unwrap();
        assert!(load_config(&top).is_err());
    }

    #[test]
    fn apply_needs_a_source() {
        let mut raw = minimal();
        raw["methods_to_generate"] = json!([]);
        assert!(resolve(raw.clone(), &root()).is_err());
        raw["apply"] = json!({"caa": {"vector": "safety"}});
        assert!(resolve(raw, &root()).is_ok());
    }

    #[test]
    fn override_parsing() {
        assert_eq!(
            parse_override("a.b=2").unwrap(),
            (vec!["a".into(), "b".into()], json!(2))
        );
        assert_eq!(parse_override("a=hi there").unwrap().1, json!("hi there"));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }
}
