//! Loading contrastive pairs and prompt sets from JSONL or CSV.
//!
//! Field aliases accepted on input:
//!
//! | canonical      | aliases                                   |
//! |----------------|-------------------------------------------|
//! | `prompt`       | `question`, `input`                       |
//! | `matching`     | `pos`, `positive`, `chosen`               |
//! | `not_matching` | `neg`, `negative`, `rejected`             |
//!
//! Text is kept byte for byte; no trimming or case folding happens here.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_ALIASES: &[&str] = &["prompt", "question", "input"];
pub const MATCHING_ALIASES: &[&str] = &["matching", "pos", "positive", "chosen"];
pub const NOT_MATCHING_ALIASES: &[&str] = &["not_matching", "neg", "negative", "rejected"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub prompt: String,
    pub matching: String,
    pub not_matching: String,
}

impl ContrastivePair {
    pub fn new(prompt: impl Into<String>, matching: impl Into<String>, not_matching: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            matching: matching.into(),
            not_matching: not_matching.into(),
        }
    }

    pub fn matching_text(&self) -> String {
        format!("{}{}", self.prompt, self.matching)
    }

    pub fn not_matching_text(&self) -> String {
        format!("{}{}", self.prompt, self.not_matching)
    }

    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            matching: self.not_matching.clone(),
            not_matching: self.matching.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SteeringDataset {
    pub pairs: Vec<ContrastivePair>,
    pub concept_label: String,
    pub source: String,
}

impl SteeringDataset {
    pub fn new(
        pairs: Vec<ContrastivePair>,
        concept_label: impl Into<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let ds = Self {
            pairs,
            concept_label: concept_label.into(),
            source: source.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Dataset("dataset has no pairs".into()));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.matching == p.not_matching {
                return Err(Error::Dataset(format!(
                    "row {i}: matching and not_matching are identical"
                )));
            }
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            pairs: self.pairs.iter().map(ContrastivePair::swapped).collect(),
            concept_label: self.concept_label.clone(),
            source: self.source.clone(),
        }
    }

    /// Writes the canonical JSONL form, one pair per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(p).expect("pair serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_jsonl().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatHint {
    #[default]
    Auto,
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub prompts: Vec<String>,
    /// Remaining JSON fields of each row, when the source was JSONL.
    pub references: Vec<Option<serde_json::Value>>,
}

impl PromptSet {
    pub fn new(prompts: Vec<String>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Dataset("prompt set is empty".into()));
        }
        let references = vec![None; prompts.len()];
        Ok(Self { prompts, references })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Dataset(format!("{}: not valid UTF-8: {e}", path.display())))
}

fn pick<'a>(get: impl Fn(&str) -> Option<&'a str>, aliases: &[&str]) -> Option<String> {
    aliases.iter().find_map(|a| get(a)).map(str::to_owned)
}

fn build_pair(row: usize, get: impl Fn(&str) -> Option<String>) -> Result<ContrastivePair> {
    let first = |aliases: &[&str]| aliases.iter().find_map(|a| get(a));
    let prompt = first(PROMPT_ALIASES).unwrap_or_default();
    let matching = first(MATCHING_ALIASES);
    let not_matching = first(NOT_MATCHING_ALIASES);
    match (matching, not_matching) {
        (Some(m), Some(n)) => Ok(ContrastivePair::new(prompt, m, n)),
        (None, None) => Err(Error::Dataset(format!(
            "row {row}: neither a matching nor a not_matching field"
        ))),
        (None, Some(_)) => Err(Error::Dataset(format!("row {row}: missing matching field"))),
        (Some(_), None) => Err(Error::Dataset(format!("row {row}: missing not_matching field"))),
    }
}

fn detect_format(path: &Path, text: &str) -> FormatHint {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") | Some("ndjson") => FormatHint::Jsonl,
        Some("csv") => FormatHint::Csv,
        _ => {
            if text.trim_start().starts_with('{') {
                FormatHint::Jsonl
            } else {
                FormatHint::Csv
            }
        }
    }
}

pub fn load_pairs(path: impl AsRef<Path>, hint: FormatHint) -> Result<SteeringDataset> {
    let path = path.as_ref();
    let text = read_text(path)?;
    if text.trim().is_empty() {
        return Err(Error::Dataset(format!("{}: empty file", path.display())));
    }
    let format = match hint {
        FormatHint::Auto => detect_format(path, &text),
        h => h,
    };
    let pairs = match format {
        FormatHint::Jsonl => parse_jsonl_pairs(&text)?,
        FormatHint::Csv => parse_csv_pairs(&text)?,
        FormatHint::Auto => unreachable!(),
    };
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SteeringDataset::new(pairs, label, path.display().to_string())
}

fn parse_jsonl_pairs(text: &str) -> Result<Vec<ContrastivePair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Dataset(format!("line {}: not a JSON object", i + 1)))?;
        pairs.push(build_pair(pairs.len(), |k| {
            obj.get(k).and_then(|v| v.as_str()).map(str::to_owned)
        })?);
    }
    Ok(pairs)
}

fn parse_csv_pairs(text: &str) -> Result<Vec<ContrastivePair>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("csv header: {e}")))?
        .clone();
    let mut pairs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("csv row {i}: {e}")))?;
        pairs.push(build_pair(i, |k| {
            headers
                .iter()
                .position(|h| h.trim() == k)
                .and_then(|idx| record.get(idx))
                .map(str::to_owned)
        })?);
    }
    Ok(pairs)
}

/// One prompt per non-empty line; JSONL rows contribute their prompt field.
pub fn load_prompts(path: impl AsRef<Path>) -> Result<PromptSet> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut prompts = Vec::new();
    let mut references = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| match v {
                serde_json::Value::Object(map) => Some(map),
                _ => None,
            });
        match parsed {
            Some(mut map) => {
                let prompt = pick(|k| map.get(k).and_then(|v| v.as_str()), PROMPT_ALIASES)
                    .ok_or_else(|| Error::Dataset(format!("JSONL row without a prompt field: {line}")))?;
                for a in PROMPT_ALIASES {
                    map.remove(*a);
                }
                prompts.push(prompt);
                references.push((!map.is_empty()).then_some(serde_json::Value::Object(map)));
            }
            None => {
                prompts.push(line.to_string());
                references.push(None);
            }
        }
    }
    if prompts.is_empty() {
        return Err(Error::Dataset(format!("{}: no prompts", path.display())));
    }
    Ok(PromptSet { prompts, references })
}
