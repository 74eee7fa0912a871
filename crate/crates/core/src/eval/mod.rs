//! Scoring of generated outputs.
//!
//! Rule-based metrics live in [`metrics`]; the HTTP rubric judge in
//! [`judge`]. [`run_eval`] reads an applier output file and aggregates the
//! requested metrics into an [`EvalReport`].

pub mod judge;
pub mod metrics;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::json_digest;
use crate::error::{Error, Result};

pub use judge::{
    llm_judge, parse_reply, render_template, HttpJudge, JudgeOutcome, RubricScores, JUDGE_TEMPLATE, JUDGE_TEMPLATE_ID,
};
pub use metrics::{
    classify_keyword, defense_rate, fluency_ngram, harmonic_mean_rubric, keyword_toxicity, positive_rate, Label,
    Lexicon, TOXICITY_THRESHOLD,
};

/// Bumped whenever the report layout or the judge template changes.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const METRIC_NAMES: &[&str] = &["fluency", "defense_rate", "positive_rate", "rubric"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LexiconPurpose {
    #[default]
    Sentiment,
    /// Only the `negative` terms are used, as toxic vocabulary.
    Toxicity,
}

fn default_timeout_ms() -> u64 {
    5000
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerPlugin {
    KeywordLexicon {
        #[serde(default)]
        purpose: LexiconPurpose,
        #[serde(default)]
        positive: Vec<String>,
        #[serde(default)]
        negative: Vec<String>,
    },
    ExternalHttp {
        endpoint: String,
        #[serde(default)]
        concept: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_concurrency")]
        max_concurrency: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub metrics: Vec<String>,
    #[serde(default)]
    pub plugins: Vec<ScorerPlugin>,
}

impl EvalSpec {
    pub fn new<S: AsRef<str>>(metrics: &[S], plugins: Vec<ScorerPlugin>) -> Self {
        Self {
            metrics: metrics.iter().map(|m| m.as_ref().to_string()).collect(),
            plugins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::Config("no metrics requested".into()));
        }
        for m in &self.metrics {
            if !METRIC_NAMES.contains(&m.as_str()) {
                return Err(Error::UnknownMetric(m.clone()));
            }
        }
        for p in &self.plugins {
            if let ScorerPlugin::ExternalHttp { max_concurrency: 0, .. } = p {
                return Err(Error::Config("judge max_concurrency must be at least 1".into()));
            }
        }
        Ok(())
    }

    fn wants(&self, metric: &str) -> bool {
        self.metrics.iter().any(|m| m == metric)
    }

    fn lexicon(&self, purpose: LexiconPurpose) -> Option<Lexicon> {
        self.plugins.iter().find_map(|p| match p {
            ScorerPlugin::KeywordLexicon {
                purpose: p,
                positive,
                negative,
            } if *p == purpose => Some(Lexicon {
                positive: positive.clone(),
                negative: negative.clone(),
            }),
            _ => None,
        })
    }

    fn judge(&self) -> Option<(HttpJudge, String)> {
        self.plugins.iter().find_map(|p| match p {
            ScorerPlugin::ExternalHttp {
                endpoint,
                concept,
                timeout_ms,
                max_concurrency,
            } => {
                let mut j = HttpJudge::new(endpoint.clone(), Duration::from_millis(*timeout_ms));
                j.max_concurrency = *max_concurrency;
                Some((j, concept.clone()))
            }
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutput {
    pub prompt: String,
    pub output: String,
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric: Option<RubricScores>,
    /// Metric name → reason, for rows a scorer could not score.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub unscored: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub metrics: Vec<String>,
    pub sample_count: usize,
    pub means: BTreeMap<String, f64>,
    pub defense_rate: Option<f64>,
    pub positive_rate: Option<f64>,
    pub fluency: Option<f64>,
    /// Mean of per-row harmonic means over scored rows.
    pub harmonic_mean: Option<f64>,
    /// Metric name → fraction of rows that received a score.
    pub coverage: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_template_id: Option<String>,
    /// Digest of the evaluation spec.
    pub config_digest: String,
    /// Digest of the enclosing run configuration, when run from a pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config_digest: Option<String>,
    pub rows: Vec<ScoredOutput>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Reads `{prompt, output, ...}` rows from a JSONL file.
pub fn read_output_rows(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(line).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let field = |k: &str| {
            v.get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::Dataset(format!("{}:{}: missing string field {k:?}", path.display(), n + 1)))
        };
        rows.push((field("prompt")?, field("output")?));
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

pub fn run_eval(output_file: &Path, spec: &EvalSpec) -> Result<EvalReport> {
    spec.validate()?;
    let rows = read_output_rows(output_file)?;
    evaluate_rows(&rows, spec)
}

/// Scores in-memory `(prompt, output)` rows.
pub fn evaluate_rows(rows: &[(String, String)], spec: &EvalSpec) -> Result<EvalReport> {
    spec.validate()?;
    if rows.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut scored: Vec<ScoredOutput> = rows
        .iter()
        .map(|(p, o)| ScoredOutput {
            prompt: p.clone(),
            output: o.clone(),
            ..Default::default()
        })
        .collect();
    let n = rows.len();
    let mut report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metrics: spec.metrics.clone(),
        sample_count: n,
        means: BTreeMap::new(),
        defense_rate: None,
        positive_rate: None,
        fluency: None,
        harmonic_mean: None,
        coverage: BTreeMap::new(),
        judge_template_id: None,
        config_digest: json_digest(spec),
        run_config_digest: None,
        rows: Vec::new(),
    };

    if spec.wants("fluency") {
        let values: Vec<f64> = scored
            .iter_mut()
            .map(|row| {
                let f = fluency_ngram(&row.output);
                row.scores.insert("fluency".into(), f);
                f
            })
            .collect();
        report.fluency = mean(&values);
        report.means.insert("fluency".into(), report.fluency.unwrap_or(0.0));
        report.coverage.insert("fluency".into(), 1.0);
    }

    if spec.wants("positive_rate") {
        let lexicon = spec.lexicon(LexiconPurpose::Sentiment).ok_or_else(|| {
            Error::Config("positive_rate needs a keyword_lexicon plugin with purpose sentiment".into())
        })?;
        let mut labels = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        for row in &mut scored {
            let (label, score) = classify_keyword(&row.output, &lexicon)?;
            row.label = Some(label);
            row.scores.insert("sentiment".into(), score as f64);
            labels.push(label);
            raw.push(score as f64);
        }
        report.positive_rate = Some(positive_rate(&labels)?);
        report.means.insert("sentiment".into(), mean(&raw).unwrap_or(0.0));
        report.coverage.insert("positive_rate".into(), 1.0);
    }

    if spec.wants("defense_rate") {
        let lexicon = spec
            .lexicon(LexiconPurpose::Toxicity)
            .ok_or_else(|| Error::Config("defense_rate needs a keyword_lexicon plugin with purpose toxicity".into()))?;
        let mut tox = Vec::with_capacity(n);
        for row in &mut scored {
            let t = keyword_toxicity(&row.output, &lexicon.negative)?;
            row.scores.insert("toxicity".into(), t);
            tox.push(t);
        }
        report.defense_rate = Some(defense_rate(&tox)?);
        report.means.insert("toxicity".into(), mean(&tox).unwrap_or(0.0));
        report.coverage.insert("defense_rate".into(), 1.0);
    }

    if spec.wants("rubric") {
        let (judge, concept) = spec
            .judge()
            .ok_or_else(|| Error::Config("rubric needs an external_http plugin".into()))?;
        let outcomes = judge.judge(&concept, rows)?;
        let mut hms = Vec::new();
        let mut parts: [Vec<f64>; 3] = Default::default();
        for (row, outcome) in scored.iter_mut().zip(outcomes) {
            match outcome {
                JudgeOutcome::Scored([c, i, f]) => {
                    let hm = harmonic_mean_rubric(c, i, f)?;
                    row.rubric = Some([c, i, f]);
                    row.scores.insert("harmonic_mean".into(), hm);
                    hms.push(hm);
                    for (acc, v) in parts.iter_mut().zip([c, i, f]) {
                        acc.push(v as f64);
                    }
                }
                JudgeOutcome::Unscored(reason) => {
                    row.unscored.insert("rubric".into(), reason);
                }
            }
        }
        report.harmonic_mean = mean(&hms);
        for (name, values) in ["rubric_concept", "rubric_instruction", "rubric_fluency"]
            .iter()
            .zip(&parts)
        {
            if let Some(m) = mean(values) {
                report.means.insert((*name).into(), m);
            }
        }
        if let Some(hm) = report.harmonic_mean {
            report.means.insert("harmonic_mean".into(), hm);
        }
        report.coverage.insert("rubric".into(), hms.len() as f64 / n as f64);
        report.judge_template_id = Some(JUDGE_TEMPLATE_ID.into());
    }

    report.rows = scored;
    Ok(report)
}


#[cfg(test)]
mod tests {
    use super::mock_http::{serve, Reply};
    use super::*;

    fn write_rows(rows: &[(&str, &str)]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for (p, o) in rows {
            use std::io::Write;
            writeln!(
                f,
                "{}",
                serde_json::json!({"prompt": p, "output": o, "plan_digest": "x", "seed": 0})
            )
            .unwrap();
        }
        f
    }

    fn judge_plugin(endpoint: String, timeout_ms: u64) -> ScorerPlugin {
        ScorerPlugin::ExternalHttp {
            endpoint,
            concept: "happiness".into(),
            timeout_ms,
            max_concurrency: 1,
        }
    }

    #[test]
    fn fluency_mean_over_rows() {
        let f = write_rows(&[("p", "a b a b"), ("q", "a a a a a")]);
        let r = run_eval(f.path(), &EvalSpec::new(&["fluency"], vec![])).unwrap();
        let expected = (fluency_ngram("a b a b") + 0.0) / 2.0;
        assert_eq!(r.fluency, Some(expected));
        assert_eq!(r.sample_count, 2);
        assert_eq!(r.schema_version, REPORT_SCHEMA_VERSION);
    }

    #[test]
    fn unknown_metric_is_rejected() {
        let f = write_rows(&[("p", "o")]);
        assert!(matches!(
            run_eval(f.path(), &EvalSpec::new(&["magic"], vec![])),
            Err(Error::UnknownMetric(m)) if m == "magic"
        ));
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let spec = EvalSpec::new(&["fluency"], vec![]);
        assert!(matches!(
            run_eval(Path::new("/nonexistent/out.jsonl"), &spec),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn lexicon_metrics() {
        let f = write_rows(&[("p", "so good"), ("q", "bad, I hate it"), ("r", "plain")]);
        let spec = EvalSpec::new(
            &["positive_rate", "defense_rate"],
            vec![
                ScorerPlugin::KeywordLexicon {
                    purpose: LexiconPurpose::Sentiment,
                    positive: vec!["good".into()],
                    negative: vec!["bad".into()],
                },
                ScorerPlugin::KeywordLexicon {
                    purpose: LexiconPurpose::Toxicity,
                    positive: vec![],
                    negative: vec!["hate".into()],
                },
            ],
        );
        let r = run_eval(f.path(), &spec).unwrap();
        assert_eq!(r.positive_rate, Some(1.0 / 3.0));
        assert_eq!(r.defense_rate, Some(2.0 / 3.0));
        assert_eq!(r.rows[1].scores["toxicity"], 0.5);
        let missing = EvalSpec::new(&["positive_rate"], vec![]);
        assert!(matches!(run_eval(f.path(), &missing), Err(Error::Config(_))));
    }

    #[test]
    fn rubric_mean_of_row_harmonic_means() {
        let (url, seen) = serve(vec![
            Reply::Body(r#"{"scores":[2,2,2]}"#.into()),
            Reply::Body("1 2 2".into()),
        ]);
        let f = write_rows(&[("Say hi", "hello"), ("Count", "one two")]);
        let r = run_eval(f.path(), &EvalSpec::new(&["rubric"], vec![judge_plugin(url, 2000)])).unwrap();
        assert_eq!(r.harmonic_mean, Some(1.75));
        assert_eq!(r.coverage["rubric"], 1.0);
        assert_eq!(r.judge_template_id.as_deref(), Some(JUDGE_TEMPLATE_ID));
        let bodies = seen.lock().unwrap();
        let first: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(first["template_id"], JUDGE_TEMPLATE_ID);
        assert_eq!(first["concept"], "happiness");
        assert_eq!(first["instruction"], "Say hi");
        assert_eq!(first["output"], "hello");
    }

    #[test]
    fn bad_judge_rows_stay_unscored() {
        let (url, _) = serve(vec![
            Reply::Body("5 1 1".into()),
            Reply::Stall(Duration::from_millis(1500)),
            Reply::Body("2 2 2".into()),
        ]);
        let f = write_rows(&[("a", "x"), ("b", "y"), ("c", "z")]);
        let r = run_eval(f.path(), &EvalSpec::new(&["rubric"], vec![judge_plugin(url, 300)])).unwrap();
        assert_eq!(r.rows[0].rubric, None);
        assert!(r.rows[0].unscored.contains_key("rubric"));
        assert_eq!(r.rows[1].rubric, None);
        assert_eq!(r.rows[2].rubric, Some([2, 2, 2]));
        assert!((r.coverage["rubric"] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.harmonic_mean, Some(2.0));
    }

    #[test]
    fn plugin_json_shape() {
        let p: ScorerPlugin = serde_json::from_str(r#"{"kind":"external_http","endpoint":"http://x"}"#).unwrap();
        assert_eq!(p, judge_plugin("http://x".into(), 5000).with_defaults_for_test());
        assert!(serde_json::from_str::<ScorerPlugin>(r#"{"kind":"external_http","endpoint":"x","bogus":1}"#).is_err());
        let spec: EvalSpec = serde_json::from_str(r#"{"metrics":["fluency"]}"#).unwrap();
        assert!(spec.plugins.is_empty());
    }

    impl ScorerPlugin {
        fn with_defaults_for_test(self) -> Self {
            match self {
                ScorerPlugin::ExternalHttp {
                    endpoint, timeout_ms, ..
                } => ScorerPlugin::ExternalHttp {
                    endpoint,
                    concept: String::new(),
                    timeout_ms,
                    max_concurrency: 4,
                },
                other => other,
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let f = write_rows(&[("p", "a b c a b"), ("q", "d e f")]);
        let spec = EvalSpec::new(&["fluency"], vec![]);
        let a = serde_json::to_string(&run_eval(f.path(), &spec).unwrap()).unwrap();
        let b = serde_json::to_string(&run_eval(f.path(), &spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
