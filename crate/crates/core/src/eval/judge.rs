//! HTTP rubric judge.
//!
//! Each row is POSTed as `{template_id, concept, instruction, output,
//! prompt}` where `prompt` is the rendered template. The reply is either
//! `{"scores": [c, i, f]}` or text holding exactly three integers. Anything
//! else, including timeouts and out-of-range scores, leaves the row
//! unscored.

use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const JUDGE_TEMPLATE_ID: &str = "judge-v1";
pub const JUDGE_TEMPLATE: &str = include_str!("../../templates/judge-v1.txt");

pub type RubricScores = [u8; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JudgeOutcome {
    Scored(RubricScores),
    Unscored(String),
}

impl JudgeOutcome {
    pub fn scores(&self) -> Option<RubricScores> {
        match self {
            JudgeOutcome::Scored(s) => Some(*s),
            JudgeOutcome::Unscored(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpJudge {
    pub endpoint: String,
    pub timeout: Duration,
    /// Rows judged concurrently.
    pub max_concurrency: usize,
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    template_id: &'a str,
    concept: &'a str,
    instruction: &'a str,
    output: &'a str,
    prompt: String,
}

pub fn render_template(concept: &str, instruction: &str, output: &str) -> String {
    JUDGE_TEMPLATE
        .replace("{concept}", concept)
        .replace("{instruction}", instruction)
        .replace("{output}", output)
}

fn check_range(raw: &[i64]) -> std::result::Result<RubricScores, String> {
    if raw.len() != 3 {
        return Err(format!("expected three scores, found {}", raw.len()));
    }
    let mut out = [0u8; 3];
    for (o, &r) in out.iter_mut().zip(raw) {
        if !(0..=2).contains(&r) {
            return Err(format!("score {r} outside {{0, 1, 2}}"));
        }
        *o = r as u8;
    }
    Ok(out)
}

fn integers_in(text: &str) -> Vec<i64> {
    text.split(|c: char| !(c.is_ascii_digit() || c == '-'))
        .filter_map(|t| t.parse().ok())
        .collect()
}

/// Parses a judge reply body.
pub fn parse_reply(body: &str) -> std::result::Result<RubricScores, String> {
    if let Ok(v) = serde_json::from_str::<Value>(body) {
        match v.get("scores") {
            Some(Value::Array(items)) => {
                let raw: Option<Vec<i64>> = items.iter().map(Value::as_i64).collect();
                return check_range(&raw.ok_or("non-integer entry in scores")?);
            }
            Some(_) => return Err("scores is not an array".into()),
            None => {
                if let Some(text) = v.get("text").and_then(Value::as_str).or(v.as_str()) {
                    return check_range(&integers_in(text));
                }
                if v.is_object() || v.is_array() {
                    return Err("reply has no scores".into());
                }
            }
        }
    }
    check_range(&integers_in(body))
}

impl HttpJudge {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            max_concurrency: 4,
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }

    fn judge_one(&self, agent: &ureq::Agent, concept: &str, instruction: &str, output: &str) -> JudgeOutcome {
        let request = JudgeRequest {
            template_id: JUDGE_TEMPLATE_ID,
            concept,
            instruction,
            output,
            prompt: render_template(concept, instruction, output),
        };
        let mut response = match agent.post(&self.endpoint).send_json(&request) {
            Ok(r) => r,
            Err(e) => return JudgeOutcome::Unscored(format!("request failed: {e}")),
        };
        let status = response.status();
        if !status.is_success() {
            return JudgeOutcome::Unscored(format!("judge returned HTTP {}", status.as_u16()));
        }
        match response.body_mut().read_to_string() {
            Ok(body) => match parse_reply(&body) {
                Ok(s) => JudgeOutcome::Scored(s),
                Err(e) => JudgeOutcome::Unscored(e),
            },
            Err(e) => JudgeOutcome::Unscored(format!("reading reply failed: {e}")),
        }
    }

    /// Scores `(instruction, output)` rows; results keep row order.
    pub fn judge(&self, concept: &str, rows: &[(String, String)]) -> Result<Vec<JudgeOutcome>> {
        if self.max_concurrency == 0 {
            return Err(Error::Config("judge max_concurrency must be at least 1".into()));
        }
        let agent = self.agent();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(self.max_concurrency) {
            let results: Vec<JudgeOutcome> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(instruction, output)| {
                        let agent = &agent;
                        s.spawn(move || self.judge_one(agent, concept, instruction, output))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| JudgeOutcome::Unscored("judge worker panicked".into()))
                    })
                    .collect()
            });
            out.extend(results);
        }
        Ok(out)
    }
}

pub fn llm_judge(judge: &HttpJudge, concept: &str, rows: &[(String, String)]) -> Result<Vec<JudgeOutcome>> {
    judge.judge(concept, rows)
}
