//! HTTP service for interactive steering.
//!
//! Requests are stateless: clients send the whole plan each time. Long
//! work runs on the blocking pool. Streaming generation emits NDJSON
//! events and stops as soon as the client goes away.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::{Body, Bytes};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use steerkit::applier::{apply_plan, Attachment, LmSteerAttachment, PlanRef, SteeringPlan, WrappedModel};
use steerkit::datasets::{load_pairs, ContrastivePair, FormatHint, SteeringDataset};
use steerkit::eval::{evaluate_rows, read_output_rows, EvalSpec, ScorerPlugin};
use steerkit::generators::{
    generate_caa, generate_sta, sae_feature_vector, train_lm_steer, LmSteerConfig, PositionRule, SaeModel, StaConfig,
};
use steerkit::hparams::{GenerateConfig, ResolvedConfig};
use steerkit::merge::{merge, MergeInput, MergeRequest, MergeSpec};
use steerkit::store::{VectorFilter, VectorStore};
use steerkit::{ByteTokenizer, Error, HookPoint, Model, SamplingParams, Site};
use tokio::sync::mpsc;

use crate::pipeline::MANIFEST_FILE;

pub struct AppState {
    pub model: Arc<Model>,
    pub store: VectorStore,
    pub sae: Option<Arc<SaeModel>>,
    pub multiplier_range: [f32; 2],
    pub config_digest: String,
    pub weights_digest: String,
}

impl AppState {
    pub fn new(model: Arc<Model>, store: VectorStore, sae: Option<SaeModel>) -> Self {
        let weights_digest = model.weights_digest();
        Self {
            model,
            store,
            sae: sae.map(Arc::new),
            multiplier_range: [-2.0, 2.0],
            config_digest: String::new(),
            weights_digest,
        }
    }

    /// Builds the model and store from `cfg`. The SAE comes from `sae_path`,
    /// else a configured checkpoint, else the last run's trained SAE.
    pub fn from_config(cfg: &ResolvedConfig, sae_path: Option<&Path>) -> steerkit::Result<Self> {
        let model = Arc::new(cfg.top.model.build(&cfg.root)?);
        let store = VectorStore::open(cfg.path(&cfg.top.store_dir))?;
        let configured = cfg.generate.iter().find_map(|(_, g)| match g {
            GenerateConfig::SaeFeature(c) => c.sae.checkpoint.clone(),
            GenerateConfig::Sta(c) => c.sae.checkpoint.clone(),
            _ => None,
        });
        let from_run = || -> Option<std::path::PathBuf> {
            let out = cfg.path(&cfg.top.output_dir);
            let manifest: Value = serde_json::from_slice(&std::fs::read(out.join(MANIFEST_FILE)).ok()?).ok()?;
            Some(out.join(manifest.get("sae_checkpoint")?.as_str()?))
        };
        let sae_file = match (sae_path, configured) {
            (Some(p), _) => Some(p.to_path_buf()),
            (None, Some(c)) => Some(cfg.path(&c)),
            (None, None) => from_run().filter(|p| p.exists()),
        };
        let sae = sae_file.map(SaeModel::load).transpose()?;
        let mut state = Self::new(model, store, sae);
        state.multiplier_range = cfg.top.multiplier_range;
        state.config_digest = cfg.digest();
        Ok(state)
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, detail: Value) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
            detail,
        }
    }

    fn vector_not_found(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no vector with id {id}"),
            json!({ "vector_id": id }),
        )
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Ambiguous { .. } | Error::Collision(_) | Error::DigestMismatch { .. } => StatusCode::CONFLICT,
            Error::NotImplemented(_) => StatusCode::NOT_IMPLEMENTED,
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            Error::Diverged { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        let detail = match &e {
            Error::Ambiguous { name, ids } => json!({ "name": name, "ids": ids }),
            _ => Value::Null,
        };
        Self::new(status, e.code(), e.to_string(), detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error_code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string(), Value::Null))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            e.to_string(),
            Value::Null,
        )
    })?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/vectors", get(list_vectors))
        .route("/api/vectors/generate", post(generate_vector))
        .route("/api/vectors/merge", post(merge_vectors))
        .route("/api/generate", post(generate))
        .route("/api/sae/features", get(sae_features))
        .route("/api/evaluate", post(evaluate))
        .with_state(state)
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    let cfg = s.model.config();
    Json(json!({
        "status": "ready",
        "version": env!("CARGO_PKG_VERSION"),
        "model": {
            "n_layers": cfg.n_layers,
            "d_model": cfg.d_model,
            "vocab_size": cfg.vocab_size,
            "max_seq_len": cfg.max_seq_len,
        },
        "weights_digest": s.weights_digest,
        "config_digest": s.config_digest,
        "sae_configured": s.sae.is_some(),
        "multiplier_range": s.multiplier_range,
    }))
}

async fn list_vectors(State(s): State<Arc<AppState>>, Query(filter): Query<VectorFilter>) -> ApiResult<Json<Value>> {
    let store = s.store.clone();
    let vectors = blocking(move || Ok(store.list_vectors(&filter)?)).await?;
    Ok(Json(json!({ "vectors": vectors })))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSteerParams {
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateVectorRequest {
    pub method: String,
    #[serde(default)]
    pub pairs: Option<Vec<ContrastivePair>>,
    /// Server-side dataset path, used when `pairs` is absent.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub concept_label: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub site: Option<Site>,
    #[serde(default)]
    pub position: Option<PositionRule>,
    #[serde(default)]
    pub feature_id: Option<usize>,
    #[serde(default)]
    pub keep_fraction: Option<f64>,
    #[serde(default)]
    pub lm_steer: Option<LmSteerParams>,
}

impl GenerateVectorRequest {
    fn dataset(&self) -> steerkit::Result<SteeringDataset> {
        let label = self.concept_label.clone().unwrap_or_else(|| "concept".into());
        match (&self.pairs, &self.dataset) {
            (Some(pairs), _) => SteeringDataset::new(pairs.clone(), label, "request"),
            (None, Some(path)) => {
                let mut d = load_pairs(path, FormatHint::Auto)?;
                if let Some(l) = &self.concept_label {
                    d.concept_label = l.clone();
                }
                Ok(d)
            }
            (None, None) => Err(Error::InvalidArgument("request needs pairs or a dataset path".into())),
        }
    }
}

fn require_sae(s: &AppState) -> ApiResult<Arc<SaeModel>> {
    s.sae.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "sae_not_configured",
            "no SAE is configured for this service",
            Value::Null,
        )
    })
}

async fn generate_vector(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: GenerateVectorRequest = parse_body(&body)?;
    blocking(move || {
        let model = &s.model;
        let name = |method: &str, label: &str| req.name.clone().unwrap_or_else(|| format!("{label}-{method}"));
        let digest = s.config_digest.clone();
        let (vector, method) = match req.method.as_str() {
            "caa" => {
                let d = req.dataset()?;
                let site = req.site.unwrap_or(Site::BlockOutput);
                let point = HookPoint {
                    layer: req.layer.unwrap_or(model.config().default_layer_for(site)),
                    site,
                };
                let mut v = generate_caa(model.as_ref(), &d, point, req.position.unwrap_or_default())?;
                v.provenance.config_digest = digest;
                (v, "caa")
            }
            "sta" => {
                let sae = require_sae(&s)?;
                let d = req.dataset()?;
                let cfg = StaConfig {
                    keep_fraction: req.keep_fraction.unwrap_or(StaConfig::default().keep_fraction),
                };
                let mut v = generate_sta(model.as_ref(), &d, &sae, &cfg)?;
                v.provenance.config_digest = digest;
                (v, "sta")
            }
            "sae_feature" => {
                let sae = require_sae(&s)?;
                let id = req
                    .feature_id
                    .ok_or_else(|| Error::InvalidArgument("sae_feature needs feature_id".into()))?;
                let mut v = sae_feature_vector(&sae, id)?;
                if let Some(l) = &req.concept_label {
                    v.concept_label = l.clone();
                }
                (v, "sae_feature")
            }
            "lm_steer" => {
                let d = req.dataset()?;
                let p = req.lm_steer.clone().unwrap_or(LmSteerParams {
                    steps: None,
                    lr: None,
                    rank: None,
                    epsilon: None,
                    seed: None,
                });
                let base = LmSteerConfig::default();
                let cfg = LmSteerConfig {
                    steps: p.steps.unwrap_or(base.steps),
                    lr: p.lr.unwrap_or(base.lr),
                    rank: p.rank.or(base.rank),
                    epsilon: p.epsilon.unwrap_or(base.epsilon),
                    seed: p.seed.unwrap_or(base.seed),
                };
                let m = train_lm_steer(model, &d, &cfg)?;
                let id = s.store.save_lm_steer(&name("lm_steer", &d.concept_label), &m)?;
                return Ok(Json(json!({
                    "id": id,
                    "kind": "lm_steer",
                    "initial_loss": m.initial_loss,
                    "final_loss": m.final_loss,
                })));
            }
            other => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "invalid_argument",
                    format!("unknown generation method {other:?}"),
                    json!({ "method": other }),
                ))
            }
        };
        let id = s.store.save_vector(&name(method, &vector.concept_label), &vector)?;
        let record = s.store.load_by_id(&id)?;
        Ok(Json(json!({ "id": id, "kind": "vector", "vector": record.summary() })))
    })
    .await
}

async fn merge_vectors(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: MergeRequest = parse_body(&body)?;
    blocking(move || {
        let mut inputs = Vec::with_capacity(req.inputs.len());
        for input in &req.inputs {
            let record = s.store.load_by_id(&input.vector_id).map_err(|e| match e {
                Error::NotFound(_) => ApiError::vector_not_found(&input.vector_id),
                other => other.into(),
            })?;
            inputs.push(MergeInput {
                vector: record.vector,
                weight: input.weight,
            });
        }
        let spec = MergeSpec {
            strategy: req.strategy,
            inputs,
            density: req.density,
            drop_rate: req.drop_rate,
            seed: req.seed,
        };
        let merged = merge(&spec)?;
        let name = req
            .name
            .clone()
            .unwrap_or_else(|| spec.strategy.method_name().to_string());
        let id = s.store.save_vector(&name, &merged)?;
        let record = s.store.load_by_id(&id)?;
        Ok(Json(json!({ "id": id, "vector": record.summary() })))
    })
    .await
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub plan: PlanRef,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default = "default_true")]
    pub compare: bool,
    #[serde(default)]
    pub stream: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub steered_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub steered_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_text: Option<String>,
    pub plan_digest: String,
    pub config_digest: String,
    pub seed: u64,
    pub timing: Timing,
}

fn resolve_plan(s: &AppState, plan: &PlanRef) -> ApiResult<SteeringPlan> {
    let mut out = SteeringPlan {
        prompt_steer: plan.prompt_steer.clone(),
        decoding_steer: plan.decoding_steer.clone(),
        ..Default::default()
    };
    for a in &plan.attachments {
        if !a.multiplier.is_finite() {
            return Err(Error::NonFinite("attachment multiplier".into()).into());
        }
        let record = s.store.load_by_id(&a.vector_id).map_err(|e| match e {
            Error::NotFound(_) => ApiError::vector_not_found(&a.vector_id),
            other => other.into(),
        })?;
        out.attachments.push(Attachment {
            vector: record.vector,
            multiplier: a.multiplier,
        });
    }
    if let Some(l) = &plan.lm_steer {
        let file = s.store.load_lm_steer(&l.id).map_err(|e| match e {
            Error::NotFound(_) => ApiError::new(
                StatusCode::NOT_FOUND,
                "not_found",
                format!("no lm_steer matrix with id {}", l.id),
                json!({ "lm_steer_id": l.id }),
            ),
            other => other.into(),
        })?;
        out.lm_steer = Some(LmSteerAttachment {
            id: file.id,
            matrix: file.matrix,
            multiplier: l.multiplier,
        });
    }
    Ok(out)
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

fn run_generation(
    wrapped: &WrappedModel,
    req: &GenerateRequest,
    config_digest: &str,
    mut emit: impl FnMut(&str, u32) -> bool,
) -> steerkit::Result<Option<GenerateResponse>> {
    let mut cancelled = false;
    let (baseline_text, baseline_ms) = if req.compare {
        let t = Instant::now();
        let g = wrapped.base_generate_streaming(&req.prompt, &req.sampling, |tok| {
            let go = emit("baseline", tok);
            cancelled |= !go;
            go
        })?;
        (Some(g.text), Some(ms_since(t)))
    } else {
        (None, None)
    };
    if cancelled {
        return Ok(None);
    }
    let t = Instant::now();
    let g = wrapped.steered_generate_streaming(&req.prompt, &req.sampling, false, |tok| {
        let go = emit("steered", tok);
        cancelled |= !go;
        go
    })?;
    if cancelled {
        return Ok(None);
    }
    Ok(Some(GenerateResponse {
        steered_text: g.text,
        baseline_text,
        plan_digest: wrapped.plan_digest().to_string(),
        config_digest: config_digest.to_string(),
        seed: req.sampling.seed,
        timing: Timing {
            steered_ms: ms_since(t),
            baseline_ms,
        },
    }))
}

async fn generate(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    match generate_inner(s, body).await {
        Ok(r) => r,
        Err(e) => e.into_response(),
    }
}

async fn generate_inner(s: Arc<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: GenerateRequest = parse_body(&body)?;
    req.sampling.validate()?;
    let plan = {
        let s = s.clone();
        let plan_ref = req.plan.clone();
        blocking(move || resolve_plan(&s, &plan_ref)).await?
    };
    let wrapped = apply_plan(s.model.clone(), plan)?;
    // Reject bad prompts before committing to a streaming response.
    wrapped.input_tokens(&req.prompt)?;
    ByteTokenizer.encode_checked(&req.prompt, s.model.config().vocab_size)?;

    if !req.stream {
        let digest = s.config_digest.clone();
        let resp = blocking(move || {
            let r = run_generation(&wrapped, &req, &digest, |_, _| true)?;
            wrapped.verify_unchanged()?;
            Ok(r.expect("never cancelled"))
        })
        .await?;
        return Ok(Json(resp).into_response());
    }

    let (tx, mut rx) = mpsc::channel::<Bytes>(64);
    let digest = s.config_digest.clone();
    tokio::task::spawn_blocking(move || {
        let line = |v: Value| {
            let mut b = serde_json::to_vec(&v).expect("event serializes");
            b.push(b'\n');
            Bytes::from(b)
        };
        let start = json!({ "event": "start", "plan_digest": wrapped.plan_digest(), "config_digest": digest });
        if tx.blocking_send(line(start)).is_err() {
            return;
        }
        let mut index = 0usize;
        let result = run_generation(&wrapped, &req, &digest, |pane, tok| {
            index += 1;
            let ev = json!({
                "event": "token",
                "pane": pane,
                "token": tok,
                "text": ByteTokenizer.decode(&[tok]),
            });
            tx.blocking_send(line(ev)).is_ok()
        });
        let last = match result {
            Ok(Some(resp)) => {
                let mut v = serde_json::to_value(&resp).expect("response serializes");
                v["event"] = json!("summary");
                v
            }
            Ok(None) => return,
            Err(e) => json!({ "event": "error", "error_code": e.code(), "message": e.to_string() }),
        };
        let _ = tx.blocking_send(line(last));
    });
    let stream = futures::stream::poll_fn(move |cx| rx.poll_recv(cx).map(|o| o.map(Ok::<_, Infallible>)));
    Ok(Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(stream))
        .expect("valid response"))
}

#[derive(Debug, Deserialize)]
pub struct FeatureQuery {
    #[serde(default)]
    pub q: Option<String>,
    #[serde(default)]
    pub n: Option<usize>,
}

async fn sae_features(State(s): State<Arc<AppState>>, Query(q): Query<FeatureQuery>) -> ApiResult<Json<Value>> {
    let sae = require_sae(&s)?;
    let features = steerkit::generators::search_sae_features(&sae, q.q.as_deref().unwrap_or(""), q.n.unwrap_or(10));
    let list: Vec<Value> = features
        .iter()
        .map(|f| json!({ "id": f.id, "label": f.label, "mean_activation": f.mean_activation }))
        .collect();
    Ok(Json(
        json!({ "features": list, "layer": sae.point.layer, "site": sae.point.site }),
    ))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub prompt: String,
    pub output: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub metrics: Vec<String>,
    #[serde(default)]
    pub plugins: Vec<ScorerPlugin>,
    #[serde(default)]
    pub rows: Option<Vec<EvalRow>>,
    #[serde(default)]
    pub output_file: Option<String>,
}

async fn evaluate(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: EvaluateRequest = parse_body(&body)?;
    let digest = s.config_digest.clone();
    blocking(move || {
        let spec = EvalSpec {
            metrics: req.metrics,
            plugins: req.plugins,
        };
        let rows: Vec<(String, String)> = match (req.rows, req.output_file) {
            (Some(rows), _) => rows.into_iter().map(|r| (r.prompt, r.output)).collect(),
            (None, Some(path)) => read_output_rows(Path::new(&path))?,
            (None, None) => return Err(Error::InvalidArgument("request needs rows or output_file".into()).into()),
        };
        let mut report = evaluate_rows(&rows, &spec)?;
        if !digest.is_empty() {
            report.run_config_digest = Some(digest);
        }
        Ok(Json(serde_json::to_value(report).map_err(Error::from)?))
    })
    .await
}

/// Serves until ctrl-c, then checks the model weights were never touched.
pub async fn serve(state: AppState, addr: SocketAddr) -> steerkit::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    let bound = listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?;
    eprintln!("steerkit listening on http://{bound}");
    let state = Arc::new(state);
    let app = router(state.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(bound.to_string(), e))?;
    let now = state.model.weights_digest();
    if now != state.weights_digest {
        return Err(Error::DigestMismatch {
            id: "model weights".into(),
            actual: now,
        });
    }
    Ok(())
}
