use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use steerkit::model::build_synthetic_model;
use steerkit::store::VectorStore;
use steerkit::{HookPoint, ModelConfig, SteeringVector};
use steerkit_cli::server::{router, AppState};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    state: Arc<AppState>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let model = Arc::new(build_synthetic_model(&ModelConfig::tiny(), 1).unwrap());
    let store = VectorStore::open(dir.path().join("store")).unwrap();
    let mut state = AppState::new(model, store, None);
    state.config_digest = "cfg".into();
    Fixture {
        _dir: dir,
        state: Arc::new(state),
    }
}

impl Fixture {
    fn save(&self, values: &[f32], name: &str) -> String {
        let mut v = SteeringVector::new(HookPoint::block_output(1), values.to_vec(), "caa");
        v.created_at = 0;
        self.state.store.save_vector(name, &v).unwrap()
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(serde_json::to_vec(&b).unwrap())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = router(self.state.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn json(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (status, bytes) = self.call(method, uri, body).await;
        (status, serde_json::from_slice(&bytes).unwrap())
    }
}

fn unit(d: usize, k: usize) -> Vec<f32> {
    (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
}

#[tokio::test]
async fn health_reports_ready() {
    let f = fixture();
    let (status, body) = f.json("GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ready");
    assert_eq!(body["sae_configured"], false);
    assert_eq!(body["multiplier_range"], json!([-2.0, 2.0]));
    assert_eq!(body["weights_digest"], f.state.model.weights_digest());
}

#[tokio::test]
async fn zero_plan_compare_panes_match() {
    let f = fixture();
    let id = f.save(&unit(16, 2), "v");
    let plan = json!({ "attachments": [{ "vector_id": id, "multiplier": 0.0 }] });
    let (status, body) = f
        .json(
            "POST",
            "/api/generate",
            Some(json!({ "prompt": "hello", "plan": plan, "compare": true })),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["steered_text"], body["baseline_text"]);
    assert_eq!(body["config_digest"], "cfg");
}

#[tokio::test]
async fn plan_digest_matches_client_side_digest() {
    let f = fixture();
    let id = f.save(&unit(16, 3), "v");
    let plan: steerkit::applier::PlanRef = serde_json::from_value(json!({
        "attachments": [{ "vector_id": id, "multiplier": 1.5 }]
    }))
    .unwrap();
    let (_, body) = f
        .json(
            "POST",
            "/api/generate",
            Some(json!({ "prompt": "hi", "plan": plan, "compare": false })),
        )
        .await;
    assert_eq!(body["plan_digest"], plan.digest());
    assert!(body.get("baseline_text").is_none());
}

#[tokio::test]
async fn unknown_vector_is_404_with_id() {
    let f = fixture();
    let missing = "a".repeat(64);
    let plan = json!({ "attachments": [{ "vector_id": missing, "multiplier": 1.0 }] });
    let (status, body) = f
        .json("POST", "/api/generate", Some(json!({ "prompt": "x", "plan": plan })))
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error_code"], "not_found");
    assert_eq!(body["detail"]["vector_id"], missing);
}

#[tokio::test]
async fn malformed_bodies_use_error_shape() {
    let f = fixture();
    let req = Request::builder()
        .method("POST")
        .uri("/api/generate")
        .body(Body::from("{not json"))
        .unwrap();
    let resp = router(f.state.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let body: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(body["error_code"], "invalid_request");
    assert!(body["message"].is_string());

    let (status, body) = f
        .json("POST", "/api/generate", Some(json!({ "prompt": "x", "bogus": 1 })))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error_code"], "invalid_request");
}

#[tokio::test]
async fn decoding_steer_is_not_implemented() {
    let f = fixture();
    let plan = json!({ "decoding_steer": "contrastive" });
    let (status, body) = f
        .json("POST", "/api/generate", Some(json!({ "prompt": "x", "plan": plan })))
        .await;
    assert_eq!(status, StatusCode::NOT_IMPLEMENTED);
    assert_eq!(body["error_code"], "not_implemented");
}

#[tokio::test]
async fn streaming_ends_with_summary_matching_blocking_call() {
    let f = fixture();
    let id = f.save(&unit(16, 5), "v");
    let request = json!({
        "prompt": "stream me",
        "plan": { "attachments": [{ "vector_id": id, "multiplier": 2.0 }] },
        "sampling": { "max_new_tokens": 6 },
        "compare": true,
    });
    let (_, blocking) = f.json("POST", "/api/generate", Some(request.clone())).await;
    let mut streamed = request;
    streamed["stream"] = json!(true);
    let (status, bytes) = f.call("POST", "/api/generate", Some(streamed)).await;
    assert_eq!(status, StatusCode::OK);
    let events: Vec<Value> = bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).unwrap())
        .collect();
    assert_eq!(events[0]["event"], "start");
    let tokens = |pane: &str| {
        events
            .iter()
            .filter(|e| e["event"] == "token" && e["pane"] == pane)
            .count()
    };
    assert_eq!(tokens("baseline"), 6);
    assert_eq!(tokens("steered"), 6);
    let last = events.last().unwrap();
    assert_eq!(last["event"], "summary");
    assert_eq!(last["steered_text"], blocking["steered_text"]);
    assert_eq!(last["baseline_text"], blocking["baseline_text"]);
    assert_eq!(last["plan_digest"], blocking["plan_digest"]);
}

#[tokio::test]
async fn merge_saves_child_and_rejects_unknown_parent() {
    let f = fixture();
    let a = f.save(&[1.0, -2.0, 0.0], "a");
    let b = f.save(&[-1.0, 3.0, 0.0], "b");
    let req = json!({
        "strategy": "ties",
        "inputs": [{ "vector_id": a }, { "vector_id": b }],
        "name": "combo",
    });
    let (status, body) = f.json("POST", "/api/vectors/merge", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let id = body["id"].as_str().unwrap().to_string();
    let merged = f.state.store.load_by_id(&id).unwrap().vector;
    assert_eq!(merged.values, vec![0.0, 3.0, 0.0]);
    let mut parents = vec![a.clone(), b];
    parents.sort();
    assert_eq!(merged.parents, parents);

    let missing = "f".repeat(64);
    let req = json!({ "strategy": "linear", "inputs": [{ "vector_id": a }, { "vector_id": missing }] });
    let (status, body) = f.json("POST", "/api/vectors/merge", Some(req)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["detail"]["vector_id"], missing);
}

#[tokio::test]
async fn generate_caa_from_inline_pairs_then_list() {
    let f = fixture();
    let req = json!({
        "method": "caa",
        "pairs": [
            { "prompt": "I feel", "matching": " glad", "not_matching": " grim" },
            { "prompt": "It was", "matching": " fine", "not_matching": " awful" },
        ],
        "concept_label": "mood",
        "layer": 1,
    });
    let (status, body) = f.json("POST", "/api/vectors/generate", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["vector"]["concept_label"], "mood");
    let (_, list) = f.json("GET", "/api/vectors?method=caa&layer=1", None).await;
    let vectors = list["vectors"].as_array().unwrap();
    assert_eq!(vectors.len(), 1);
    assert_eq!(vectors[0]["id"], body["id"]);
    let (_, none) = f.json("GET", "/api/vectors?method=sta", None).await;
    assert!(none["vectors"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn sae_endpoints_need_a_configured_sae() {
    let f = fixture();
    let (status, body) = f.json("GET", "/api/sae/features?q=a", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error_code"], "sae_not_configured");
    let req = json!({ "method": "sae_feature", "feature_id": 0 });
    let (status, _) = f.json("POST", "/api/vectors/generate", Some(req)).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn evaluate_inline_rows() {
    let f = fixture();
    let req = json!({
        "metrics": ["fluency", "positive_rate"],
        "plugins": [{ "kind": "keyword_lexicon", "purpose": "sentiment", "positive": ["good"], "negative": ["bad"] }],
        "rows": [
            { "prompt": "p", "output": "a b a b" },
            { "prompt": "q", "output": "good good" },
        ],
    });
    let (status, body) = f.json("POST", "/api/evaluate", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["sample_count"], 2);
    assert_eq!(body["positive_rate"], 0.5);
    assert_eq!(body["run_config_digest"], "cfg");
    let (status, body) = f
        .json(
            "POST",
            "/api/evaluate",
            Some(json!({ "metrics": ["bleu"], "rows": [] })),
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
}
