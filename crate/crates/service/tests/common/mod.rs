//! Model directories and an in-process client for service tests.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use convctl_core::checkpoint::Checkpoint;
use convctl_core::model::{ModelConfig, TransformerParams, Variant};
use convctl_core::tensor::Tensor;
use convctl_core::tokenizer::Vocabulary;
use convctl_core::train::{MODEL_FILE, TOKENIZER_FILE};
use convctl_service::{router, AppState};

pub fn write_model(dir: &Path, max_positions: usize, zero: bool) {
    std::fs::create_dir_all(dir).unwrap();
    let vocab = Vocabulary::bytes_only();
    let cfg = ModelConfig {
        max_positions,
        ..ModelConfig::new(Variant::Dec, 16, 1, 2, vocab.size())
    };
    let mut params = TransformerParams::<f32>::init(&cfg, 11).unwrap();
    if zero {
        for t in params.tensors.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }
    Checkpoint::new(cfg, vocab.hash(), &params).save(&dir.join(MODEL_FILE)).unwrap();
    vocab.save(&dir.join(TOKENIZER_FILE)).unwrap();
}

/// Root holding `tiny` (256 positions), `short` (24 positions) and
/// `uniform` (all-zero weights).
pub fn model_root() -> tempfile::TempDir {
    let root = tempfile::tempdir().unwrap();
    write_model(&root.path().join("tiny"), 256, false);
    write_model(&root.path().join("short"), 24, false);
    write_model(&root.path().join("uniform"), 64, true);
    root
}

pub struct Client {
    pub app: Router,
    pub state: Arc<AppState>,
}

impl Client {
    pub fn open(root: &Path) -> Self {
        let state = Arc::new(AppState::open(root, Some(root.join("sessions.journal"))).unwrap());
        Self {
            app: router(state.clone()),
            state,
        }
    }

    pub async fn raw(&self, method: Method, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    pub async fn json(&self, method: Method, uri: &str, body: serde_json::Value) -> (StatusCode, serde_json::Value) {
        let (status, bytes) = self.raw(method, uri, &body.to_string()).await;
        let value = if bytes.is_empty() {
            serde_json::Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        (status, value)
    }

    pub async fn create(&self, body: serde_json::Value) -> String {
        let (status, v) = self.json(Method::POST, "/v1/sessions", body).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }
}
