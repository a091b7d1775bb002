#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use mercury_core::catalog::Catalog;
use mercury_core::harvest::{HarvestMode, Harvester, ProviderConfig, RetryPolicy};
use mercury_core::mock::{MockCorpus, MockProvider};
use serde_json::Value;
use tower::ServiceExt;

pub const DEMO: &str = "demo";

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn demo_corpus() -> MockCorpus {
    MockCorpus::load(fixtures_dir().join("demo_corpus.json")).expect("demo corpus loads")
}

pub fn no_sleep() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 5,
        sleep: Arc::new(|_| {}),
    }
}

/// A store holding the 25-record demo corpus harvested under key `demo`.
pub fn demo_catalog() -> (tempfile::TempDir, Arc<Catalog>, Arc<MockProvider>) {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::open(dir.path()).unwrap();
    let mock = Arc::new(MockProvider::new(demo_corpus()));
    catalog
        .put_provider(ProviderConfig::new(DEMO, mock.base_url()))
        .unwrap();
    let report = Harvester::new(&catalog, mock.as_ref())
        .with_retry(no_sleep())
        .harvest(DEMO, HarvestMode::Full)
        .unwrap();
    assert_eq!(report.new, 25);
    (dir, Arc::new(catalog), mock)
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| {
            panic!(
                "body is not JSON ({e}): {}",
                String::from_utf8_lossy(&self.body)
            )
        })
    }

    pub fn text(&self) -> String {
        String::from_utf8(self.body.clone()).unwrap()
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req
        .body(
            body.map(|b| Body::from(b.to_string()))
                .unwrap_or_else(Body::empty),
        )
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap()
        .to_vec();
    Reply {
        status,
        content_type,
        body,
    }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, None).await
}

/// Assert the documented error shape: exactly `{status, code, message}`.
pub fn assert_api_error(reply: &Reply, status: StatusCode, code: &str) {
    assert_eq!(reply.status, status, "body: {}", reply.text());
    assert_eq!(reply.content_type.as_deref(), Some("application/json"));
    let v = reply.json();
    let obj = v.as_object().expect("error body is an object");
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["code", "message", "status"], "body: {v}");
    assert_eq!(obj["status"], status.as_u16());
    assert_eq!(obj["code"], code, "body: {v}");
    assert!(!obj["message"].as_str().unwrap().is_empty());
}

/// The golden search cases: (name, raw query string, expected body path).
pub fn golden_cases() -> Vec<(String, String, PathBuf)> {
    let dir = fixtures_dir().join("golden/search");
    let mut cases: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "query"))
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            let query = std::fs::read_to_string(&p).unwrap();
            (name, query, p.with_extension("json"))
        })
        .collect();
    cases.sort();
    cases
}
