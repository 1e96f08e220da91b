mod common;

use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use stratify_workbench::api::router;

use common::parent_run;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn wait_for(app: &Router, run_id: &str) -> Value {
    for _ in 0..600 {
        let (s, m) = get_json(app, &format!("/runs/{run_id}")).await;
        assert_eq!(s, StatusCode::OK);
        if m["status"] != "running" {
            return m;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("run {run_id} did not finish");
}

#[tokio::test(flavor = "multi_thread")]
async fn read_endpoints() {
    let (_dir, store, m) = parent_run();
    let app = router(store.clone());
    let id = &m.run_id;

    let (s, runs) = get_json(&app, "/runs").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(runs[0]["run_id"], id.as_str());
    assert_eq!(runs[0]["parent"], Value::Null);

    let (s, manifest) = get_json(&app, &format!("/runs/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(manifest["status"], "complete");

    let (s, bytes) = call(&app, "GET", &format!("/runs/{id}/experiments/E01/assignment"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        bytes,
        store
            .get_bytes(&m.experiment("E01").unwrap().artifacts["assignment"])
            .unwrap()
    );

    for artifact in ["km", "cox", "enrichment", "surrogate", "screening"] {
        let (s, v) = get_json(&app, &format!("/runs/{id}/experiments/E01/{artifact}")).await;
        assert_eq!(s, StatusCode::OK, "{artifact}");
        assert!(!v.is_null());
    }
    let (s, meta) = get_json(&app, &format!("/runs/{id}/meta")).await;
    assert_eq!(s, StatusCode::OK);
    assert!(meta["selected_k"].is_array());

    let (s, html) = call(&app, "GET", &format!("/runs/{id}/report/html"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(html).unwrap().starts_with("<!DOCTYPE html>"));
    let (s, _) = call(&app, "GET", &format!("/runs/{id}/report/pdf"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    for uri in [
        "/runs/nope".to_string(),
        format!("/runs/{id}/experiments/E99/km"),
        format!("/runs/{id}/experiments/E01/nothing"),
        "/runs/nope/lineage".to_string(),
    ] {
        let (s, body) = get_json(&app, &uri).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["status"], 404);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn curation_round_trip() {
    let (_dir, store, m) = parent_run();
    let app = router(store);
    let id = &m.run_id;
    let body = json!({
        "actions": [{"action": "merge_clusters", "experiment_id": "E01", "clusters": [1, 2], "justification": "same phenotype"}],
        "rules_hash": m.rules_hash,
    });
    let (s, b) = call(&app, "POST", &format!("/runs/{id}/curations"), Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let accepted: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(accepted["parent"], id.as_str());
    assert_eq!(accepted["scope"], "evaluation_only");
    let child = accepted["run_id"].as_str().unwrap().to_string();

    let done = wait_for(&app, &child).await;
    assert_eq!(done["status"], "complete");
    assert_eq!(done["parent"], id.as_str());

    let (s, lineage) = get_json(&app, &format!("/runs/{child}/lineage")).await;
    assert_eq!(s, StatusCode::OK);
    let chain: Vec<&str> = lineage["chain"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["run_id"].as_str().unwrap())
        .collect();
    assert_eq!(chain, [id.as_str(), child.as_str()]);
    assert_eq!(lineage["log"][0]["action"]["action"], "merge_clusters");

    let (_, runs) = get_json(&app, "/runs").await;
    assert_eq!(runs.as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn curation_rejections() {
    let (_dir, store, m) = parent_run();
    let app = router(store);
    let id = &m.run_id;
    let post = |uri: String, body: Value| {
        let app = app.clone();
        async move { call(&app, "POST", &uri, Some(body)).await }
    };

    let unknown_cluster =
        json!({"actions": [{"action": "drop_cluster", "experiment_id": "E01", "cluster": 7, "justification": "x"}]});
    let (s, b) = post(format!("/runs/{id}/curations"), unknown_cluster.clone()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{}", String::from_utf8_lossy(&b));

    let no_reason = json!({"actions": [{"action": "exclude_feature", "feature_id": "dx:SYN001", "justification": ""}]});
    let (s, _) = post(format!("/runs/{id}/curations"), no_reason).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = post(format!("/runs/{id}/curations"), json!({"actions": "merge"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = post(format!("/runs/{id}/curations"), json!({"actions": []})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = post("/runs/missing/curations".into(), unknown_cluster).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let stale = json!({
        "actions": [{"action": "drop_cluster", "experiment_id": "E01", "cluster": 1, "justification": "x"}],
        "rules_hash": "stale",
    });
    let (s, b) = post(format!("/runs/{id}/curations"), stale).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let err: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(err["status"], 409);

    let (_, runs) = get_json(&app, "/runs").await;
    assert_eq!(
        runs.as_array().unwrap().len(),
        1,
        "a rejected request must not create a run"
    );
}
