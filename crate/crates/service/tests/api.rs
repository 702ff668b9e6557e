use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use trajguide_core::formats::demo_config;
use trajguide_core::geometry::rasterize_polyline;
use trajguide_core::Trajectory;
use trajguide_service::*;

fn app_with(cfg: ServiceConfig) -> Router {
    router(AppState::new(cfg))
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

fn request(method: &str, uri: &str, body: impl Into<String>) -> Request<Body> {
    Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.into()))
        .unwrap()
}

async fn send(app: &Router, method: &str, uri: &str, body: impl Into<String>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(request(method, uri, body)).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

/// `(event, data)` pairs of an SSE body.
fn parse_sse(text: &str) -> Vec<(String, Value)> {
    text.split("\n\n")
        .filter_map(|block| {
            let mut name = None;
            let mut data = String::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            Some((name?, serde_json::from_str(&data).unwrap()))
        })
        .collect()
}

async fn run_to_end(app: &Router, id: &str, overrides: Value) -> (StatusCode, Vec<(String, Value)>) {
    let resp = app
        .clone()
        .oneshot(request("POST", &format!("/sessions/{id}/run"), overrides.to_string()))
        .await
        .unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, parse_sse(&String::from_utf8(bytes.to_vec()).unwrap()))
}

async fn create(app: &Router, config: &str) -> String {
    let (status, body) = send(app, "POST", "/sessions", config).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

fn demo() -> String {
    demo_config().to_json()
}

#[tokio::test]
async fn health_and_vocab() {
    let app = app();
    let (s, v) = send(&app, "GET", "/healthz", "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (s, v) = send(&app, "GET", "/vocab", "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["words"][10], "cat");
    assert_eq!(v["render_scale"], 8);
}

#[tokio::test]
async fn create_validates_and_ids_are_distinct() {
    let app = app();
    let a = create(&app, &demo()).await;
    let b = create(&app, &demo()).await;
    assert_ne!(a, b);

    let bad = json!({"prompt": [6, 10], "trajectories": [{"token_index": 2, "polylines": [[[1, 1]]]}]});
    let (s, v) = send(&app, "POST", "/sessions", bad.to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["message"].as_str().unwrap().contains("token index out of range"));
    assert_eq!(v["field"], "trajectories");

    let bad = json!({"prompt": [6], "guidance": {"eta": "fast"}});
    let (s, v) = send(&app, "POST", "/sessions", bad.to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "guidance");

    let (s, v) = send(&app, "POST", "/sessions", json!({"schema_version": 9, "prompt": [1]}).to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "unknown_schema_version");
}

#[tokio::test]
async fn trajectories_are_replaced_and_echoed() {
    let app = app();
    let id = create(&app, &demo()).await;
    let list = json!([{"token_index": 2, "polylines": [[[1.2, 0.6], [4.0, 9.0]]]}]);
    let (s, v) = send(&app, "PUT", &format!("/sessions/{id}/trajectories"), list.to_string()).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["revision"], 1);
    let t = Trajectory::new(2, vec![vec![[1.2, 0.6], [4.0, 9.0]]]);
    let expect: Vec<[usize; 2]> = rasterize_polyline(&t, demo_config().model.dims())
        .unwrap()
        .iter()
        .map(|(r, c)| [r, c])
        .collect();
    let echoed: Vec<[usize; 2]> = serde_json::from_value(v["cells"][0]["cells"].clone()).unwrap();
    assert_eq!(echoed, expect);

    let (s, v) = send(&app, "PUT", &format!("/sessions/{id}/trajectories"), "[]").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["revision"], 2);
    assert_eq!(v["cells"], json!([]));

    let malformed = json!([{"token_index": 1, "polylines": [[]]}]);
    let (s, v) = send(&app, "PUT", &format!("/sessions/{id}/trajectories"), malformed.to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "malformed_trajectory");
    let (s, _) = send(&app, "PUT", "/sessions/nope/trajectories", "[]").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    // With no trajectories the run is unguided and reports no DTL.
    let (status, events) = run_to_end(&app, &id, json!({})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (name, done) = events.last().unwrap();
    assert_eq!(name, "done");
    assert!(done["dtl"].is_null());
    assert!(events.iter().all(|(_, e)| e["guided"] != json!(true)));
}

#[tokio::test]
async fn run_streams_every_step_then_done() {
    let app = app();
    let id = create(&app, &demo()).await;
    let (s, _) = send(&app, "GET", &format!("/sessions/{id}/result"), "").await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (status, events) = run_to_end(&app, &id, json!({})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let steps: Vec<&Value> = events.iter().filter(|(n, _)| n == "step").map(|(_, v)| v).collect();
    assert_eq!(steps.len(), 50);
    assert_eq!(events.len(), 51);
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s["step"], i);
        assert_eq!(s["heatmaps"].as_array().unwrap().len(), 2);
        if s.get("preview_png_base64").is_some() {
            assert_eq!((i + 1) % PREVIEW_EVERY, 0);
        }
    }
    assert_eq!(steps[0]["guided"], true);
    assert_eq!(steps[10]["guided"], false);
    let (name, done) = events.last().unwrap();
    assert_eq!(name, "done");
    let dtl = done["dtl"].as_f64().unwrap();
    assert_eq!(done["masks_png_base64"].as_array().unwrap().len(), 5);

    let (s, v) = send(&app, "GET", &format!("/sessions/{id}/result"), "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "done");
    assert_eq!(v["metrics"]["dtl"].as_f64().unwrap(), dtl);
    assert_eq!(v["energies"].as_array().unwrap().len(), 50);

    // Re-running from done with the same seed reproduces the DTL.
    let (status, again) = run_to_end(&app, &id, json!({"seed": 450})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(again.last().unwrap().1["dtl"].as_f64().unwrap(), dtl);

    // Unguided baseline on the same scene scores lower.
    let (_, none) = run_to_end(&app, &id, json!({"mode": "none"})).await;
    assert!(none.last().unwrap().1["dtl"].as_f64().unwrap() < dtl);
}

#[tokio::test]
async fn one_run_at_a_time_and_edits_wait() {
    let app = app_with(ServiceConfig {
        queue_capacity: 2,
        ..ServiceConfig::default()
    });
    let id = create(&app, &demo()).await;
    // Holding the stream unread keeps the worker blocked on the full queue,
    // so the session stays running.
    let first = app
        .clone()
        .oneshot(request("POST", &format!("/sessions/{id}/run"), ""))
        .await
        .unwrap();
    assert_eq!(first.status(), StatusCode::ACCEPTED);

    let mut handles = Vec::new();
    for _ in 0..5 {
        let app = app.clone();
        let uri = format!("/sessions/{id}/run");
        handles.push(tokio::spawn(async move { app.oneshot(request("POST", &uri, "")).await.unwrap().status() }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::CONFLICT);
    }
    let (s, _) = send(&app, "PUT", &format!("/sessions/{id}/trajectories"), "[]").await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = send(&app, "GET", &format!("/sessions/{id}/result"), "").await;
    assert_eq!(s, StatusCode::CONFLICT);

    let bytes = first.into_body().collect().await.unwrap().to_bytes();
    let events = parse_sse(&String::from_utf8(bytes.to_vec()).unwrap());
    assert_eq!(events.iter().filter(|(n, _)| n == "step").count(), 50);
    // Previews may be dropped for a slow reader; steps never are.
    for (i, (_, e)) in events.iter().filter(|(n, _)| n == "step").enumerate() {
        assert_eq!(e["step"], i);
        if e.get("preview_png_base64").is_some() {
            assert_eq!((i + 1) % PREVIEW_EVERY, 0);
        }
    }
    assert_eq!(events.last().unwrap().0, "done");
}

#[tokio::test]
async fn previous_result_survives_edit() {
    let app = app();
    let id = create(&app, &demo()).await;
    let (_, events) = run_to_end(&app, &id, json!({})).await;
    let dtl = events.last().unwrap().1["dtl"].as_f64().unwrap();
    let list = json!([{"token_index": 2, "polylines": [[[2, 2], [2, 12]]]}]);
    let (s, _) = send(&app, "PUT", &format!("/sessions/{id}/trajectories"), list.to_string()).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = send(&app, "GET", &format!("/sessions/{id}/result"), "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "idle");
    assert_eq!(v["revision"], 0);
    assert_eq!(v["metrics"]["dtl"].as_f64().unwrap(), dtl);
    let (s, v) = send(&app, "GET", &format!("/sessions/{id}"), "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["revision"], 1);
    let (s, _) = send(&app, "GET", "/sessions/missing/result", "").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn divergence_ends_with_failed_event() {
    let app = app();
    let id = create(&app, &demo()).await;
    let (status, events) = run_to_end(&app, &id, json!({"eta": 1e308})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (name, v) = events.last().unwrap();
    assert_eq!(name, "failed");
    assert_eq!(v["class"], "runtime");
    assert_eq!(v["error"], "guidance_diverged");
    let (_, info) = send(&app, "GET", &format!("/sessions/{id}"), "").await;
    assert_eq!(info["state"], "failed");
    // Failed sessions can run again.
    let (status, events) = run_to_end(&app, &id, json!({})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(events.last().unwrap().0, "done");

    let (s, v) = send(&app, "POST", &format!("/sessions/{id}/run"), json!({"lambda": -1}).to_string()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
}

#[tokio::test]
async fn least_recently_used_session_is_evicted() {
    let state = AppState::new(ServiceConfig {
        max_sessions: 3,
        ..ServiceConfig::default()
    });
    let app = router(state.clone());
    let a = create(&app, &demo()).await;
    let b = create(&app, &demo()).await;
    let c = create(&app, &demo()).await;
    let (s, _) = send(&app, "GET", &format!("/sessions/{a}"), "").await;
    assert_eq!(s, StatusCode::OK);
    let d = create(&app, &demo()).await;
    assert_eq!(state.session_count(), 3);
    for (id, status) in [(a, StatusCode::OK), (b, StatusCode::NOT_FOUND), (c, StatusCode::OK), (d, StatusCode::OK)] {
        assert_eq!(send(&app, "GET", &format!("/sessions/{id}"), "").await.0, status);
    }
}

#[tokio::test]
async fn artifacts_are_written_and_listed() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(ServiceConfig {
        artifact_root: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    let id = create(&app, &demo()).await;
    run_to_end(&app, &id, json!({})).await;
    let (_, v) = send(&app, "GET", &format!("/sessions/{id}/result"), "").await;
    let files: Vec<String> = serde_json::from_value(v["artifacts"].clone()).unwrap();
    assert!(files.contains(&"metrics.json".to_string()));
    assert_eq!(files.iter().filter(|f| f.starts_with("mask_")).count(), 5);
    let run_dir = std::path::PathBuf::from(v["artifact_dir"].as_str().unwrap());
    assert!(run_dir.starts_with(dir.path()));
    assert!(run_dir.join("manifest.json").exists());
}
