use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use embedit_core::recipe::{run_recipe, EditRecipe, FileAssets};
use embedit_core::{latent_file, ImageBuffer, Mask, Models};
use embedit_service::jobs::{JobRecord, JobState, RESTART_DIAGNOSTIC};
use embedit_service::{router, start, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const SIDE: usize = 16;

fn models() -> Models {
    Models::toy(SIDE).unwrap()
}

async fn service(home: &std::path::Path) -> (Arc<AppState>, Router) {
    let state = start(ServiceConfig::new(home), models()).await.unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn target_png(seed: u64) -> Vec<u8> {
    ImageBuffer::from_fn(SIDE, SIDE, |y, x, c| (((y * 3 + x * 5 + c * 7) as u64 + seed) % 11) as f64 / 10.0).encode_png()
}

async fn upload(app: &Router, bytes: Vec<u8>) -> String {
    let (status, v) = call_json(app, "POST", "/assets", bytes).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["address"].as_str().unwrap().to_string()
}

fn reconstruct_body(image: &str) -> Value {
    json!({ "kind": "reconstruct", "image": image, "w_iterations": 30, "n_iterations": 30, "progress_stride": 5, "seed": 3 })
}

async fn submit(app: &Router, body: &Value) -> String {
    let (status, v) = call_json(app, "POST", "/jobs", body.to_string().into_bytes()).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

/// Parses a complete SSE body into (event name, JSON data) pairs.
fn parse_sse(body: &[u8]) -> Vec<(String, Value)> {
    let text = String::from_utf8(body.to_vec()).unwrap();
    text.split("\n\n")
        .filter_map(|block| {
            let mut name = None;
            let mut data = None;
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("data:") {
                    data = Some(serde_json::from_str(v.trim()).unwrap());
                }
            }
            Some((name?, data?))
        })
        .collect()
}

async fn events(app: &Router, id: &str) -> Vec<(String, Value)> {
    let (status, body) = tokio::time::timeout(Duration::from_secs(120), call(app, "GET", &format!("/jobs/{id}/events"), vec![]))
        .await
        .expect("event stream ended");
    assert_eq!(status, StatusCode::OK);
    parse_sse(&body)
}

#[tokio::test]
async fn asset_round_trip_and_listing() {
    let home = tempfile::tempdir().unwrap();
    let (_, app) = service(home.path()).await;
    let bytes = target_png(1);
    let a = upload(&app, bytes.clone()).await;
    assert_eq!(upload(&app, bytes.clone()).await, a);
    let (status, got) = call(&app, "GET", &format!("/assets/{a}"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got, bytes);

    let m = upload(&app, Mask::left_half(SIDE).encode_png()).await;
    let (_, masks) = call_json(&app, "GET", "/assets?kind=mask", vec![]).await;
    assert_eq!(masks.as_array().unwrap().len(), 1);
    assert_eq!(masks[0]["address"], m.as_str());
    let (status, _) = call_json(&app, "POST", "/assets?kind=latent", bytes).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn tampered_asset_is_an_integrity_error() {
    let home = tempfile::tempdir().unwrap();
    let (_, app) = service(home.path()).await;
    let a = upload(&app, target_png(2)).await;
    let path = home.path().join("assets").join(&a);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    let (status, v) = call_json(&app, "GET", &format!("/assets/{a}"), vec![]).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(v["error"]["code"], "integrity");
}

#[tokio::test]
async fn unknown_ids_are_uniform_not_found() {
    let home = tempfile::tempdir().unwrap();
    let (_, app) = service(home.path()).await;
    let mut bodies = Vec::new();
    for uri in [
        "/jobs/nope".to_string(),
        "/jobs/nope/events".to_string(),
        "/jobs/nope/result".to_string(),
        "/assets/nope".to_string(),
        format!("/assets/{}", "ab".repeat(32)),
        "/no/such/route".to_string(),
    ] {
        let (status, body) = call(&app, "GET", &uri, vec![]).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        bodies.push(body);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn invalid_recipes_are_rejected_by_field() {
    let home = tempfile::tempdir().unwrap();
    let (state, app) = service(home.path()).await;
    let image = upload(&app, target_png(3)).await;
    let mask = upload(&app, Mask::left_half(SIDE).encode_png()).await;
    let big = upload(&app, ImageBuffer::filled(SIDE * 2, SIDE * 2, 0.5).encode_png()).await;
    let cases = [
        (json!({ "kind": "scribble", "image": image, "mask": mask, "base": image, "k_layers": 9 }), "k_layers"),
        (json!({ "kind": "reconstruct", "image": "ab".repeat(32) }), "image"),
        (json!({ "kind": "reconstruct", "image": big }), "image"),
        (json!({ "kind": "reconstruct", "image": image, "wobble": 1 }), "wobble"),
        (json!({ "kind": "inpaint", "image": image }), "mask"),
        (json!({ "image": image }), "kind"),
    ];
    for (body, field) in cases {
        let (status, v) = call_json(&app, "POST", "/jobs", body.to_string().into_bytes()).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}: {v}");
        assert_eq!(v["error"]["field"], field, "{v}");
    }
    assert!(state.jobs.list().is_empty(), "rejected recipes must not be enqueued");
}

#[tokio::test]
async fn reconstruct_job_end_to_end() {
    let home = tempfile::tempdir().unwrap();
    let (state, app) = service(home.path()).await;
    let image = upload(&app, target_png(4)).await;
    let body = reconstruct_body(&image);
    let id = submit(&app, &body).await;
    let (status, record) = call_json(&app, "GET", &format!("/jobs/{id}"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert!(["queued", "running", "done"].contains(&record["state"].as_str().unwrap()));

    let evs = events(&app, &id).await;
    let (last, data) = evs.last().unwrap();
    assert_eq!(last, "done", "{data}");
    let progress: Vec<&Value> = evs.iter().filter(|(n, _)| n == "progress").map(|(_, d)| d).collect();
    for pair in progress.windows(2) {
        if pair[0]["stage"] == pair[1]["stage"] {
            assert!(pair[1]["iteration"].as_u64() > pair[0]["iteration"].as_u64());
        }
    }
    assert!(progress.iter().any(|p| p.get("preview").is_some()));

    // Streamed losses are the engine's values verbatim.
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.png"), target_png(4)).unwrap();
    let mut recipe = EditRecipe::parse(&state.jobs.get(&id).unwrap().record().recipe).unwrap();
    recipe.set("image", "a.png");
    let m = models();
    let mut engine = Vec::new();
    let local = run_recipe(m.networks(), &recipe, &FileAssets { root: dir.path().into() }, &mut |stage, p| {
        engine.push((stage.to_string(), p.iteration, p.loss))
    })
    .unwrap();
    let streamed: Vec<(String, usize, f64)> = progress
        .iter()
        .map(|p| (p["stage"].as_str().unwrap().to_string(), p["iteration"].as_u64().unwrap() as usize, p["loss"].as_f64().unwrap()))
        .collect();
    assert_eq!(streamed, engine);

    let (status, result) = call_json(&app, "GET", &format!("/jobs/{id}/result"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(result["images"].as_array().unwrap().len(), 1);
    assert_eq!(result["latents"].as_array().unwrap().len(), 1);
    assert_eq!(result["stages"].as_array().unwrap().len(), 2);
    assert!(result["log"].as_str().unwrap().starts_with("stage\t"));

    let (_, img) = call(&app, "GET", &format!("/assets/{}", result["images"][0].as_str().unwrap()), vec![]).await;
    let (_, lat) = call(&app, "GET", &format!("/assets/{}", result["latents"][0].as_str().unwrap()), vec![]).await;
    let (w, n) = latent_file::decode(&lat).unwrap();
    assert_eq!(m.generator.forward(&w, &n).unwrap().encode_png(), img);
    assert_eq!(local.images[0].encode_png(), img, "service and direct runs agree");

    // A finished job replays its events and stays intact across a restart.
    let replay = events(&app, &id).await;
    assert_eq!(replay, evs);
    drop(app);
    drop(state);
    let (_, app) = service(home.path()).await;
    let (_, record) = call_json(&app, "GET", &format!("/jobs/{id}"), vec![]).await;
    assert_eq!(record["state"], "done");
    assert_eq!(events(&app, &id).await, evs);
}

#[tokio::test]
async fn result_conflicts_until_done_and_submissions_are_not_deduplicated() {
    let home = tempfile::tempdir().unwrap();
    let (_, app) = service(home.path()).await;
    let image = upload(&app, target_png(5)).await;
    let mut slow = reconstruct_body(&image);
    slow["w_iterations"] = json!(400);
    let first = submit(&app, &slow).await;
    let second = submit(&app, &slow).await;
    assert_ne!(first, second);
    let (status, v) = call_json(&app, "GET", &format!("/jobs/{second}/result"), vec![]).await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
    assert_eq!(events(&app, &second).await.last().unwrap().0, "done");
    let (status, _) = call_json(&app, "GET", &format!("/jobs/{second}/result"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn restart_fails_interrupted_jobs_with_a_diagnostic() {
    let home = tempfile::tempdir().unwrap();
    let job_dir = home.path().join("jobs").join("interrupted");
    std::fs::create_dir_all(&job_dir).unwrap();
    let record = JobRecord {
        id: "interrupted".into(),
        kind: "reconstruct".into(),
        recipe: "kind = reconstruct\nimage = x\n".into(),
        state: JobState::Running,
        progress: None,
        created_ms: 1,
        updated_ms: 1,
        result: None,
        error: None,
    };
    std::fs::write(job_dir.join("job.json"), serde_json::to_vec(&record).unwrap()).unwrap();
    let (_, app) = service(home.path()).await;
    let evs = events(&app, "interrupted").await;
    assert_eq!(evs.len(), 1);
    assert_eq!(evs[0].0, "failed");
    assert_eq!(evs[0].1["error"], RESTART_DIAGNOSTIC);
    let (status, _) = call_json(&app, "GET", "/jobs/interrupted/result", vec![]).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn inpaint_variations_return_one_image_each() {
    let home = tempfile::tempdir().unwrap();
    let (_, app) = service(home.path()).await;
    let image = upload(&app, target_png(6)).await;
    let mask = upload(&app, Mask::rect(SIDE, 4, 4, 10, 10).encode_png()).await;
    let body = json!({ "kind": "inpaint", "image": image, "mask": mask, "variations": 3, "w_iterations": 5, "n_iterations": 5 });
    let id = submit(&app, &body).await;
    assert_eq!(events(&app, &id).await.last().unwrap().0, "done");
    let (_, result) = call_json(&app, "GET", &format!("/jobs/{id}/result"), vec![]).await;
    assert_eq!(result["images"].as_array().unwrap().len(), 3);
}
