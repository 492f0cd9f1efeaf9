use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use stimplan_core::fieldmodel::{Backend, FieldSolverSpec};
use stimplan_core::pipeline::{generate_phantom, run_case, CaseFile, PhantomSpec, RunOptions, SweepTable};
use stimplan_service::{router, AppState, ServiceConfig};

fn app(config: ServiceConfig) -> Router {
    router(AppState::new(config))
}

fn small_case() -> CaseFile {
    generate_phantom(&PhantomSpec {
        target_points: 200,
        constraint_points: 200,
        streamline_count: 4,
        streamline_points: 15,
        ..PhantomSpec::default()
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    assert_eq!(res.headers()["content-type"], "application/json", "{uri}");
    assert_eq!(res.headers()["x-schema-version"], "1", "{uri}");
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(v["schema_version"], "1", "{uri}: {v}");
    (status, v)
}

async fn submit(app: &Router, body: Value) -> String {
    let (status, v) = call(app, "POST", "/runs", Some(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v["status"], "queued");
    v["run_id"].as_str().unwrap().to_string()
}

/// Poll until terminal, checking status only moves forward and progress
/// stays in [0, 1].
async fn wait(app: &Router, id: &str) -> Value {
    let order = ["queued", "running", "done", "failed"];
    let mut last = 0;
    for _ in 0..2000 {
        let (status, v) = call(app, "GET", &format!("/runs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let s = order.iter().position(|o| v["status"] == *o).unwrap();
        assert!(s >= last, "status went backwards: {v}");
        last = s;
        let f = v["progress"]["fraction"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f));
        if s >= 2 {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("run {id} did not finish");
}

#[tokio::test(flavor = "multi_thread")]
async fn run_matches_direct_pipeline() {
    let app = app(ServiceConfig::default());
    let case = small_case();
    let id = submit(&app, serde_json::to_value(&case).unwrap()).await;
    let v = wait(&app, &id).await;
    assert_eq!(v["status"], "done");
    assert_eq!(v["progress"]["fraction"], 1.0);
    let direct = run_case(&case, &RunOptions::default()).unwrap();
    assert_eq!(v["report"]["body"], serde_json::to_value(&direct).unwrap());
    assert_eq!(v["report"]["body"]["ranked"].as_array().unwrap().len(), 31);

    let (status, sweep) = call(&app, "GET", &format!("/runs/{id}/sweep"), None).await;
    assert_eq!(status, StatusCode::OK);
    let table = SweepTable::new(direct.sweep.as_ref().unwrap());
    assert_eq!(sweep["sweep"], serde_json::to_value(&table).unwrap());
}

#[tokio::test(flavor = "multi_thread")]
async fn duplicate_submissions_are_independent() {
    let app = app(ServiceConfig {
        workers: 3,
        ..ServiceConfig::default()
    });
    let mut case = small_case();
    case.sweep = false;
    let body = serde_json::to_value(&case).unwrap();
    let mut ids = Vec::new();
    for _ in 0..4 {
        ids.push(submit(&app, body.clone()).await);
    }
    let mut unique = ids.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), ids.len());
    let mut bodies = Vec::new();
    for id in &ids {
        bodies.push(wait(&app, id).await["report"]["body"].clone());
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test(flavor = "multi_thread")]
async fn overrides_are_merged_and_validated() {
    let app = app(ServiceConfig::default());
    let case = serde_json::to_value(small_case()).unwrap();
    let (status, v) = call(
        &app,
        "POST",
        "/runs",
        Some(json!({ "case": case, "overrides": { "optimization": { "gamma": 150.0 } } })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let paths: Vec<&str> = v["error"]["issues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["path"].as_str().unwrap())
        .collect();
    assert_eq!(paths, vec!["optimization.gamma"]);
    assert!(v["error"]["message"].as_str().unwrap().contains("gamma"));

    let id = submit(
        &app,
        json!({ "case": case, "overrides": { "sweep": false, "optimization": { "gamma": 20.0 } } }),
    )
    .await;
    let v = wait(&app, &id).await;
    assert_eq!(v["report"]["body"]["case"]["optimization"]["gamma"], 20.0);
    assert!(v["report"]["body"].get("sweep").is_none());
    let (status, sweep) = call(&app, "GET", &format!("/runs/{id}/sweep"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(sweep["sweep"]["rows"], json!([]));

    let (status, v) = call(&app, "POST", "/runs", Some(json!({ "case_id": 3 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let req = Request::builder().method("POST").uri("/runs").body(Body::from("{not json")).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_runs_and_routes_are_not_found() {
    let app = app(ServiceConfig::default());
    let (status, v) = call(&app, "GET", "/runs/00000000-0000-4000-8000-000000000000", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "not_found");
    let (status, _) = call(&app, "GET", "/runs/not-a-uuid/sweep", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/nowhere", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn solver_failure_keeps_its_diagnostic() {
    let app = app(ServiceConfig::default());
    let mut case = small_case();
    case.sweep = false;
    case.field = FieldSolverSpec {
        backend: Backend::FiniteDifference,
        domain_box: 30.0,
        grid_spacing: 1.0,
        max_iterations: 2,
        ..FieldSolverSpec::default()
    };
    let id = submit(&app, serde_json::to_value(&case).unwrap()).await;
    let v = wait(&app, &id).await;
    assert_eq!(v["status"], "failed");
    assert_eq!(v["error"]["stage"], "fields");
    assert_eq!(v["error"]["class"], "solver");
    assert!(v["error"]["message"].as_str().unwrap().contains("converge"), "{v}");
    assert!(v.get("report").is_none());
    let (status, sweep) = call(&app, "GET", &format!("/runs/{id}/sweep"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(sweep["error"]["kind"], "not_ready");
}

#[tokio::test(flavor = "multi_thread")]
async fn queue_limit_refuses_excess_runs() {
    let app = app(ServiceConfig {
        workers: 1,
        queue_limit: 1,
        ..ServiceConfig::default()
    });
    let body = serde_json::to_value(small_case()).unwrap();
    let first = submit(&app, body.clone()).await;
    let (status, v) = call(&app, "POST", "/runs", Some(body.clone())).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"]["kind"], "queue_full");
    wait(&app, &first).await;
    submit(&app, body).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn leads_phantoms_and_schema() {
    let app = app(ServiceConfig::default());
    let (status, v) = call(&app, "GET", "/leads", None).await;
    assert_eq!(status, StatusCode::OK);
    let abbott = v["leads"]
        .as_array()
        .unwrap()
        .iter()
        .find(|l| l["name"] == "abbott_infinity_directional")
        .unwrap();
    assert_eq!(abbott["configurations"], 31);
    assert_eq!(abbott["contacts"], json!(["1", "2A", "2B", "2C", "3A", "3B", "3C", "4"]));

    let (status, v) = call(&app, "POST", "/phantoms", Some(json!({ "seed": 9, "target_points": 40 }))).await;
    assert_eq!(status, StatusCode::CREATED);
    let expected = generate_phantom(&PhantomSpec {
        seed: 9,
        target_points: 40,
        ..PhantomSpec::default()
    });
    assert_eq!(v["case"], serde_json::to_value(&expected).unwrap());
    let (status, v) = call(&app, "POST", "/phantoms", Some(json!({ "target_points": 0 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["issues"][0]["path"], "target_points");
    let (status, _) = call(&app, "POST", "/phantoms", None).await;
    assert_eq!(status, StatusCode::CREATED);

    let (status, v) = call(&app, "GET", "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["optimization_defaults"]["lambda_cap"], 8.0);
    assert_eq!(v["limits"]["optimization.gamma"]["max"], 100.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn serves_over_tcp_on_loopback() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let service = app(ServiceConfig::default());
    let server = tokio::spawn(async move { axum::serve(listener, service).await });
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /leads HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut text = String::new();
    stream.read_to_string(&mut text).await.unwrap();
    assert!(text.starts_with("HTTP/1.1 200"));
    assert!(text.contains("abbott_infinity_directional"));
    server.abort();
}
