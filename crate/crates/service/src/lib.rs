//! Local HTTP front end for the planning pipeline.
//!
//! Runs are submitted as case documents, queued, executed on a bounded
//! worker pool and polled by id. Every response is a JSON object carrying
//! `schema_version`. The service binds to loopback by default and has no
//! authentication; put it behind something that does before exposing it.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use uuid::Uuid;

use stimplan_core::anatomy::ActivationMode;
use stimplan_core::fieldmodel::FieldSolverSpec;
use stimplan_core::lead::{builtin_lead, builtin_lead_names, enumerate_configurations};
use stimplan_core::optimizer::{OptimizationSpec, Scheme};
use stimplan_core::pipeline::{
    expected_evaluations, generate_phantom, run_case, CaseFile, FieldCache, PhantomSpec, PipelineError,
    RunOptions, RunReport, SweepTable, MAX_PHANTOM_POINTS, SCHEMA_VERSION,
};
use stimplan_core::Issue;

pub const DEFAULT_PORT: u16 = 8750;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Runs executing at once.
    pub workers: usize,
    /// Queued plus running runs accepted before submissions are refused.
    pub queue_limit: usize,
    /// Directory for persisted unit-field caches.
    pub cache_dir: Option<PathBuf>,
    /// Permit binding a non-loopback address.
    pub allow_remote: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            workers: 2,
            queue_limit: 32,
            cache_dir: None,
            allow_remote: false,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be >= 1".into());
        }
        if self.queue_limit == 0 {
            return Err("queue_limit must be >= 1".into());
        }
        if !self.bind.ip().is_loopback() && !self.allow_remote {
            return Err(format!(
                "refusing to bind {} without allow_remote; the service has no authentication",
                self.bind
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Failed)
    }

    /// Transitions only move forward and never leave a terminal state.
    pub fn can_advance_to(self, next: RunStatus) -> bool {
        !self.is_terminal() && next > self
    }
}

struct RunEntry {
    status: RunStatus,
    case_id: String,
    progress: Arc<AtomicUsize>,
    total: usize,
    report: Option<Arc<RunReport>>,
    error: Option<PipelineError>,
}

impl RunEntry {
    fn advance(&mut self, next: RunStatus) {
        if self.status.can_advance_to(next) {
            self.status = next;
        } else {
            log::error!("ignored run transition {:?} -> {:?}", self.status, next);
        }
    }

    fn progress_view(&self) -> Value {
        let done = self.status == RunStatus::Done;
        let completed = if done {
            self.total
        } else {
            self.progress.load(Ordering::Relaxed).min(self.total)
        };
        let fraction = if done || self.total == 0 {
            if done { 1.0 } else { 0.0 }
        } else {
            completed as f64 / self.total as f64
        };
        json!({ "completed": completed, "total": self.total, "fraction": fraction })
    }
}

pub struct AppState {
    config: ServiceConfig,
    runs: Mutex<HashMap<Uuid, RunEntry>>,
    cache: Arc<FieldCache>,
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let cache = match &config.cache_dir {
            Some(d) => FieldCache::with_dir(d.clone()),
            None => FieldCache::new(),
        };
        Arc::new(Self {
            permits: Arc::new(Semaphore::new(config.workers.max(1))),
            config,
            runs: Mutex::new(HashMap::new()),
            cache: Arc::new(cache),
        })
    }

    fn update(&self, id: Uuid, f: impl FnOnce(&mut RunEntry)) {
        if let Some(e) = self.runs.lock().expect("run registry").get_mut(&id) {
            f(e);
        }
    }
}

/// JSON response with `schema_version` merged into the object.
fn respond(status: StatusCode, mut body: Value) -> Response {
    if let Value::Object(map) = &mut body {
        map.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    let mut res = (status, axum::Json(body)).into_response();
    res.headers_mut()
        .insert("x-schema-version", HeaderValue::from_static(SCHEMA_VERSION));
    res
}

fn error(status: StatusCode, kind: &str, message: impl Into<String>, issues: &[Issue]) -> Response {
    respond(
        status,
        json!({ "error": { "kind": kind, "message": message.into(), "issues": issues } }),
    )
}

fn pipeline_error(status: StatusCode, e: &PipelineError) -> Response {
    respond(status, json!({ "error": { "kind": "validation", "detail": e, "message": e.to_string(), "issues": e.issues } }))
}

#[derive(Debug, Deserialize)]
struct SubmitRequest {
    case: Value,
    #[serde(default)]
    overrides: Option<Value>,
}

/// Split a submission into the effective case: either `{case, overrides}`
/// with `overrides` applied as a JSON merge patch, or a bare case.
pub fn effective_case(body: &[u8]) -> Result<CaseFile, Response> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| error(StatusCode::BAD_REQUEST, "parse", format!("request body: {e}"), &[]))?;
    let mut case = match value.get("case") {
        Some(_) => {
            let req: SubmitRequest = serde_json::from_value(value)
                .map_err(|e| error(StatusCode::BAD_REQUEST, "parse", format!("request body: {e}"), &[]))?;
            let mut case = req.case;
            if let Some(patch) = &req.overrides {
                if !patch.is_object() {
                    return Err(error(
                        StatusCode::UNPROCESSABLE_ENTITY,
                        "validation",
                        "overrides must be an object",
                        &[Issue::new("overrides", "must be an object")],
                    ));
                }
                json_patch::merge(&mut case, patch);
            }
            case
        }
        None => value,
    };
    if let Value::Object(map) = &mut case {
        map.remove("schema_version");
    }
    let case: CaseFile = serde_json::from_value(case)
        .map_err(|e| error(StatusCode::UNPROCESSABLE_ENTITY, "validation", format!("case document: {e}"), &[]))?;
    let resolved = case
        .resolve(std::path::Path::new("."))
        .map_err(|e| pipeline_error(StatusCode::UNPROCESSABLE_ENTITY, &e))?;
    resolved
        .validate()
        .map_err(|e| pipeline_error(StatusCode::UNPROCESSABLE_ENTITY, &e))?;
    Ok(resolved)
}

async fn submit(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let case = match effective_case(&body) {
        Ok(c) => c,
        Err(res) => return res,
    };
    let id = Uuid::new_v4();
    let progress = Arc::new(AtomicUsize::new(0));
    let total = expected_evaluations(&case);
    {
        let mut runs = state.runs.lock().expect("run registry");
        let active = runs.values().filter(|r| !r.status.is_terminal()).count();
        if active >= state.config.queue_limit {
            return error(
                StatusCode::SERVICE_UNAVAILABLE,
                "queue_full",
                format!("{active} runs queued or running (limit {})", state.config.queue_limit),
                &[],
            );
        }
        runs.insert(
            id,
            RunEntry {
                status: RunStatus::Queued,
                case_id: case.case_id.clone(),
                progress: progress.clone(),
                total,
                report: None,
                error: None,
            },
        );
    }
    log::info!("run {id} queued ({} evaluations)", total);
    let worker_state = state.clone();
    tokio::spawn(async move {
        let Ok(_permit) = worker_state.permits.clone().acquire_owned().await else {
            return;
        };
        worker_state.update(id, |e| e.advance(RunStatus::Running));
        let cache = worker_state.cache.clone();
        let result = tokio::task::spawn_blocking(move || {
            let opts = RunOptions {
                cache: Some(&cache),
                progress: Some(progress),
                base_dir: None,
            };
            run_case(&case, &opts)
        })
        .await;
        worker_state.update(id, |e| match result {
            Ok(Ok(body)) => {
                e.report = Some(Arc::new(RunReport::new(body)));
                e.advance(RunStatus::Done);
            }
            Ok(Err(err)) => {
                log::warn!("run {id} failed: {err}");
                e.error = Some(err);
                e.advance(RunStatus::Failed);
            }
            Err(join) => {
                e.error = Some(PipelineError::new(
                    stimplan_core::pipeline::Stage::Optimize,
                    stimplan_core::pipeline::ErrorClass::Solver,
                    format!("run aborted: {join}"),
                ));
                e.advance(RunStatus::Failed);
            }
        });
    });
    respond(
        StatusCode::ACCEPTED,
        json!({
            "run_id": id,
            "status": RunStatus::Queued,
            "progress": { "completed": 0, "total": total, "fraction": 0.0 },
        }),
    )
}

fn parse_id(raw: &str) -> Result<Uuid, Response> {
    Uuid::parse_str(raw).map_err(|_| error(StatusCode::NOT_FOUND, "not_found", format!("unknown run {raw}"), &[]))
}

async fn get_run(State(state): State<Arc<AppState>>, Path(raw): Path<String>) -> Response {
    let id = match parse_id(&raw) {
        Ok(id) => id,
        Err(res) => return res,
    };
    let runs = state.runs.lock().expect("run registry");
    let Some(e) = runs.get(&id) else {
        return error(StatusCode::NOT_FOUND, "not_found", format!("unknown run {id}"), &[]);
    };
    let mut body = json!({
        "run_id": id,
        "case_id": e.case_id,
        "status": e.status,
        "progress": e.progress_view(),
    });
    if let Some(report) = &e.report {
        body["report"] = serde_json::to_value(report.as_ref()).expect("report serializes");
    }
    if let Some(err) = &e.error {
        body["error"] = serde_json::to_value(err).expect("error serializes");
    }
    respond(StatusCode::OK, body)
}

async fn get_sweep(State(state): State<Arc<AppState>>, Path(raw): Path<String>) -> Response {
    let id = match parse_id(&raw) {
        Ok(id) => id,
        Err(res) => return res,
    };
    let runs = state.runs.lock().expect("run registry");
    let Some(e) = runs.get(&id) else {
        return error(StatusCode::NOT_FOUND, "not_found", format!("unknown run {id}"), &[]);
    };
    match (&e.report, e.status) {
        (Some(report), RunStatus::Done) => {
            let table = report.body.sweep.as_ref().map_or_else(SweepTable::empty, SweepTable::new);
            respond(StatusCode::OK, json!({ "run_id": id, "sweep": table }))
        }
        (_, status) => error(
            StatusCode::CONFLICT,
            "not_ready",
            format!("run {id} is {status:?}; sweep tables exist only for done runs"),
            &[],
        ),
    }
}

async fn leads() -> Response {
    let leads: Vec<Value> = builtin_lead_names()
        .into_iter()
        .filter_map(|name| {
            let lead = builtin_lead(name).ok()?;
            let n = enumerate_configurations(&lead).map(|c| c.len()).unwrap_or(0);
            Some(json!({
                "name": name,
                "family": lead.family,
                "contacts": lead.contacts.iter().map(|c| c.label.clone()).collect::<Vec<_>>(),
                "configurations": n,
                "model": lead,
            }))
        })
        .collect();
    respond(StatusCode::OK, json!({ "leads": leads }))
}

async fn phantoms(body: Bytes) -> Response {
    let spec: PhantomSpec = if body.iter().all(u8::is_ascii_whitespace) {
        PhantomSpec::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(s) => s,
            Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, "validation", format!("phantom spec: {e}"), &[]),
        }
    };
    if let Err(e) = spec.validate() {
        return pipeline_error(StatusCode::UNPROCESSABLE_ENTITY, &e);
    }
    let case = tokio::task::spawn_blocking(move || generate_phantom(&spec))
        .await
        .expect("phantom generation");
    respond(StatusCode::CREATED, json!({ "case": case }))
}

/// Defaults and limits clients use to validate drafts before submitting.
async fn schema() -> Response {
    respond(
        StatusCode::OK,
        json!({
            "optimization_defaults": OptimizationSpec::default(),
            "field_defaults": FieldSolverSpec::default(),
            "phantom_defaults": PhantomSpec::default(),
            "activation_modes": [ActivationMode::PointWise, ActivationMode::TrajectoryWise],
            "schemes": [Scheme::Linear, Scheme::Nonlinear],
            "limits": {
                "optimization.gamma": { "min": 0.0, "max": 100.0 },
                "optimization.gamma_grid[]": { "min": 0.0, "max": 100.0 },
                "optimization.lambda_cap": { "exclusive_min": 0.0 },
                "optimization.weights.*": { "min": 0.0 },
                "optimization.thresholds.e_th_t": { "exclusive_min": 0.0 },
                "optimization.thresholds.e_th_c": { "exclusive_min": 0.0 },
                "voxel_size": { "exclusive_min": 0.0 },
                "roi_radius": { "exclusive_min": 0.0 },
                "phantom.points": { "max": MAX_PHANTOM_POINTS },
            },
        }),
    )
}

async fn not_found() -> Response {
    error(StatusCode::NOT_FOUND, "not_found", "no such endpoint", &[])
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", post(submit))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/sweep", get(get_sweep))
        .route("/leads", get(leads))
        .route("/phantoms", post(phantoms))
        .route("/schema", get(schema))
        .fallback(not_found)
        .layer(axum::middleware::map_response(|mut res: Response| async move {
            res.headers_mut()
                .entry(header::CONTENT_TYPE)
                .or_insert(HeaderValue::from_static("application/json"));
            res
        }))
        .with_state(state)
}

/// Bind and serve until the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    config
        .validate()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(config))).await
}
