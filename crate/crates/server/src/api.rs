//! HTTP control API.
//!
//! Mutating requests carry the operator name in `X-Actor` (anonymous when
//! absent). Errors come back as `{"error": code, "detail": text}`.

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use nodepower_core::audit::AuditFilter;
use nodepower_core::bus::BusEvent;
use nodepower_core::master::{check_address, MasterError, Outcome};
use nodepower_core::network::NodeId;
use nodepower_core::node::Diagnostics;
use nodepower_core::CommandCode;
use nodepower_core::ServiceError;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::worker::{BusWorker, WorkerGone};

pub const ACTOR_HEADER: &str = "x-actor";
pub const ANONYMOUS: &str = "anonymous";
const DEFAULT_TRACE_LIMIT: usize = 256;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            detail: detail.into(),
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let code = e.code();
        let status = match code {
            "invalid-address" | "invalid-range" | "non-broadcastable" | "invalid-block-name" => {
                StatusCode::BAD_REQUEST
            }
            "unknown-block" | "unknown-node" => StatusCode::NOT_FOUND,
            "bus-detached" => StatusCode::SERVICE_UNAVAILABLE,
            "timeout" => StatusCode::GATEWAY_TIMEOUT,
            "malformed-payload" => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<MasterError> for ApiError {
    fn from(e: MasterError) -> Self {
        ServiceError::from(e).into()
    }
}

impl From<WorkerGone> for ApiError {
    fn from(e: WorkerGone) -> Self {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "bus-detached",
            e.to_string(),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.code, "detail": self.detail})),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub worker: BusWorker,
}

fn actor(headers: &HeaderMap) -> String {
    headers
        .get(ACTOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .unwrap_or(ANONYMOUS)
        .to_string()
}

fn parse_address(raw: &str) -> ApiResult<u16> {
    let value: u16 = raw.parse().map_err(|_| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid-address",
            format!("invalid address {raw:?}: must be within 1..=254"),
        )
    })?;
    check_address(value)?;
    Ok(value)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid-body", e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerState {
    On,
    Off,
}

impl PowerState {
    fn is_on(self) -> bool {
        self == PowerState::On
    }
}

#[derive(Debug, Deserialize)]
struct PowerRequest {
    state: PowerState,
}

/// Transaction outcome as an HTTP response: 200 on ack, 504 on timeout.
fn outcome_response(outcome: &Outcome) -> Response {
    match outcome {
        Outcome::Acked(_) => (StatusCode::OK, Json(json!({"outcome": "acked"}))).into_response(),
        Outcome::Timeout => (
            StatusCode::GATEWAY_TIMEOUT,
            Json(json!({"outcome": "timeout"})),
        )
            .into_response(),
    }
}

async fn list_nodes(State(app): State<AppState>) -> impl IntoResponse {
    let registry = app.worker.registry();
    Json(registry.records().cloned().collect::<Vec<_>>())
}

#[derive(Debug, Default, Deserialize)]
struct NodeQuery {
    #[serde(default)]
    refresh: bool,
}

async fn get_node(
    State(app): State<AppState>,
    Path(raw): Path<String>,
    Query(q): Query<NodeQuery>,
) -> ApiResult<Response> {
    let address = parse_address(&raw)?;
    if q.refresh {
        let tx = app.worker.run(move |s| s.status(address)).await??;
        if tx.outcome == Outcome::Timeout {
            return Ok(outcome_response(&tx.outcome));
        }
    }
    match app.worker.registry().get(address as u8) {
        Some(record) => Ok(Json(record.clone()).into_response()),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown-node",
            format!("node {address} is not registered"),
        )),
    }
}

async fn power_node(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(raw): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let address = parse_address(&raw)?;
    let req: PowerRequest = parse_body(&body)?;
    let actor = actor(&headers);
    let tx = app
        .worker
        .run(move |s| s.power(&actor, address, req.state.is_on()))
        .await??;
    Ok(outcome_response(&tx.outcome))
}

async fn node_sensors(State(app): State<AppState>, Path(raw): Path<String>) -> ApiResult<Response> {
    let address = parse_address(&raw)?;
    let reading = app.worker.run(move |s| s.read_sensors(address)).await??;
    Ok(Json(reading).into_response())
}

#[derive(Debug, Deserialize)]
struct ScanRequest {
    #[serde(default = "scan_from")]
    from: u16,
    #[serde(default = "scan_to")]
    to: u16,
}

fn scan_from() -> u16 {
    1
}

fn scan_to() -> u16 {
    254
}

async fn scan(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req: ScanRequest = if body.is_empty() {
        ScanRequest {
            from: scan_from(),
            to: scan_to(),
        }
    } else {
        parse_body(&body)?
    };
    let actor = actor(&headers);
    let responders = app
        .worker
        .run(move |s| s.scan_bus(&actor, req.from, req.to))
        .await??;
    Ok(Json(json!({ "responders": responders })).into_response())
}

async fn broadcast(
    State(app): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let req: PowerRequest = parse_body(&body)?;
    let actor = actor(&headers);
    let command = if req.state.is_on() {
        CommandCode::PowerOn
    } else {
        CommandCode::PowerOff
    };
    let tx = app
        .worker
        .run(move |s| s.broadcast(&actor, command))
        .await??;
    Ok(outcome_response(&tx.outcome))
}

#[derive(Debug, Deserialize)]
struct TraceQuery {
    limit: Option<usize>,
}

async fn trace(State(app): State<AppState>, Query(q): Query<TraceQuery>) -> ApiResult<Response> {
    let limit = q.limit.unwrap_or(DEFAULT_TRACE_LIMIT);
    let events: Vec<BusEvent> = app
        .worker
        .run(move |s| {
            let bus = s.network().bus();
            let skip = bus.trace_len().saturating_sub(limit);
            bus.trace().skip(skip).copied().collect()
        })
        .await?;
    Ok(Json(events).into_response())
}

async fn list_blocks(State(app): State<AppState>) -> impl IntoResponse {
    Json(app.worker.registry().blocks())
}

#[derive(Debug, Deserialize)]
struct BlockRequest {
    name: String,
    nodes: Vec<u16>,
}

async fn define_block(
    State(app): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let req: BlockRequest = parse_body(&body)?;
    let actor = actor(&headers);
    let block = app
        .worker
        .run(move |s| s.define_block(&actor, &req.name, &req.nodes))
        .await??;
    Ok((StatusCode::CREATED, Json(block)).into_response())
}

async fn power_block(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(name): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: PowerRequest = parse_body(&body)?;
    let actor = actor(&headers);
    let results = app
        .worker
        .run(move |s| s.power_block(&actor, &name, req.state.is_on()))
        .await??;
    Ok(Json(json!({ "results": results })).into_response())
}

async fn audit(
    State(app): State<AppState>,
    Query(filter): Query<AuditFilter>,
) -> ApiResult<Response> {
    let entries = app.worker.run(move |s| s.audit_query(&filter)).await??;
    Ok(Json(entries).into_response())
}

/// Emulated node as seen from the simulation side, not through the bus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimNode {
    pub id: NodeId,
    pub address: u8,
    pub plugged: bool,
    pub relay_on: bool,
    pub display: String,
    pub diagnostics: Diagnostics,
}

async fn sim_nodes(State(app): State<AppState>) -> ApiResult<Response> {
    let nodes: Vec<SimNode> = app
        .worker
        .run(|s| {
            s.network()
                .nodes()
                .map(|(id, ctl)| SimNode {
                    id,
                    address: ctl.state.read_dip(),
                    plugged: ctl.port().is_some(),
                    relay_on: ctl.state.relay_on,
                    display: ctl.state.display().to_string(),
                    diagnostics: ctl.state.diagnostics(),
                })
                .collect()
        })
        .await?;
    Ok(Json(nodes).into_response())
}

async fn sim_plug(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path((id, action)): Path<(NodeId, String)>,
) -> ApiResult<Response> {
    let plugged = match action.as_str() {
        "plug" => true,
        "unplug" => false,
        other => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown-action",
                format!("unknown action {other:?}"),
            ))
        }
    };
    let actor = actor(&headers);
    app.worker
        .run(move |s| s.set_plugged(&actor, id, plugged))
        .await??;
    Ok(StatusCode::NO_CONTENT.into_response())
}

#[derive(Debug, Deserialize)]
struct DipRequest {
    address: u8,
}

async fn sim_dip(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<NodeId>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: DipRequest = parse_body(&body)?;
    let actor = actor(&headers);
    app.worker
        .run(move |s| s.set_dip(&actor, id, req.address))
        .await??;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn diagnostics(State(app): State<AppState>) -> ApiResult<Response> {
    let body = app
        .worker
        .run(|s| {
            let bus = s.network().bus();
            json!({
                "now_us": bus.now(),
                "byte_time_us": bus.byte_time_us(),
                "trace_events": bus.trace_len(),
                "dropped_events": bus.dropped_events(),
                "faults": s.fault_stats(),
                "delivery": s.delivery_stats(),
                "policy": s.policy(),
            })
        })
        .await?;
    Ok(Json(body).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/nodes", get(list_nodes))
        .route("/nodes/{addr}", get(get_node))
        .route("/nodes/{addr}/power", post(power_node))
        .route("/nodes/{addr}/sensors", get(node_sensors))
        .route("/bus/scan", post(scan))
        .route("/bus/broadcast", post(broadcast))
        .route("/bus/trace", get(trace))
        .route("/blocks", get(list_blocks).post(define_block))
        .route("/blocks/{name}/power", post(power_block))
        .route("/audit", get(audit))
        .route("/diagnostics", get(diagnostics))
        .route("/sim/nodes", get(sim_nodes))
        .route("/sim/nodes/{id}/dip", put(sim_dip))
        .route("/sim/nodes/{id}/{action}", post(sim_plug))
        .with_state(state)
}
