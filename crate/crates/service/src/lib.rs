//! Network front end for the rig: a WebSocket control and telemetry
//! channel plus a few HTTP endpoints.
//!
//! - `GET /ws`: JSON control requests in, acks and telemetry out
//! - `GET /health`: liveness
//! - `GET /state`: runtime, fault and ECU snapshot
//! - `POST /scenario`: upload a scenario document

pub mod decimate;
pub mod hub;
pub mod outbox;
pub mod protocol;
pub mod rig;
pub mod session;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crankhil_core::ecu::{Bench, EcuConfig, EcuError};
use crankhil_core::runtime::Simulator;

use hub::Hub;
use protocol::{Control, ErrorBody, TelemetryKind, PROTOCOL_VERSION};
use rig::{RigHandle, RigThread};
use session::Session;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid service configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ecu(#[from] EcuError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// The rig's simulator, possibly already started or with staged faults.
    pub simulator: Simulator,
    pub bench: Bench,
    /// Frame summaries per second.
    pub display_hz: f64,
    /// Min/max buckets per frame summary.
    pub buckets: usize,
    /// Frame summaries a slow client may have queued before the oldest go.
    pub summary_capacity: usize,
    /// Seed for noise faults that do not name one.
    pub default_seed: u64,
}

impl ServiceConfig {
    pub fn new(simulator: Simulator) -> Result<Self, ServiceError> {
        let bench = Bench::new(EcuConfig::from_geometry(simulator.geometry()))?;
        Ok(Self {
            simulator,
            bench,
            display_hz: 20.0,
            buckets: 240,
            summary_capacity: 64,
            default_seed: 0,
        })
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(self.display_hz > 0.0 && self.display_hz <= self.simulator.config().sample_rate) {
            return Err(ServiceError::InvalidConfig(format!(
                "display rate {} Hz must be in (0, sample rate]",
                self.display_hz
            )));
        }
        if self.buckets == 0 || self.summary_capacity == 0 {
            return Err(ServiceError::InvalidConfig(
                "buckets and summary capacity must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A running rig plus its session hub.
#[derive(Debug)]
pub struct Service {
    hub: Arc<Hub>,
    rig: RigThread,
}

#[derive(Debug, Clone)]
struct AppState {
    hub: Arc<Hub>,
    rig: RigHandle,
}

impl Service {
    pub fn start(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let hub = Arc::new(Hub::new(config.summary_capacity));
        let rig = RigThread::spawn(&config, Arc::clone(&hub))?;
        Ok(Self { hub, rig })
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn rig(&self) -> RigHandle {
        self.rig.handle()
    }

    /// A new session that is not tied to any transport.
    pub fn session(&self) -> Session {
        Session::open(Arc::clone(&self.hub), self.rig.handle())
    }

    pub fn router(&self) -> Router {
        let state = AppState {
            hub: Arc::clone(&self.hub),
            rig: self.rig.handle(),
        };
        Router::new()
            .route("/health", get(health))
            .route("/state", get(state_snapshot))
            .route("/scenario", post(upload_scenario))
            .route("/ws", get(ws_upgrade))
            .with_state(state)
    }

    /// Serves until the listener fails. The rig stops when `self` drops.
    pub async fn serve(self, listener: TcpListener) -> std::io::Result<()> {
        let app = self.router();
        let result = axum::serve(listener, app).await;
        drop(self);
        result
    }

    /// Binds `addr` and serves in a background task; returns the bound
    /// address (useful with port 0).
    pub async fn spawn(self, addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
        let listener = TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        let task = tokio::spawn(async move {
            let _ = self.serve(listener).await;
        });
        Ok((local, task))
    }
}

fn error_response(status: StatusCode, error: ErrorBody) -> Response {
    let mut body = serde_json::to_value(&error).expect("error serializes");
    body["v"] = json!(PROTOCOL_VERSION);
    (status, Json(body)).into_response()
}

fn status_for(error: &ErrorBody) -> StatusCode {
    match error.code {
        "not_in_control" | "already_running" | "not_running" => StatusCode::CONFLICT,
        "internal" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "v": PROTOCOL_VERSION, "status": "ok" }))
}

async fn state_snapshot(State(app): State<AppState>) -> Response {
    match app.rig.state().await {
        Ok(v) => Json(v).into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn upload_scenario(State(app): State<AppState>, body: String) -> Response {
    if let Err(e) = app.hub.authorize_anonymous() {
        return error_response(StatusCode::CONFLICT, e);
    }
    match app.rig.control(Control::LoadScenario(body)).await {
        Ok(result) => Json(json!({ "v": PROTOCOL_VERSION, "result": result })).into_response(),
        Err(e) => error_response(status_for(&e), e),
    }
}

async fn ws_upgrade(State(app): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| run_socket(socket, app))
}

async fn run_socket(mut socket: WebSocket, app: AppState) {
    let mut session = Session::open(app.hub, app.rig);
    let outbox = session.outbox();
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    session.handle(text.as_str()).await;
                }
                Some(Ok(Message::Binary(_))) => {
                    outbox.push(
                        TelemetryKind::Error,
                        json!({ "request_id": null, "code": "invalid_request", "message": "binary messages are not supported" }),
                    );
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
            out = outbox.next() => match out {
                Some(msg) => {
                    if socket.send(Message::Text(msg.to_json().into())).await.is_err() {
                        break;
                    }
                }
                None => break,
            },
        }
    }
}
