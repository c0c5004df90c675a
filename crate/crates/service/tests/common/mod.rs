#![allow(dead_code)]

use std::time::{Duration, Instant};

use crankhil_core::runtime::{PlatformLimit, RunConfig, Simulator};
use crankhil_core::signal::EngineGeometry;
use crankhil_service::outbox::Outbox;
use crankhil_service::protocol::{Telemetry, TelemetryKind};
use crankhil_service::{Service, ServiceConfig};
use serde_json::{json, Value};

pub fn config_with(rate: f64, rpm: f64, limit: Option<f64>) -> ServiceConfig {
    let run = RunConfig {
        sample_rate: rate,
        initial_rpm: rpm,
        frame_size: (rate / 100.0) as usize,
        platform_limit: limit.map(|max_sample_rate| PlatformLimit { max_sample_rate }),
        ..Default::default()
    };
    ServiceConfig::new(Simulator::new(run, EngineGeometry::default()).unwrap()).unwrap()
}

pub fn service() -> Service {
    Service::start(config_with(48_000.0, 2000.0, None)).unwrap()
}

pub fn request(id: &str, kind: &str, payload: Value) -> String {
    json!({ "v": 1, "request_id": id, "kind": kind, "payload": payload }).to_string()
}

/// Pops messages until one matches or `timeout` passes; returns everything
/// popped, the match last.
pub async fn wait_for<F: Fn(&Telemetry) -> bool>(outbox: &Outbox, timeout: Duration, pred: F) -> Vec<Telemetry> {
    let deadline = Instant::now() + timeout;
    let mut seen = Vec::new();
    while Instant::now() < deadline {
        match tokio::time::timeout(Duration::from_millis(50), outbox.next()).await {
            Ok(Some(m)) => {
                let hit = pred(&m);
                seen.push(m);
                if hit {
                    return seen;
                }
            }
            Ok(None) => break,
            Err(_) => {}
        }
    }
    panic!("no matching message within {timeout:?}; saw {:?}", kinds(&seen));
}

/// Everything delivered over `span`.
pub async fn collect_for(outbox: &Outbox, span: Duration) -> Vec<Telemetry> {
    let deadline = Instant::now() + span;
    let mut seen = Vec::new();
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return seen;
        }
        match tokio::time::timeout(left, outbox.next()).await {
            Ok(Some(m)) => seen.push(m),
            Ok(None) | Err(_) => return seen,
        }
    }
}

pub fn kinds(msgs: &[Telemetry]) -> Vec<TelemetryKind> {
    msgs.iter().map(|m| m.kind).collect()
}

pub fn is_kind(kind: TelemetryKind) -> impl Fn(&Telemetry) -> bool {
    move |m| m.kind == kind
}
