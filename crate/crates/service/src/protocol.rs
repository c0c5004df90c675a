//! Wire messages. Every message is a JSON object with `"v": 1`.
//!
//! Client to server:
//! `{"v":1,"request_id":"r7","kind":"set_rpm","payload":{"rpm":2000}}`
//!
//! Server to client:
//! `{"v":1,"seq":42,"kind":"ack","payload":{...}}`

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crankhil_core::fault::{FaultEntry, FaultError};
use crankhil_core::runtime::RuntimeError;
use crankhil_core::sensor::OperatingPoint;

pub const PROTOCOL_VERSION: u32 = 1;

/// Request envelope before the payload is checked against its kind.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    v: u32,
    request_id: String,
    kind: String,
    #[serde(default)]
    payload: Value,
}

/// Partial operating point; absent fields keep their current value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingPointPatch {
    pub throttle_pct: Option<f64>,
    pub oil_pressure_bar: Option<f64>,
    pub boost_pressure_bar: Option<f64>,
    pub rail_pressure_bar: Option<f64>,
    pub coolant_temp_c: Option<f64>,
    pub boost_temp_c: Option<f64>,
}

impl OperatingPointPatch {
    pub fn apply_to(&self, mut point: OperatingPoint) -> OperatingPoint {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut point.throttle_pct, self.throttle_pct);
        set(&mut point.oil_pressure_bar, self.oil_pressure_bar);
        set(&mut point.boost_pressure_bar, self.boost_pressure_bar);
        set(&mut point.rail_pressure_bar, self.rail_pressure_bar);
        set(&mut point.coolant_temp_c, self.coolant_temp_c);
        set(&mut point.boost_temp_c, self.boost_temp_c);
        point
    }

    fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RpmPayload {
    rpm: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdPayload {
    id: String,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

/// A validated control request.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    Start,
    Stop,
    SetRpm(f64),
    SetOperatingPoint(OperatingPointPatch),
    InjectFault(FaultEntry),
    ClearFault(String),
    /// Full scenario document, as uploaded.
    LoadScenario(String),
    /// Unlatches the ECU fault codes.
    ClearCodes,
    Subscribe,
    TakeControl,
}

impl Control {
    pub fn kind(&self) -> &'static str {
        match self {
            Control::Start => "start",
            Control::Stop => "stop",
            Control::SetRpm(_) => "set_rpm",
            Control::SetOperatingPoint(_) => "set_operating_point",
            Control::InjectFault(_) => "inject_fault",
            Control::ClearFault(_) => "clear_fault",
            Control::LoadScenario(_) => "load_scenario",
            Control::ClearCodes => "clear_codes",
            Control::Subscribe => "subscribe",
            Control::TakeControl => "take_control",
        }
    }

    /// Whether the request changes rig state and so needs control authority.
    pub fn mutates(&self) -> bool {
        !matches!(self, Control::Subscribe | Control::TakeControl)
    }
}

/// A parsed request: its id, the raw text of kind and payload (to spot a
/// reused id with different content) and the validated command.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub request_id: String,
    pub fingerprint: String,
    pub control: Control,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestError {
    pub request_id: Option<String>,
    pub error: ErrorBody,
}

fn payload<T: for<'de> Deserialize<'de>>(kind: &str, v: Value) -> Result<T, ErrorBody> {
    let v = if v.is_null() { json!({}) } else { v };
    serde_json::from_value(v).map_err(|e| ErrorBody::invalid(format!("{kind} payload: {e}")))
}

pub fn parse_request(text: &str) -> Result<Request, RequestError> {
    let raw: Value = serde_json::from_str(text).map_err(|e| RequestError {
        request_id: None,
        error: ErrorBody::invalid(format!("not JSON: {e}")),
    })?;
    let request_id = raw.get("request_id").and_then(Value::as_str).map(str::to_string);
    let fail = |error: ErrorBody| RequestError {
        request_id: request_id.clone(),
        error,
    };
    let env: Envelope = serde_json::from_value(raw).map_err(|e| fail(ErrorBody::invalid(e.to_string())))?;
    if env.v != PROTOCOL_VERSION {
        return Err(fail(ErrorBody::new(
            "unsupported_version",
            format!("protocol version {} is not supported (expected {PROTOCOL_VERSION})", env.v),
        )));
    }
    if env.request_id.is_empty() {
        return Err(fail(ErrorBody::invalid("request_id must not be empty")));
    }
    let fingerprint = format!("{}:{}", env.kind, env.payload);
    let kind = env.kind.as_str();
    let control = match kind {
        "start" => payload::<Empty>(kind, env.payload).map(|_| Control::Start),
        "stop" => payload::<Empty>(kind, env.payload).map(|_| Control::Stop),
        "subscribe" => payload::<Empty>(kind, env.payload).map(|_| Control::Subscribe),
        "take_control" => payload::<Empty>(kind, env.payload).map(|_| Control::TakeControl),
        "clear_codes" => payload::<Empty>(kind, env.payload).map(|_| Control::ClearCodes),
        "set_rpm" => payload::<RpmPayload>(kind, env.payload).and_then(|p| {
            if p.rpm.is_finite() && p.rpm >= 0.0 {
                Ok(Control::SetRpm(p.rpm))
            } else {
                Err(ErrorBody::invalid(format!("rpm must be a finite value >= 0, got {}", p.rpm)))
            }
        }),
        "set_operating_point" => payload::<OperatingPointPatch>(kind, env.payload).and_then(|p| {
            if p.is_empty() {
                Err(ErrorBody::invalid("set_operating_point needs at least one field"))
            } else {
                Ok(Control::SetOperatingPoint(p))
            }
        }),
        "inject_fault" => payload::<FaultEntry>(kind, env.payload).map(Control::InjectFault),
        "clear_fault" => payload::<IdPayload>(kind, env.payload).map(|p| Control::ClearFault(p.id)),
        "load_scenario" => {
            if env.payload.is_object() {
                Ok(Control::LoadScenario(env.payload.to_string()))
            } else {
                Err(ErrorBody::invalid("load_scenario payload must be a scenario document"))
            }
        }
        other => Err(ErrorBody::new("unknown_kind", format!("unknown request kind '{other}'"))),
    }
    .map_err(fail)?;
    Ok(Request {
        request_id: env.request_id,
        fingerprint,
        control,
    })
}

/// Server-to-client message kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TelemetryKind {
    FrameSummary,
    Diagnostics,
    FaultLedger,
    Ack,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub v: u32,
    pub seq: u64,
    pub kind: TelemetryKind,
    pub payload: Value,
}

impl Telemetry {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("telemetry serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ceiling_rpm: Option<f64>,
}

impl ErrorBody {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            ceiling_rpm: None,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new("invalid_request", message)
    }
}

impl From<RuntimeError> for ErrorBody {
    fn from(e: RuntimeError) -> Self {
        let code = match &e {
            RuntimeError::NotRunning => "not_running",
            RuntimeError::AlreadyRunning => "already_running",
            RuntimeError::AboveCeiling { .. } => "above_ceiling",
            RuntimeError::InvalidRpm(_) | RuntimeError::InvalidConfig(_) => "invalid_request",
            RuntimeError::Fault(FaultError::UnknownId(_)) => "unknown_fault",
            RuntimeError::Fault(_) => "invalid_fault",
            RuntimeError::Sensor(_) => "invalid_operating_point",
            RuntimeError::Disconnected => "internal",
        };
        let ceiling_rpm = match e {
            RuntimeError::AboveCeiling { ceiling, .. } => Some(ceiling),
            _ => None,
        };
        Self {
            code,
            message: e.to_string(),
            ceiling_rpm,
        }
    }
}

impl From<FaultError> for ErrorBody {
    fn from(e: FaultError) -> Self {
        RuntimeError::Fault(e).into()
    }
}

/// Outcome of a request: the ack or error payload the client receives.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ack { request_id: String, kind: &'static str, result: Value },
    Error { request_id: Option<String>, error: ErrorBody },
}

impl Response {
    pub fn telemetry_kind(&self) -> TelemetryKind {
        match self {
            Response::Ack { .. } => TelemetryKind::Ack,
            Response::Error { .. } => TelemetryKind::Error,
        }
    }

    pub fn payload(&self) -> Value {
        match self {
            Response::Ack {
                request_id,
                kind,
                result,
            } => json!({ "request_id": request_id, "kind": kind, "result": result }),
            Response::Error { request_id, error } => {
                let mut v = serde_json::to_value(error).expect("error serializes");
                v["request_id"] = json!(request_id);
                v
            }
        }
    }
}
