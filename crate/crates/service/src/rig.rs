//! The rig thread: owns the simulator and the virtual ECU, paces frames
//! against the wall clock, executes control requests between frames and
//! publishes telemetry.

use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde_json::{json, Value};
use tokio::sync::oneshot;

use crankhil_core::ecu::{Bench, EcuDiagnostics, SyncStatus};
use crankhil_core::fault::{parse_scenario_with_seed, Activation};
use crankhil_core::runtime::{FrameBatch, Simulator};

use crate::decimate::decimate;
use crate::hub::{Hub, SessionId};
use crate::protocol::{Control, ErrorBody, TelemetryKind};
use crate::ServiceConfig;

/// How long an idle (stopped) rig waits for a request before re-checking.
const IDLE_WAIT: Duration = Duration::from_millis(100);
/// Frames the rig may fall behind before it stops trying to catch up.
const MAX_BACKLOG_FRAMES: u32 = 10;

type Reply<T> = oneshot::Sender<T>;

enum RigRequest {
    Control(Control, Reply<Result<Value, ErrorBody>>),
    Subscribe(SessionId, Reply<bool>),
    State(Reply<Value>),
    Shutdown,
}

/// Cloneable handle used by sessions and HTTP handlers.
#[derive(Debug, Clone)]
pub struct RigHandle {
    tx: Sender<RigRequest>,
}

impl std::fmt::Debug for RigRequest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RigRequest::Control(..) => "Control",
            RigRequest::Subscribe(..) => "Subscribe",
            RigRequest::State(_) => "State",
            RigRequest::Shutdown => "Shutdown",
        })
    }
}

fn gone() -> ErrorBody {
    ErrorBody::new("internal", "rig thread is not running")
}

impl RigHandle {
    pub async fn control(&self, control: Control) -> Result<Value, ErrorBody> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(RigRequest::Control(control, tx)).map_err(|_| gone())?;
        rx.await.map_err(|_| gone())?
    }

    /// Subscribes a session; the rig sends it the current diagnostics and
    /// ledger before any later change.
    pub async fn subscribe(&self, session: SessionId) -> Result<(), ErrorBody> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(RigRequest::Subscribe(session, tx)).map_err(|_| gone())?;
        match rx.await {
            Ok(true) => Ok(()),
            Ok(false) => Err(ErrorBody::new("internal", "session is closed")),
            Err(_) => Err(gone()),
        }
    }

    pub async fn state(&self) -> Result<Value, ErrorBody> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(RigRequest::State(tx)).map_err(|_| gone())?;
        rx.await.map_err(|_| gone())
    }

    fn shutdown(&self) {
        let _ = self.tx.send(RigRequest::Shutdown);
    }
}

/// Owns the rig thread; stops it on drop.
#[derive(Debug)]
pub struct RigThread {
    handle: RigHandle,
    join: Option<JoinHandle<()>>,
}

impl RigThread {
    pub fn spawn(config: &ServiceConfig, hub: Arc<Hub>) -> std::io::Result<Self> {
        let rig = Rig::new(config, hub);
        let (tx, rx) = unbounded();
        let join = thread::Builder::new()
            .name("crankhil-rig".into())
            .spawn(move || rig.run(rx))?;
        Ok(Self {
            handle: RigHandle { tx },
            join: Some(join),
        })
    }

    pub fn handle(&self) -> RigHandle {
        self.handle.clone()
    }
}

impl Drop for RigThread {
    fn drop(&mut self) {
        self.handle.shutdown();
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// The parts of the diagnostics whose change is worth announcing. The rpm
/// value itself travels in every frame summary.
#[derive(Debug, Clone, PartialEq)]
struct DiagKey {
    sync: SyncStatus,
    codes: Vec<crankhil_core::ecu::FaultCode>,
    rpm_valid: bool,
}

impl From<&EcuDiagnostics> for DiagKey {
    fn from(d: &EcuDiagnostics) -> Self {
        Self {
            sync: d.sync,
            codes: d.fault_codes.clone(),
            rpm_valid: d.rpm_estimate.valid,
        }
    }
}

struct Rig {
    sim: Simulator,
    bench: Bench,
    hub: Arc<Hub>,
    default_seed: u64,
    display_samples: usize,
    buckets: usize,
    crank_buf: Vec<f64>,
    cam_buf: Vec<f64>,
    buf_first_sample: u64,
    buf_angle0: f64,
    last_diag: Option<DiagKey>,
    last_ledger: Option<Value>,
    overruns: u64,
}

impl Rig {
    fn new(config: &ServiceConfig, hub: Arc<Hub>) -> Self {
        let rate = config.simulator.config().sample_rate;
        Self {
            sim: config.simulator.clone(),
            bench: config.bench.clone(),
            hub,
            default_seed: config.default_seed,
            display_samples: ((rate / config.display_hz).round() as usize).max(1),
            buckets: config.buckets,
            crank_buf: Vec::new(),
            cam_buf: Vec::new(),
            buf_first_sample: 0,
            buf_angle0: 0.0,
            last_diag: None,
            last_ledger: None,
            overruns: 0,
        }
    }

    fn frame_period(&self) -> Duration {
        let cfg = self.sim.config();
        Duration::from_secs_f64(cfg.frame_size as f64 / cfg.sample_rate)
    }

    fn run(mut self, rx: Receiver<RigRequest>) {
        let period = self.frame_period();
        let mut deadline = Instant::now();
        loop {
            let wait = if self.sim.is_running() {
                deadline.saturating_duration_since(Instant::now())
            } else {
                IDLE_WAIT
            };
            match rx.recv_timeout(wait) {
                Ok(RigRequest::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
                Ok(req) => {
                    let was_running = self.sim.is_running();
                    self.serve(req);
                    if !was_running && self.sim.is_running() {
                        deadline = Instant::now();
                    }
                    continue;
                }
                Err(RecvTimeoutError::Timeout) => {}
            }
            if !self.sim.is_running() {
                continue;
            }
            let now = Instant::now();
            if now < deadline {
                continue;
            }
            self.tick();
            deadline += period;
            if now > deadline + period * MAX_BACKLOG_FRAMES {
                self.overruns += 1;
                deadline = now;
            }
        }
    }

    fn serve(&mut self, req: RigRequest) {
        match req {
            RigRequest::Control(c, reply) => {
                let out = self.execute(c);
                // change notices are queued ahead of the ack
                self.publish_changes();
                let _ = reply.send(out);
            }
            RigRequest::Subscribe(id, reply) => {
                let Some(outbox) = self.hub.subscribe(id) else {
                    let _ = reply.send(false);
                    return;
                };
                outbox.push(TelemetryKind::Diagnostics, self.diagnostics_payload());
                outbox.push(TelemetryKind::FaultLedger, self.ledger_payload());
                let _ = reply.send(true);
            }
            RigRequest::State(reply) => {
                let _ = reply.send(self.state());
            }
            RigRequest::Shutdown => {}
        }
    }

    fn execute(&mut self, control: Control) -> Result<Value, ErrorBody> {
        let sim = &mut self.sim;
        match control {
            Control::Start => {
                sim.start()?;
                Ok(json!({ "running": true, "t_s": sim.state().t }))
            }
            Control::Stop => {
                if !sim.is_running() {
                    return Err(crankhil_core::runtime::RuntimeError::NotRunning.into());
                }
                sim.stop();
                Ok(json!({ "running": false, "t_s": sim.state().t }))
            }
            Control::SetRpm(rpm) => {
                let applied = sim.set_rpm(rpm)?;
                Ok(json!({ "applied_rpm": applied }))
            }
            Control::SetOperatingPoint(patch) => {
                let point = patch.apply_to(sim.sensors().operating_point());
                sim.set_operating_point(point)?;
                Ok(json!({ "operating_point": point }))
            }
            Control::InjectFault(entry) => {
                let spec = entry.into_spec(self.default_seed)?;
                let id = spec.id.clone();
                if sim.is_running() {
                    let at = sim.inject_live(spec)?;
                    Ok(json!({ "id": id, "applies_at": at }))
                } else {
                    sim.stage_fault(spec)?;
                    Ok(json!({ "id": id, "applies_at": "run_start" }))
                }
            }
            Control::ClearFault(id) => {
                sim.clear_fault(&id)?;
                Ok(json!({ "id": id }))
            }
            Control::LoadScenario(text) => {
                let script = parse_scenario_with_seed(&text, sim.geometry(), self.default_seed)?;
                if !sim.is_running() {
                    sim.load_scenario(&script)?;
                    return Ok(json!({ "staged": script.faults.len() }));
                }
                if let Some(f) = script.faults.iter().find(|f| f.activation == Activation::OnStart) {
                    return Err(ErrorBody::new(
                        "already_running",
                        format!("fault '{}' is on_start but the run is already going", f.id),
                    ));
                }
                // all or nothing: undo the earlier injections if one fails
                let mut applied = Vec::new();
                for f in script.faults {
                    let id = f.id.clone();
                    match sim.inject_live(f) {
                        Ok(at) => applied.push(json!({ "id": id, "applies_at": at })),
                        Err(e) => {
                            for done in &applied {
                                let _ = sim.clear_fault(done["id"].as_str().unwrap_or_default());
                            }
                            return Err(e.into());
                        }
                    }
                }
                Ok(json!({ "injected": applied }))
            }
            Control::ClearCodes => {
                self.bench.decoder_mut().clear_fault_codes();
                Ok(json!({}))
            }
            Control::Subscribe | Control::TakeControl => {
                Err(ErrorBody::new("internal", "session-level request reached the rig"))
            }
        }
    }

    fn tick(&mut self) {
        let frame = match self.sim.next_frame() {
            Ok(f) => f,
            Err(_) => return,
        };
        if self.bench.feed(&frame).is_err() {
            // a sequence break would mean a bug in the rig; restart the ECU view
            self.bench = Bench::new(self.bench.decoder().config().clone()).expect("config was valid");
        }
        self.collect(&frame);
        self.publish_changes();
    }

    fn collect(&mut self, frame: &FrameBatch) {
        let mut j = 0;
        while j < frame.len() {
            if self.crank_buf.is_empty() {
                self.buf_first_sample = frame.first_sample + j as u64;
                self.buf_angle0 = frame.angle_deg[j];
            }
            let room = self.display_samples - self.crank_buf.len();
            let take = room.min(frame.len() - j);
            self.crank_buf.extend_from_slice(&frame.crank[j..j + take]);
            self.cam_buf.extend_from_slice(&frame.cam[j..j + take]);
            j += take;
            if self.crank_buf.len() == self.display_samples {
                let end = j - 1;
                self.publish_summary(frame, end);
            }
        }
    }

    fn publish_summary(&mut self, frame: &FrameBatch, last: usize) {
        let est = self.bench.diagnostics().rpm_estimate;
        let state = self.sim.state();
        let payload = json!({
            "t_s": frame.time_of(last),
            "first_sample": self.buf_first_sample,
            "samples": self.crank_buf.len(),
            "sample_rate": frame.sample_rate,
            "angle_start_deg": self.buf_angle0,
            "angle_end_deg": frame.angle_deg[last],
            "angle_deg": state.angle.degrees(),
            "rpm_commanded": state.rpm_commanded,
            "rpm_actual": state.rpm_actual,
            "ecu_rpm": est.rpm,
            "ecu_rpm_valid": est.valid,
            "crank": decimate(&self.crank_buf, self.buckets),
            "cam": decimate(&self.cam_buf, self.buckets),
        });
        self.crank_buf.clear();
        self.cam_buf.clear();
        self.hub.broadcast(TelemetryKind::FrameSummary, &payload);
    }

    fn diagnostics_payload(&self) -> Value {
        json!({
            "diagnostics": self.bench.diagnostics(),
            "fault_log": self.bench.decoder().fault_log(),
            "sync_timeline": self.bench.decoder().sync_timeline(),
        })
    }

    fn ledger_payload(&self) -> Value {
        let snap = self.sim.snapshot();
        json!({
            "active": snap.ledger.active,
            "pending": snap.pending,
            "staged": self.sim.staged_faults(),
        })
    }

    fn publish_changes(&mut self) {
        let key = DiagKey::from(&self.bench.diagnostics());
        if self.last_diag.as_ref() != Some(&key) {
            self.last_diag = Some(key);
            self.hub.broadcast(TelemetryKind::Diagnostics, &self.diagnostics_payload());
        }
        let ledger = self.ledger_payload();
        if self.last_ledger.as_ref() != Some(&ledger) {
            self.hub.broadcast(TelemetryKind::FaultLedger, &ledger);
            self.last_ledger = Some(ledger);
        }
    }

    fn state(&self) -> Value {
        let snap = self.sim.snapshot();
        let cfg = self.sim.config();
        json!({
            "v": crate::protocol::PROTOCOL_VERSION,
            "running": snap.running,
            "engine": snap.state,
            "next_sample": snap.next_sample,
            "sample_rate": cfg.sample_rate,
            "frame_size": cfg.frame_size,
            "rpm_ceiling": cfg.rpm_ceiling(self.sim.geometry().crank.teeth_per_rev),
            "operating_point": snap.operating_point,
            "faults": self.ledger_payload(),
            "ecu": self.diagnostics_payload(),
            "controller": self.hub.controller(),
            "sessions": self.hub.session_count(),
            "overruns": self.overruns,
        })
    }
}
