//! Engine kinematics and the sample-stream producer.
//!
//! [`Simulator`] owns the engine state, the active (possibly faulted) tables
//! and the auxiliary sensor bank, and turns them into [`FrameBatch`]es at the
//! configured sample rate. Each tick advances the engine first and then reads
//! the tables, so a sample describes the end of its interval.
//!
//! Wall-clock pacing lives in [`stream`].

pub mod stream;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fault::{Activation, AppliedAt, FaultError, FaultLedger, FaultScript, FaultSpec, FaultStage};
use crate::sensor::{OperatingPoint, SensorBank, SensorError, SensorTable};
use crate::signal::{CrankAngle, EngineGeometry, TableSet, CYCLE_DEG};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("runtime is not running")]
    NotRunning,
    #[error("runtime is already running")]
    AlreadyRunning,
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("target {target} rpm exceeds the platform ceiling of {ceiling} rpm")]
    AboveCeiling { target: f64, ceiling: f64 },
    #[error("invalid rpm target {0}")]
    InvalidRpm(f64),
    #[error("invalid fault: {0}")]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("streaming thread is gone")]
    Disconnected,
}

/// Highest engine speed a sample rate can represent with at least
/// `samples_per_tooth_min` output samples per tooth.
pub fn max_rpm(sample_rate: f64, samples_per_tooth_min: u32, teeth_per_rev: u32) -> f64 {
    sample_rate * 60.0 / (teeth_per_rev as f64 * samples_per_tooth_min as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    SimulatedTime,
    WallClock,
}

/// Sampling-rate ceiling of an emulated output platform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlatformLimit {
    pub max_sample_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sample_rate: f64,
    pub mode: ClockMode,
    /// rpm per second; `None` lets rpm step instantly.
    pub rpm_slew: Option<f64>,
    pub platform_limit: Option<PlatformLimit>,
    pub frame_size: usize,
    pub samples_per_tooth_min: u32,
    pub initial_rpm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sample_rate: 48_000.0,
            mode: ClockMode::SimulatedTime,
            rpm_slew: None,
            platform_limit: None,
            frame_size: 480,
            samples_per_tooth_min: 4,
            initial_rpm: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |m: String| Err(RuntimeError::InvalidConfig(m));
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad(format!("sample_rate must be > 0, got {}", self.sample_rate));
        }
        if self.frame_size == 0 {
            return bad("frame_size must be >= 1".into());
        }
        if self.samples_per_tooth_min == 0 {
            return bad("samples_per_tooth_min must be >= 1".into());
        }
        if let Some(slew) = self.rpm_slew {
            if !(slew > 0.0) {
                return bad(format!("rpm_slew must be > 0, got {slew}"));
            }
        }
        if let Some(limit) = self.platform_limit {
            if !(limit.max_sample_rate > 0.0) {
                return bad("platform max_sample_rate must be > 0".into());
            }
            if self.sample_rate > limit.max_sample_rate {
                return bad(format!(
                    "sample_rate {} exceeds the platform limit {}",
                    self.sample_rate, limit.max_sample_rate
                ));
            }
        }
        if !(self.initial_rpm >= 0.0 && self.initial_rpm.is_finite()) {
            return bad(format!("initial_rpm must be >= 0, got {}", self.initial_rpm));
        }
        Ok(())
    }

    /// rpm ceiling imposed by the emulated platform, if any.
    pub fn rpm_ceiling(&self, teeth_per_rev: u32) -> Option<f64> {
        self.platform_limit
            .map(|l| max_rpm(l.max_sample_rate, self.samples_per_tooth_min, teeth_per_rev))
    }
}

/// Engine speed and position. The angle is held as a compensated pair
/// (value plus residual) so long runs do not drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EngineState {
    pub rpm_commanded: f64,
    pub rpm_actual: f64,
    pub angle: CrankAngle,
    pub t: f64,
    pub cycle_count: u64,
    #[serde(skip)]
    angle_residual: f64,
}

impl EngineState {
    pub fn at_rest() -> Self {
        Self::with_rpm(0.0)
    }

    pub fn with_rpm(rpm: f64) -> Self {
        Self {
            rpm_commanded: rpm,
            rpm_actual: rpm,
            angle: CrankAngle::default(),
            t: 0.0,
            cycle_count: 0,
            angle_residual: 0.0,
        }
    }

    /// Total crank travel since the start, in degrees.
    pub fn unwrapped_angle(&self) -> f64 {
        self.cycle_count as f64 * CYCLE_DEG + self.angle.degrees() + self.angle_residual
    }
}

/// Moves the engine forward by `dt` seconds. rpm approaches the command at
/// most `rpm_slew · dt` per call, then the crank turns `6 · rpm · dt` degrees.
pub fn advance(state: &EngineState, dt: f64, rpm_slew: Option<f64>) -> EngineState {
    let mut next = *state;
    let gap = state.rpm_commanded - state.rpm_actual;
    next.rpm_actual = match rpm_slew {
        Some(slew) => state.rpm_actual + gap.clamp(-slew * dt, slew * dt),
        None => state.rpm_commanded,
    }
    .max(0.0);

    let delta = 6.0 * next.rpm_actual * dt;
    // two-sum keeps the rounding error of each step in the residual
    let y = delta + state.angle_residual;
    let a = state.angle.degrees();
    let mut sum = a + y;
    let bp = sum - a;
    let mut residual = (a - (sum - bp)) + (y - bp);
    let mut wraps = 0u64;
    if sum >= CYCLE_DEG {
        if sum < 2.0 * CYCLE_DEG {
            sum -= CYCLE_DEG;
            wraps = 1;
        } else {
            let k = (sum / CYCLE_DEG).floor();
            sum -= k * CYCLE_DEG;
            wraps = k as u64;
        }
    }
    if sum < 0.0 {
        residual += sum;
        sum = 0.0;
    }
    next.angle = CrankAngle::new(sum);
    next.angle_residual = residual;
    next.cycle_count = state.cycle_count + wraps;
    next.t = state.t + dt;
    next
}

/// One block of consecutive output samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub seq: u64,
    /// Global index of the first sample in this frame.
    pub first_sample: u64,
    pub sample_rate: f64,
    /// Time at the start of the frame (before its first tick).
    pub t0: f64,
    /// Crank angle at the start of the frame.
    pub angle0: CrankAngle,
    pub angle_deg: Vec<f64>,
    pub crank: Vec<f64>,
    pub cam: Vec<f64>,
    /// Auxiliary channels in [`crate::sensor::SensorId::ALL`] order.
    pub sensors: [Vec<f64>; 6],
    /// Engine state after the last sample.
    pub end_state: EngineState,
}

impl FrameBatch {
    pub fn len(&self) -> usize {
        self.crank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crank.is_empty()
    }

    /// Time stamp of sample `j` (end of its tick).
    pub fn time_of(&self, j: usize) -> f64 {
        (self.first_sample + j as u64 + 1) as f64 / self.sample_rate
    }
}

/// Where a live fault will take (or took) effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationPoint {
    /// Global index of the first affected sample.
    Sample(u64),
    /// First sample of this engine cycle.
    Cycle(u64),
}

#[derive(Debug, Clone)]
struct PendingFault {
    fault: FaultSpec,
    cycle: u64,
}

/// Control commands accepted between samples.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    SetRpm(f64),
    InjectLive(FaultSpec),
    ClearFault(String),
    SetOperatingPoint(OperatingPoint),
    LoadSensorTable(SensorTable),
    Snapshot,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    RpmAccepted { applied: f64 },
    FaultAccepted { applies_at: ActivationPoint },
    FaultCleared,
    Done,
    Snapshot(Box<Snapshot>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub running: bool,
    pub state: EngineState,
    pub next_sample: u64,
    pub ledger: FaultLedger,
    pub pending: Vec<FaultSpec>,
    pub operating_point: OperatingPoint,
}

/// Single-owner sample producer.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: RunConfig,
    stage: FaultStage,
    sensors: SensorBank,
    state: EngineState,
    next_sample: u64,
    next_seq: u64,
    running: bool,
    staged: Vec<FaultSpec>,
    pending: Vec<PendingFault>,
}

impl Simulator {
    pub fn new(config: RunConfig, geometry: EngineGeometry) -> Result<Self, RuntimeError> {
        config.validate()?;
        let stage = FaultStage::new(geometry)?;
        let state = EngineState::with_rpm(config.initial_rpm);
        let sim = Self {
            config,
            stage,
            sensors: SensorBank::default(),
            state,
            next_sample: 0,
            next_seq: 0,
            running: false,
            staged: Vec::new(),
            pending: Vec::new(),
        };
        sim.check_ceiling(sim.config.initial_rpm)?;
        Ok(sim)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn geometry(&self) -> &EngineGeometry {
        self.stage.geometry()
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn tables(&self) -> &TableSet {
        self.stage.tables()
    }

    pub fn ledger(&self) -> &FaultLedger {
        self.stage.ledger()
    }

    pub fn sensors(&self) -> &SensorBank {
        &self.sensors
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    pub fn next_sample(&self) -> u64 {
        self.next_sample
    }

    pub fn staged_faults(&self) -> &[FaultSpec] {
        &self.staged
    }

    /// Stages a scenario to apply when the run starts. Replaces any
    /// previously staged faults.
    pub fn load_scenario(&mut self, script: &FaultScript) -> Result<(), RuntimeError> {
        if self.running {
            return Err(RuntimeError::AlreadyRunning);
        }
        script.validate(self.geometry())?;
        self.staged = script.faults.clone();
        Ok(())
    }

    pub fn stage_fault(&mut self, fault: FaultSpec) -> Result<(), RuntimeError> {
        if self.running {
            return Err(RuntimeError::AlreadyRunning);
        }
        fault.validate(self.geometry())?;
        if self.staged.iter().any(|f| f.id == fault.id) {
            return Err(FaultError::DuplicateId(fault.id).into());
        }
        self.staged.push(fault);
        Ok(())
    }

    /// Starts the run. Staged on-start and immediate faults take effect from
    /// the first sample; cycle-boundary faults wait for the first wrap.
    pub fn start(&mut self) -> Result<(), RuntimeError> {
        if self.running {
            return Err(RuntimeError::AlreadyRunning);
        }
        let at = self.applied_at();
        for fault in std::mem::take(&mut self.staged) {
            match fault.activation {
                Activation::LiveCycleBoundary => self.pending.push(PendingFault {
                    fault,
                    cycle: self.state.cycle_count + 1,
                }),
                _ => {
                    self.stage.apply(fault, at)?;
                }
            }
        }
        self.running = true;
        Ok(())
    }

    pub fn stop(&mut self) {
        self.running = false;
    }

    fn applied_at(&self) -> AppliedAt {
        AppliedAt {
            sample: self.next_sample,
            cycle: self.state.cycle_count,
        }
    }

    fn check_ceiling(&self, target: f64) -> Result<(), RuntimeError> {
        if !(target >= 0.0 && target.is_finite()) {
            return Err(RuntimeError::InvalidRpm(target));
        }
        if let Some(ceiling) = self.config.rpm_ceiling(self.geometry().crank.teeth_per_rev) {
            if target > ceiling {
                return Err(RuntimeError::AboveCeiling { target, ceiling });
            }
        }
        Ok(())
    }

    pub fn set_rpm(&mut self, target: f64) -> Result<f64, RuntimeError> {
        self.check_ceiling(target)?;
        self.state.rpm_commanded = target;
        Ok(target)
    }

    /// Queues a fault while running. Immediate faults shape the very next
    /// sample; cycle-boundary faults wait for the next 0° crossing.
    pub fn inject_live(&mut self, fault: FaultSpec) -> Result<ActivationPoint, RuntimeError> {
        if !self.running {
            return Err(RuntimeError::NotRunning);
        }
        fault.validate(self.geometry())?;
        if self.stage.ledger().contains(&fault.id) || self.pending.iter().any(|p| p.fault.id == fault.id) {
            return Err(FaultError::DuplicateId(fault.id).into());
        }
        match fault.activation {
            Activation::LiveImmediate => {
                let at = self.applied_at();
                self.stage.apply(fault, at)?;
                Ok(ActivationPoint::Sample(at.sample))
            }
            Activation::LiveCycleBoundary => {
                let cycle = self.state.cycle_count + 1;
                self.pending.push(PendingFault { fault, cycle });
                Ok(ActivationPoint::Cycle(cycle))
            }
            Activation::OnStart => Err(FaultError::Semantic {
                id: Some(fault.id),
                message: "on_start faults must be staged before the run starts".into(),
            }
            .into()),
        }
    }

    /// Removes a fault from the ledger (rebuilding the tables) or from the
    /// pending queue.
    pub fn clear_fault(&mut self, id: &str) -> Result<(), RuntimeError> {
        if let Some(pos) = self.pending.iter().position(|p| p.fault.id == id) {
            self.pending.remove(pos);
            return Ok(());
        }
        if let Some(pos) = self.staged.iter().position(|f| f.id == id) {
            self.staged.remove(pos);
            return Ok(());
        }
        self.stage.clear(id)?;
        Ok(())
    }

    pub fn set_operating_point(&mut self, point: OperatingPoint) -> Result<(), RuntimeError> {
        self.sensors.set_operating_point(point)?;
        Ok(())
    }

    pub fn load_sensor_table(&mut self, table: SensorTable) {
        self.sensors.load_table(table);
    }

    pub fn execute(&mut self, command: Command) -> Result<Reply, RuntimeError> {
        match command {
            Command::SetRpm(rpm) => self.set_rpm(rpm).map(|applied| Reply::RpmAccepted { applied }),
            Command::InjectLive(fault) => self
                .inject_live(fault)
                .map(|applies_at| Reply::FaultAccepted { applies_at }),
            Command::ClearFault(id) => self.clear_fault(&id).map(|_| Reply::FaultCleared),
            Command::SetOperatingPoint(op) => self.set_operating_point(op).map(|_| Reply::Done),
            Command::LoadSensorTable(table) => {
                self.load_sensor_table(table);
                Ok(Reply::Done)
            }
            Command::Snapshot => Ok(Reply::Snapshot(Box::new(self.snapshot()))),
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            running: self.running,
            state: self.state,
            next_sample: self.next_sample,
            ledger: self.stage.ledger().clone(),
            pending: self.pending.iter().map(|p| p.fault.clone()).collect(),
            operating_point: self.sensors.operating_point(),
        }
    }

    fn activate_due(&mut self) {
        let cycle = self.state.cycle_count;
        if !self.pending.iter().any(|p| p.cycle <= cycle) {
            return;
        }
        let (due, rest): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.pending).into_iter().partition(|p| p.cycle <= cycle);
        self.pending = rest;
        let at = self.applied_at();
        for p in due {
            // validated on entry; geometry cannot change while running
            self.stage
                .apply(p.fault, at)
                .expect("pending fault was validated");
        }
    }

    /// Produces the next `n` samples.
    pub fn step(&mut self, n: usize) -> Result<FrameBatch, RuntimeError> {
        if !self.running {
            return Err(RuntimeError::NotRunning);
        }
        let rate = self.config.sample_rate;
        let dt = 1.0 / rate;
        let first_sample = self.next_sample;
        let t0 = first_sample as f64 / rate;
        let angle0 = self.state.angle;
        let mut angle_deg = Vec::with_capacity(n);
        let mut crank = Vec::with_capacity(n);
        let mut cam = Vec::with_capacity(n);
        let mut sensors: [Vec<f64>; 6] = Default::default();

        for _ in 0..n {
            let before = self.state.cycle_count;
            self.state = advance(&self.state, dt, self.config.rpm_slew);
            self.state.t = (self.next_sample + 1) as f64 / rate;
            if self.state.cycle_count != before {
                self.activate_due();
            }
            let tables = self.stage.tables();
            let angle = self.state.angle;
            angle_deg.push(angle.degrees());
            crank.push(tables.crank.sample_at(angle));
            cam.push(tables.cam.sample_at(angle));
            let volts = self.sensors.volts();
            for (ch, v) in sensors.iter_mut().zip(volts) {
                ch.push(v);
            }
            self.next_sample += 1;
        }

        let seq = self.next_seq;
        self.next_seq += 1;
        Ok(FrameBatch {
            seq,
            first_sample,
            sample_rate: rate,
            t0,
            angle0,
            angle_deg,
            crank,
            cam,
            sensors,
            end_state: self.state,
        })
    }

    /// Produces the next frame at the configured frame size.
    pub fn next_frame(&mut self) -> Result<FrameBatch, RuntimeError> {
        self.step(self.config.frame_size)
    }
}
