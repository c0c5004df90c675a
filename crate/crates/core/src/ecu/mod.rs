//! Virtual ECU: a software stand-in for the engine controller under test.
//!
//! [`Decoder`] turns the crank and cam streams into an rpm estimate, a sync
//! status and latched fault codes. [`InjectionDriver`] uses the decoded
//! position to drive six injector lines, and [`InjectionCapture`] measures
//! those lines back against the simulator's true crank angle. [`Bench`]
//! wires all three together for a closed-loop run and builds a
//! [`DiagnosticsReport`].

mod decoder;
mod edges;
mod injection;
mod report;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensor::{SensorId, SensorTable};
use crate::signal::EngineGeometry;

pub use decoder::Decoder;
pub use edges::{Hysteresis, Transition};
pub use injection::{
    CaptureReport, InjectionCapture, InjectionConfig, InjectionDriver, InjectionEvent, InjectionFrame,
    MalformedKind, MalformedPulse, PulseSource,
};
pub use report::{Bench, CylinderStats, DiagnosticsReport, RpmSummary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EcuError {
    #[error("frame out of order: expected seq {expected}, got {found}")]
    OutOfOrder { expected: u64, found: u64 },
    #[error("invalid ECU configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultCode {
    CrankSignalMissing,
    CrankToothFault,
    CamSignalMissing,
    CamToothFault,
    CrankCamSyncFault,
}

impl fmt::Display for FaultCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FaultCode::CrankSignalMissing => "crank_signal_missing",
            FaultCode::CrankToothFault => "crank_tooth_fault",
            FaultCode::CamSignalMissing => "cam_signal_missing",
            FaultCode::CamToothFault => "cam_tooth_fault",
            FaultCode::CrankCamSyncFault => "crank_cam_sync_fault",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SyncStatus {
    #[default]
    Acquiring,
    Synchronized,
    SyncFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RpmEstimate {
    pub rpm: f64,
    pub valid: bool,
}

/// Decoder outputs at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcuDiagnostics {
    pub rpm_estimate: RpmEstimate,
    pub sync: SyncStatus,
    pub fault_codes: Vec<FaultCode>,
    /// Decoded position in the 720° cycle, once the cycle phase is known.
    pub crank_angle_estimate: Option<f64>,
}

/// First detection of a code since the last clear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub code: FaultCode,
    pub t_s: f64,
    /// Decoded cycle angle at detection, when known.
    pub cycle_angle_deg: Option<f64>,
    /// Offending tooth for tooth faults.
    pub tooth: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncEvent {
    pub t_s: f64,
    pub status: SyncStatus,
}

/// Nominal cam tooth the decoder checks each cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamToothRef {
    pub number: u32,
    pub start_deg: f64,
    pub width_deg: f64,
    pub is_index: bool,
}

/// Decoder thresholds. Defaults match the stock 60-2 wheel and cam pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcuConfig {
    pub teeth_per_rev: u32,
    /// Missing teeth immediately before tooth 1.
    pub gap_teeth: u32,
    pub crank_amplitude: f64,
    pub cam_amplitude: f64,
    /// Comparator band as a fraction of amplitude.
    pub hysteresis_frac: f64,
    /// Period ratio above which an interval is a gap candidate.
    pub gap_ratio: f64,
    /// Single-tooth periods in the rolling median.
    pub median_window: usize,
    /// Largest distance from a whole tooth position for an edge to count.
    pub edge_tolerance: f64,
    /// Minimum pulse peak as a fraction of amplitude.
    pub peak_floor_frac: f64,
    /// Accepted deviation of the cam index edge, crank degrees.
    pub sync_window_deg: f64,
    pub cam_teeth: Vec<CamToothRef>,
    pub signal_timeout_s: f64,
    pub injection: InjectionConfig,
}

impl Default for EcuConfig {
    fn default() -> Self {
        Self::from_geometry(&EngineGeometry::default())
    }
}

impl EcuConfig {
    pub fn from_geometry(geometry: &EngineGeometry) -> Self {
        let cam_teeth = geometry
            .cam
            .teeth()
            .into_iter()
            .map(|t| CamToothRef {
                number: t.number,
                start_deg: t.peak.start_deg(),
                width_deg: t.peak.width_deg,
                is_index: t.is_index,
            })
            .collect();
        Self {
            teeth_per_rev: geometry.crank.teeth_per_rev,
            gap_teeth: geometry.crank.missing_teeth.len() as u32,
            crank_amplitude: geometry.crank.amplitude,
            cam_amplitude: geometry.cam.amplitude,
            hysteresis_frac: 0.05,
            gap_ratio: 2.0,
            median_window: 20,
            edge_tolerance: 0.25,
            peak_floor_frac: 0.3,
            sync_window_deg: 15.0,
            cam_teeth,
            signal_timeout_s: 0.5,
            injection: InjectionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EcuError> {
        let bad = |m: &str| Err(EcuError::InvalidConfig(m.to_string()));
        if self.teeth_per_rev < 4 || self.gap_teeth == 0 || self.gap_teeth >= self.teeth_per_rev {
            return bad("need at least 4 teeth and a gap of 1..teeth missing teeth");
        }
        if !(self.crank_amplitude > 0.0 && self.cam_amplitude > 0.0) {
            return bad("amplitudes must be > 0");
        }
        if !(self.hysteresis_frac > 0.0 && self.hysteresis_frac < 1.0) {
            return bad("hysteresis_frac must be in (0, 1)");
        }
        if !(self.gap_ratio > 1.0) {
            return bad("gap_ratio must be > 1");
        }
        if self.median_window == 0 {
            return bad("median_window must be >= 1");
        }
        if !(self.edge_tolerance > 0.0 && self.edge_tolerance < 0.5) {
            return bad("edge_tolerance must be in (0, 0.5)");
        }
        if !(self.sync_window_deg > 0.0 && self.sync_window_deg < 180.0) {
            return bad("sync_window_deg must be in (0, 180)");
        }
        if self.cam_teeth.iter().filter(|t| t.is_index).count() != 1 {
            return bad("exactly one cam tooth must be the index");
        }
        if !(self.signal_timeout_s > 0.0) {
            return bad("signal_timeout_s must be > 0");
        }
        self.injection.validate()
    }

    pub fn tooth_width(&self) -> f64 {
        360.0 / self.teeth_per_rev as f64
    }

    pub(crate) fn cam_index(&self) -> CamToothRef {
        *self
            .cam_teeth
            .iter()
            .find(|t| t.is_index)
            .expect("validated: one index tooth")
    }
}

/// Default throttle table used to turn the throttle voltage back into a
/// pedal position.
pub(crate) fn default_throttle_table() -> SensorTable {
    SensorTable::default_for(SensorId::ThrottlePosition)
}
