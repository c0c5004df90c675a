//! Sensor-signal faults: scenario parsing, table transforms, and the ledger
//! of faults currently shaping the runtime tables.
//!
//! Every transform is pure: [`apply_fault`] clones its input and returns a new
//! table. Per-tooth crank faults hit both revolution images of the tooth; cam
//! faults hit the single image in the 720° table.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{
    render_sine_period, table_len, Channel, EngineGeometry, SignalError, TableSet, ToothWindow,
    WaveformTable, CYCLE_DEG,
};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("scenario syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid fault{}: {message}", .id.as_ref().map(|i| format!(" '{i}'")).unwrap_or_default())]
    Semantic { id: Option<String>, message: String },
    #[error("unsupported scenario version {0}")]
    UnsupportedVersion(u32),
    #[error("duplicate fault id '{0}'")]
    DuplicateId(String),
    #[error("fault targets the {fault} channel but the table is {table}")]
    ChannelMismatch { fault: Channel, table: Channel },
    #[error("width factor {factor} on {channel} tooth {tooth} overlaps a neighbouring pulse")]
    WidthOverlap {
        channel: Channel,
        tooth: u32,
        factor: f64,
    },
    #[error("unknown fault id '{0}'")]
    UnknownId(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

impl FaultError {
    fn semantic(id: &str, message: impl Into<String>) -> Self {
        FaultError::Semantic {
            id: Some(id.to_string()),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    OnStart,
    LiveImmediate,
    LiveCycleBoundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FaultKind {
    MissingTooth {
        sensor: Channel,
        tooth: u32,
    },
    AmplitudeScale {
        sensor: Channel,
        tooth: u32,
        factor: f64,
    },
    WidthScale {
        sensor: Channel,
        tooth: u32,
        factor: f64,
    },
    PartialNoise {
        sensor: Channel,
        tooth: u32,
        sigma_volts: f64,
        seed: u64,
    },
    FullNoiseReplace {
        sensor: Channel,
        tooth: u32,
        noise_amplitude: f64,
        seed: u64,
    },
    SyncOffset {
        offset_deg_crank: f64,
    },
    GlobalNoise {
        sensor: Channel,
        sigma_volts: f64,
        seed: u64,
    },
}

impl FaultKind {
    /// Channel whose table this fault rewrites.
    pub fn channel(&self) -> Channel {
        match *self {
            FaultKind::MissingTooth { sensor, .. }
            | FaultKind::AmplitudeScale { sensor, .. }
            | FaultKind::WidthScale { sensor, .. }
            | FaultKind::PartialNoise { sensor, .. }
            | FaultKind::FullNoiseReplace { sensor, .. }
            | FaultKind::GlobalNoise { sensor, .. } => sensor,
            FaultKind::SyncOffset { .. } => Channel::Cam,
        }
    }

    pub fn tooth(&self) -> Option<u32> {
        match *self {
            FaultKind::MissingTooth { tooth, .. }
            | FaultKind::AmplitudeScale { tooth, .. }
            | FaultKind::WidthScale { tooth, .. }
            | FaultKind::PartialNoise { tooth, .. }
            | FaultKind::FullNoiseReplace { tooth, .. } => Some(tooth),
            FaultKind::SyncOffset { .. } | FaultKind::GlobalNoise { .. } => None,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            FaultKind::MissingTooth { .. } => "missing_tooth",
            FaultKind::AmplitudeScale { .. } => "amplitude_scale",
            FaultKind::WidthScale { .. } => "width_scale",
            FaultKind::PartialNoise { .. } => "partial_noise",
            FaultKind::FullNoiseReplace { .. } => "full_noise_replace",
            FaultKind::SyncOffset { .. } => "sync_offset",
            FaultKind::GlobalNoise { .. } => "global_noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultSpec {
    pub id: String,
    pub kind: FaultKind,
    pub activation: Activation,
}

impl FaultSpec {
    pub fn new(id: impl Into<String>, kind: FaultKind, activation: Activation) -> Self {
        Self {
            id: id.into(),
            kind,
            activation,
        }
    }

    /// Checks field ranges against the engine geometry.
    pub fn validate(&self, geometry: &EngineGeometry) -> Result<(), FaultError> {
        let id = self.id.as_str();
        if id.is_empty() {
            return Err(FaultError::Semantic {
                id: None,
                message: "empty fault id".into(),
            });
        }
        if let Some(tooth) = self.kind.tooth() {
            let channel = self.kind.channel();
            let count = geometry.tooth_count(channel);
            if tooth == 0 || tooth > count {
                return Err(FaultError::semantic(
                    id,
                    format!("{channel} tooth {tooth} out of range 1..={count}"),
                ));
            }
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(FaultError::semantic(id, format!("{name} must be > 0, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(FaultError::semantic(id, format!("{name} must be >= 0, got {v}")))
            }
        };
        match self.kind {
            FaultKind::MissingTooth { .. } => {}
            FaultKind::AmplitudeScale { factor, .. } => positive("factor", factor)?,
            FaultKind::WidthScale {
                sensor,
                tooth,
                factor,
            } => {
                positive("factor", factor)?;
                width_scale_fits(geometry, sensor, tooth, factor)?;
            }
            FaultKind::PartialNoise { sigma_volts, .. }
            | FaultKind::GlobalNoise { sigma_volts, .. } => non_negative("sigma", sigma_volts)?,
            FaultKind::FullNoiseReplace {
                noise_amplitude, ..
            } => non_negative("noise_amplitude", noise_amplitude)?,
            FaultKind::SyncOffset { offset_deg_crank } => {
                sample_shift(offset_deg_crank, geometry.resolution)
                    .ok_or_else(|| {
                        FaultError::semantic(
                            id,
                            format!(
                                "offset {offset_deg_crank}° is not a multiple of the {}° table resolution",
                                geometry.resolution
                            ),
                        )
                    })?;
            }
        }
        Ok(())
    }
}

/// Scenario-file representation of one fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEntry {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<Channel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tooth: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_deg: Option<f64>,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl FaultEntry {
    /// Converts to a [`FaultSpec`], rejecting missing or inapplicable fields.
    pub fn into_spec(self, default_seed: u64) -> Result<FaultSpec, FaultError> {
        let id = self.id.clone();
        let err = |m: String| FaultError::semantic(&id, m);
        let kind = self.kind.as_str();
        let needs_tooth = !matches!(kind, "sync_offset" | "global_noise");
        let allowed: &[&str] = match kind {
            "missing_tooth" => &[],
            "amplitude_scale" | "width_scale" => &["factor"],
            "partial_noise" | "global_noise" => &["sigma"],
            "full_noise_replace" => &["noise_amplitude"],
            "sync_offset" => &["offset_deg"],
            other => return Err(err(format!("unknown fault type '{other}'"))),
        };
        let present = [
            ("factor", self.factor.is_some()),
            ("sigma", self.sigma.is_some()),
            ("noise_amplitude", self.noise_amplitude.is_some()),
            ("offset_deg", self.offset_deg.is_some()),
        ];
        for (name, is_set) in present {
            if is_set && !allowed.contains(&name) {
                return Err(err(format!("field '{name}' does not apply to {kind}")));
            }
            if !is_set && allowed.contains(&name) {
                return Err(err(format!("{kind} requires field '{name}'")));
            }
        }
        if !needs_tooth && self.tooth.is_some() {
            return Err(err(format!("field 'tooth' does not apply to {kind}")));
        }
        let tooth = if needs_tooth {
            let t = self.tooth.ok_or_else(|| err(format!("{kind} requires field 'tooth'")))?;
            u32::try_from(t)
                .ok()
                .filter(|t| *t >= 1)
                .ok_or_else(|| err(format!("tooth {t} out of range")))?
        } else {
            0
        };
        let sensor = if kind == "sync_offset" {
            match self.sensor {
                None | Some(Channel::Cam) => Channel::Cam,
                Some(Channel::Crank) => return Err(err("sync_offset applies to the cam channel".into())),
            }
        } else {
            self.sensor.ok_or_else(|| err(format!("{kind} requires field 'sensor'")))?
        };
        let seed = self.seed.unwrap_or(default_seed);
        let kind = match kind {
            "missing_tooth" => FaultKind::MissingTooth { sensor, tooth },
            "amplitude_scale" => FaultKind::AmplitudeScale {
                sensor,
                tooth,
                factor: self.factor.unwrap_or_default(),
            },
            "width_scale" => FaultKind::WidthScale {
                sensor,
                tooth,
                factor: self.factor.unwrap_or_default(),
            },
            "partial_noise" => FaultKind::PartialNoise {
                sensor,
                tooth,
                sigma_volts: self.sigma.unwrap_or_default(),
                seed,
            },
            "full_noise_replace" => FaultKind::FullNoiseReplace {
                sensor,
                tooth,
                noise_amplitude: self.noise_amplitude.unwrap_or_default(),
                seed,
            },
            "global_noise" => FaultKind::GlobalNoise {
                sensor,
                sigma_volts: self.sigma.unwrap_or_default(),
                seed,
            },
            _ => FaultKind::SyncOffset {
                offset_deg_crank: self.offset_deg.unwrap_or_default(),
            },
        };
        Ok(FaultSpec {
            id: self.id,
            kind,
            activation: self.activation,
        })
    }
}

impl From<&FaultSpec> for FaultEntry {
    fn from(spec: &FaultSpec) -> Self {
        let mut e = FaultEntry {
            id: spec.id.clone(),
            kind: spec.kind.type_name().to_string(),
            sensor: Some(spec.kind.channel()),
            tooth: spec.kind.tooth().map(i64::from),
            factor: None,
            sigma: None,
            noise_amplitude: None,
            offset_deg: None,
            activation: spec.activation,
            seed: None,
        };
        match spec.kind {
            FaultKind::MissingTooth { .. } => {}
            FaultKind::AmplitudeScale { factor, .. } | FaultKind::WidthScale { factor, .. } => {
                e.factor = Some(factor)
            }
            FaultKind::PartialNoise {
                sigma_volts, seed, ..
            }
            | FaultKind::GlobalNoise {
                sigma_volts, seed, ..
            } => {
                e.sigma = Some(sigma_volts);
                e.seed = Some(seed);
            }
            FaultKind::FullNoiseReplace {
                noise_amplitude,
                seed,
                ..
            } => {
                e.noise_amplitude = Some(noise_amplitude);
                e.seed = Some(seed);
            }
            FaultKind::SyncOffset { offset_deg_crank } => e.offset_deg = Some(offset_deg_crank),
        }
        e
    }
}

impl Serialize for FaultSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        FaultEntry::from(self).serialize(serializer)
    }
}

/// Ordered, validated collection of faults loaded from a scenario document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FaultScript {
    pub version: u32,
    pub faults: Vec<FaultSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    version: u32,
    faults: Vec<FaultEntry>,
}

impl FaultScript {
    pub fn to_json(&self) -> String {
        let doc = ScenarioDoc {
            version: self.version,
            faults: self.faults.iter().map(FaultEntry::from).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("scenario serializes")
    }

    pub fn validate(&self, geometry: &EngineGeometry) -> Result<(), FaultError> {
        let mut seen = HashSet::new();
        for f in &self.faults {
            if !seen.insert(f.id.as_str()) {
                return Err(FaultError::DuplicateId(f.id.clone()));
            }
            f.validate(geometry)?;
        }
        Ok(())
    }
}

/// Parses and validates a JSON scenario document. Noise faults without an
/// explicit seed get seed 0.
pub fn parse_scenario(text: &str, geometry: &EngineGeometry) -> Result<FaultScript, FaultError> {
    parse_scenario_with_seed(text, geometry, 0)
}

/// As [`parse_scenario`], with `default_seed` for noise faults that omit one.
pub fn parse_scenario_with_seed(
    text: &str,
    geometry: &EngineGeometry,
    default_seed: u64,
) -> Result<FaultScript, FaultError> {
    let doc: ScenarioDoc = serde_json::from_str(text).map_err(|e| FaultError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.version != SCENARIO_VERSION {
        return Err(FaultError::UnsupportedVersion(doc.version));
    }
    let faults = doc
        .faults
        .into_iter()
        .map(|e| e.into_spec(default_seed))
        .collect::<Result<Vec<_>, _>>()?;
    let script = FaultScript {
        version: doc.version,
        faults,
    };
    script.validate(geometry)?;
    Ok(script)
}

/// Whole-sample rotation for a sync offset, if the offset lands on the grid.
fn sample_shift(offset_deg: f64, resolution: f64) -> Option<i64> {
    if !offset_deg.is_finite() {
        return None;
    }
    let shift = (offset_deg / resolution).round();
    ((shift * resolution - offset_deg).abs() <= 1e-9 * CYCLE_DEG.max(offset_deg.abs()))
        .then_some(shift as i64)
}

/// Free angle on each side of a tooth before the neighbouring pulse starts.
fn neighbour_gaps(geometry: &EngineGeometry, channel: Channel, tooth: u32) -> Result<(f64, f64), FaultError> {
    match channel {
        Channel::Crank => {
            let spec = &geometry.crank;
            let n = spec.teeth_per_rev;
            let w = spec.tooth_width();
            let step = |t: u32, back: bool| if back { (t + n - 2) % n + 1 } else { t % n + 1 };
            let gap = |back: bool| {
                let mut t = step(tooth, back);
                let mut free = 0.0;
                while spec.is_missing(t) && t != tooth {
                    free += w;
                    t = step(t, back);
                }
                free
            };
            Ok((gap(true), gap(false)))
        }
        Channel::Cam => {
            let teeth = geometry.cam.teeth();
            let me = geometry.cam.tooth(tooth)?;
            let start = me.peak.start_deg();
            let end = start + me.peak.width_deg;
            let mut before = CYCLE_DEG;
            let mut after = CYCLE_DEG;
            for other in teeth.iter().filter(|t| t.number != tooth) {
                let o_start = other.peak.start_deg();
                let o_end = o_start + other.peak.width_deg;
                after = after.min((o_start - end).rem_euclid(CYCLE_DEG));
                before = before.min((start - o_end).rem_euclid(CYCLE_DEG));
            }
            Ok((before, after))
        }
    }
}

fn width_scale_fits(geometry: &EngineGeometry, channel: Channel, tooth: u32, factor: f64) -> Result<(), FaultError> {
    if factor <= 1.0 {
        return Ok(());
    }
    let width = geometry.tooth_windows(channel, tooth)?[0].width_deg;
    let grow = width * (factor - 1.0) / 2.0;
    let (before, after) = neighbour_gaps(geometry, channel, tooth)?;
    if grow > before + 1e-9 || grow > after + 1e-9 {
        return Err(FaultError::WidthOverlap {
            channel,
            tooth,
            factor,
        });
    }
    Ok(())
}

/// Table windows a fault may rewrite; `None` means the whole table.
pub fn fault_support(fault: &FaultSpec, geometry: &EngineGeometry) -> Result<Option<Vec<ToothWindow>>, FaultError> {
    let Some(tooth) = fault.kind.tooth() else {
        return Ok(None);
    };
    let channel = fault.kind.channel();
    let mut windows = geometry.tooth_windows(channel, tooth)?;
    if let FaultKind::WidthScale { factor, .. } = fault.kind {
        if factor > 1.0 {
            let extra: Vec<_> = windows
                .iter()
                .map(|w| scaled_window(w, factor, geometry.resolution))
                .collect();
            windows.extend(extra);
        }
    }
    Ok(Some(windows))
}

fn scaled_window(w: &ToothWindow, factor: f64, resolution: f64) -> ToothWindow {
    let centre = w.start_deg + w.width_deg / 2.0;
    let width = w.width_deg * factor;
    let start = (centre - width / 2.0).rem_euclid(CYCLE_DEG);
    ToothWindow::for_span(start, width, resolution)
}

/// Returns a copy of `table` with `fault` applied.
pub fn apply_fault(
    table: &WaveformTable,
    fault: &FaultSpec,
    geometry: &EngineGeometry,
) -> Result<WaveformTable, FaultError> {
    let channel = fault.kind.channel();
    if channel != table.channel() {
        return Err(FaultError::ChannelMismatch {
            fault: channel,
            table: table.channel(),
        });
    }
    if table_len(geometry.resolution)? != table.len() {
        return Err(FaultError::Semantic {
            id: Some(fault.id.clone()),
            message: "table resolution differs from the engine geometry".into(),
        });
    }
    fault.validate(geometry)?;
    let mut out = table.clone();
    let n = out.len();
    let windows = match fault.kind.tooth() {
        Some(t) => geometry.tooth_windows(channel, t)?,
        None => Vec::new(),
    };

    match fault.kind {
        FaultKind::MissingTooth { .. } => {
            let s = out.samples_mut();
            for w in &windows {
                w.indices(n).for_each(|i| s[i] = 0.0);
            }
        }
        FaultKind::AmplitudeScale { factor, .. } => {
            let s = out.samples_mut();
            for w in &windows {
                w.indices(n).for_each(|i| s[i] *= factor);
            }
        }
        FaultKind::WidthScale { factor, .. } => {
            for w in &windows {
                let amplitude = w
                    .indices(n)
                    .map(|i| table.samples()[i].abs())
                    .fold(0.0, f64::max);
                let s = out.samples_mut();
                w.indices(n).for_each(|i| s[i] = 0.0);
                let scaled = scaled_window(w, factor, geometry.resolution);
                render_sine_period(&mut out, &scaled, amplitude);
            }
        }
        FaultKind::PartialNoise {
            sigma_volts, seed, ..
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = out.samples_mut();
            for w in &windows {
                for i in w.indices(n) {
                    let z: f64 = rng.sample(StandardNormal);
                    s[i] += sigma_volts * z;
                }
            }
        }
        FaultKind::FullNoiseReplace {
            noise_amplitude,
            seed,
            ..
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = out.samples_mut();
            for w in &windows {
                for i in w.indices(n) {
                    s[i] = rng.random_range(-noise_amplitude..=noise_amplitude);
                }
            }
        }
        FaultKind::GlobalNoise {
            sigma_volts, seed, ..
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in out.samples_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma_volts * z;
            }
        }
        FaultKind::SyncOffset { offset_deg_crank } => {
            let shift = sample_shift(offset_deg_crank, geometry.resolution)
                .expect("validated above")
                .rem_euclid(n as i64) as usize;
            out.samples_mut().rotate_right(shift);
        }
    }
    Ok(out)
}

/// Where in the stream a fault took effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedAt {
    /// Global index of the first output sample produced with the fault.
    pub sample: u64,
    /// Engine cycle count at that sample.
    pub cycle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub fault: FaultSpec,
    pub applied_at: AppliedAt,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FaultLedger {
    pub active: Vec<LedgerEntry>,
}

impl FaultLedger {
    pub fn contains(&self, id: &str) -> bool {
        self.active.iter().any(|e| e.fault.id == id)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

/// Clean tables plus the ledger of applied faults. Clearing a fault replays
/// the remaining ledger over a fresh clean build.
#[derive(Debug, Clone)]
pub struct FaultStage {
    geometry: EngineGeometry,
    clean: TableSet,
    current: TableSet,
    ledger: FaultLedger,
}

impl FaultStage {
    pub fn new(geometry: EngineGeometry) -> Result<Self, FaultError> {
        let clean = geometry.build_tables()?;
        Ok(Self {
            current: clean.clone(),
            clean,
            geometry,
            ledger: FaultLedger::default(),
        })
    }

    pub fn geometry(&self) -> &EngineGeometry {
        &self.geometry
    }

    pub fn tables(&self) -> &TableSet {
        &self.current
    }

    pub fn clean_tables(&self) -> &TableSet {
        &self.clean
    }

    pub fn ledger(&self) -> &FaultLedger {
        &self.ledger
    }

    pub fn apply(&mut self, fault: FaultSpec, at: AppliedAt) -> Result<&TableSet, FaultError> {
        if self.ledger.contains(&fault.id) {
            return Err(FaultError::DuplicateId(fault.id));
        }
        let channel = fault.kind.channel();
        let next = apply_fault(self.current.get(channel), &fault, &self.geometry)?;
        self.current.set(next);
        self.ledger.active.push(LedgerEntry { fault, applied_at: at });
        Ok(&self.current)
    }

    pub fn clear(&mut self, id: &str) -> Result<&TableSet, FaultError> {
        let pos = self
            .ledger
            .active
            .iter()
            .position(|e| e.fault.id == id)
            .ok_or_else(|| FaultError::UnknownId(id.to_string()))?;
        self.ledger.active.remove(pos);
        self.rebuild()?;
        Ok(&self.current)
    }

    pub fn clear_all(&mut self) {
        self.ledger.active.clear();
        self.current = self.clean.clone();
    }

    fn rebuild(&mut self) -> Result<(), FaultError> {
        let mut tables = self.clean.clone();
        for entry in &self.ledger.active {
            let channel = entry.fault.kind.channel();
            let next = apply_fault(tables.get(channel), &entry.fault, &self.geometry)?;
            tables.set(next);
        }
        self.current = tables;
        Ok(())
    }
}
