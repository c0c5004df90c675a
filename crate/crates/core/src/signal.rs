//! Crank and cam position-sensor waveforms as lookup tables over one engine cycle.
//!
//! Both channels are tabulated against crank angle over 720° (two crank
//! revolutions, one cam revolution). Each tooth or cam peak is rendered as one
//! full sine period across its angular window; everything else sits at a 0 V
//! baseline. Tables are immutable once built and are shared behind [`Arc`].

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fmt;
use std::ops::Add;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Crank degrees in one full engine cycle.
pub const CYCLE_DEG: f64 = 720.0;
/// Crank degrees in one crank revolution.
pub const REV_DEG: f64 = 360.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("resolution {0}° does not divide the 720° cycle into an even number of samples")]
    ResolutionNotDivisor(f64),
    #[error("resolution {resolution}° is too coarse: need at most {max}° (4 samples per tooth)")]
    ResolutionTooCoarse { resolution: f64, max: f64 },
    #[error("missing tooth {tooth} out of range 1..={teeth}")]
    MissingToothOutOfRange { tooth: u32, teeth: u32 },
    #[error("invalid tooth wheel: {0}")]
    InvalidWheel(String),
    #[error("invalid cam pattern: {0}")]
    InvalidCamPattern(String),
    #[error("cam peaks {first} and {second} overlap")]
    OverlappingPeaks { first: usize, second: usize },
    #[error("threshold {threshold} outside (0, {amplitude})")]
    ThresholdOutOfRange { threshold: f64, amplitude: f64 },
    #[error("tooth {tooth} out of range 1..={count} for the {channel} channel")]
    ToothOutOfRange { channel: Channel, tooth: u32, count: u32 },
}

/// Crank angle inside the 720° cycle. Arithmetic wraps.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct CrankAngle(f64);

impl CrankAngle {
    pub fn new(degrees: f64) -> Self {
        let wrapped = degrees.rem_euclid(CYCLE_DEG);
        // rem_euclid can round up to the modulus for tiny negative inputs
        Self(if wrapped >= CYCLE_DEG { 0.0 } else { wrapped })
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    /// Forward distance from `self` to `other`, in [0, 720).
    pub fn forward_to(self, other: CrankAngle) -> f64 {
        CrankAngle::new(other.0 - self.0).0
    }
}

impl Add<f64> for CrankAngle {
    type Output = CrankAngle;

    fn add(self, rhs: f64) -> CrankAngle {
        CrankAngle::new(self.0 + rhs)
    }
}

impl fmt::Display for CrankAngle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}°", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Crank,
    Cam,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Crank => "crank",
            Channel::Cam => "cam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PulseShape {
    /// One bipolar sine period per tooth window.
    #[default]
    FullSinePeriod,
}

/// Toothed crank trigger wheel. Tooth indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToothWheelSpec {
    pub teeth_per_rev: u32,
    pub missing_teeth: BTreeSet<u32>,
    pub amplitude: f64,
    #[serde(default)]
    pub pulse_shape: PulseShape,
}

impl Default for ToothWheelSpec {
    /// The 60-2 wheel: teeth 59 and 60 removed.
    fn default() -> Self {
        Self {
            teeth_per_rev: 60,
            missing_teeth: [59, 60].into_iter().collect(),
            amplitude: 1.0,
            pulse_shape: PulseShape::FullSinePeriod,
        }
    }
}

impl ToothWheelSpec {
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.teeth_per_rev < 4 {
            return Err(SignalError::InvalidWheel(format!(
                "teeth_per_rev must be >= 4, got {}",
                self.teeth_per_rev
            )));
        }
        if let Some(&bad) = self
            .missing_teeth
            .iter()
            .find(|&&t| t == 0 || t > self.teeth_per_rev)
        {
            return Err(SignalError::MissingToothOutOfRange {
                tooth: bad,
                teeth: self.teeth_per_rev,
            });
        }
        if self.missing_teeth.len() >= self.teeth_per_rev as usize {
            return Err(SignalError::InvalidWheel(
                "every tooth is missing".to_string(),
            ));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(SignalError::InvalidWheel(format!(
                "amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }

    /// Angular width of one tooth in crank degrees.
    pub fn tooth_width(&self) -> f64 {
        REV_DEG / self.teeth_per_rev as f64
    }

    pub fn is_missing(&self, tooth: u32) -> bool {
        self.missing_teeth.contains(&tooth)
    }

    /// Sample windows of `tooth` in a table of `len` samples, one per revolution.
    pub fn tooth_windows(&self, tooth: u32, len: usize) -> Result<Vec<ToothWindow>, SignalError> {
        if tooth == 0 || tooth > self.teeth_per_rev {
            return Err(SignalError::ToothOutOfRange {
                channel: Channel::Crank,
                tooth,
                count: self.teeth_per_rev,
            });
        }
        let per_rev = len / 2;
        let teeth = self.teeth_per_rev as usize;
        let width = self.tooth_width();
        let lo = ((tooth as usize - 1) * per_rev).div_ceil(teeth);
        let hi = (tooth as usize * per_rev).div_ceil(teeth);
        Ok((0..2)
            .map(|rev| ToothWindow {
                start_index: rev * per_rev + lo,
                len: hi - lo,
                start_deg: rev as f64 * REV_DEG + (tooth - 1) as f64 * width,
                width_deg: width,
            })
            .collect())
    }
}

/// One cam peak: a sine period of `width_deg` centred on `center_deg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakSpec {
    pub center_deg: f64,
    pub width_deg: f64,
}

impl PeakSpec {
    pub fn start_deg(&self) -> f64 {
        CrankAngle::new(self.center_deg - self.width_deg / 2.0).degrees()
    }
}

/// Cam pattern: one peak per cylinder plus an index peak, over 720° crank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamPatternSpec {
    pub cylinder_peaks: Vec<PeakSpec>,
    pub index_peak: PeakSpec,
    pub amplitude: f64,
}

impl Default for CamPatternSpec {
    fn default() -> Self {
        Self {
            cylinder_peaks: (0..6)
                .map(|k| PeakSpec {
                    center_deg: 60.0 + 120.0 * k as f64,
                    width_deg: 12.0,
                })
                .collect(),
            index_peak: PeakSpec {
                center_deg: 30.0,
                width_deg: 12.0,
            },
            amplitude: 1.0,
        }
    }
}

/// A cam peak in angular order, as numbered by the fault engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamTooth {
    pub number: u32,
    pub peak: PeakSpec,
    pub is_index: bool,
}

impl CamPatternSpec {
    pub const CYLINDERS: usize = 6;

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.cylinder_peaks.len() != Self::CYLINDERS {
            return Err(SignalError::InvalidCamPattern(format!(
                "expected {} cylinder peaks, got {}",
                Self::CYLINDERS,
                self.cylinder_peaks.len()
            )));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(SignalError::InvalidCamPattern(format!(
                "amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        let teeth = self.teeth();
        for t in &teeth {
            let p = t.peak;
            if !(p.width_deg > 0.0 && p.width_deg < CYCLE_DEG) || !p.center_deg.is_finite() {
                return Err(SignalError::InvalidCamPattern(format!(
                    "peak {} has invalid geometry {:?}",
                    t.number, p
                )));
            }
        }
        for (i, a) in teeth.iter().enumerate() {
            for b in &teeth[i + 1..] {
                let sep = CrankAngle::new(a.peak.center_deg)
                    .forward_to(CrankAngle::new(b.peak.center_deg));
                let sep = sep.min(CYCLE_DEG - sep);
                if sep < (a.peak.width_deg + b.peak.width_deg) / 2.0 {
                    return Err(SignalError::OverlappingPeaks {
                        first: a.number as usize,
                        second: b.number as usize,
                    });
                }
            }
        }
        Ok(())
    }

    /// All seven peaks numbered 1.. in order of their start angle from 0°.
    pub fn teeth(&self) -> Vec<CamTooth> {
        let mut all: Vec<(PeakSpec, bool)> = self
            .cylinder_peaks
            .iter()
            .map(|p| (*p, false))
            .chain(std::iter::once((self.index_peak, true)))
            .collect();
        all.sort_by(|a, b| a.0.start_deg().total_cmp(&b.0.start_deg()));
        all.into_iter()
            .enumerate()
            .map(|(i, (peak, is_index))| CamTooth {
                number: i as u32 + 1,
                peak,
                is_index,
            })
            .collect()
    }

    pub fn tooth_count(&self) -> u32 {
        self.cylinder_peaks.len() as u32 + 1
    }

    pub fn tooth(&self, number: u32) -> Result<CamTooth, SignalError> {
        self.teeth()
            .into_iter()
            .find(|t| t.number == number)
            .ok_or(SignalError::ToothOutOfRange {
                channel: Channel::Cam,
                tooth: number,
                count: self.tooth_count(),
            })
    }

    pub fn tooth_window(&self, number: u32, resolution: f64) -> Result<ToothWindow, SignalError> {
        let tooth = self.tooth(number)?;
        Ok(ToothWindow::for_span(
            tooth.peak.start_deg(),
            tooth.peak.width_deg,
            resolution,
        ))
    }
}

/// Contiguous run of table samples (wrapping modulo the table length).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToothWindow {
    pub start_index: usize,
    pub len: usize,
    pub start_deg: f64,
    pub width_deg: f64,
}

impl ToothWindow {
    /// Samples whose angle lies in `[start_deg, start_deg + width_deg)`.
    pub fn for_span(start_deg: f64, width_deg: f64, resolution: f64) -> Self {
        let first = (start_deg / resolution - 1e-9).ceil();
        let end = ((start_deg + width_deg) / resolution - 1e-9).ceil();
        Self {
            start_index: first as usize,
            len: (end - first).max(0.0) as usize,
            start_deg,
            width_deg,
        }
    }

    /// Table indices covered, wrapped into `0..table_len`.
    pub fn indices(&self, table_len: usize) -> impl Iterator<Item = usize> + '_ {
        (self.start_index..self.start_index + self.len).map(move |i| i % table_len)
    }

    pub fn contains(&self, index: usize, table_len: usize) -> bool {
        let rel = (index + table_len - self.start_index % table_len) % table_len;
        rel < self.len
    }
}

/// Number of samples in a 720° table, if `resolution` divides 720 evenly
/// into an even count (so each revolution gets whole samples).
pub fn table_len(resolution: f64) -> Result<usize, SignalError> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(SignalError::ResolutionNotDivisor(resolution));
    }
    let n = (CYCLE_DEG / resolution).round();
    if n < 2.0 || (n * resolution - CYCLE_DEG).abs() > 1e-9 * CYCLE_DEG || !(n as u64).is_multiple_of(2) {
        return Err(SignalError::ResolutionNotDivisor(resolution));
    }
    Ok(n as usize)
}

/// Voltage-vs-crank-angle table over one 720° cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformTable {
    channel: Channel,
    resolution: f64,
    samples: Vec<f64>,
}

impl WaveformTable {
    pub fn from_samples(
        channel: Channel,
        resolution: f64,
        samples: Vec<f64>,
    ) -> Result<Self, SignalError> {
        let n = table_len(resolution)?;
        if samples.len() != n {
            return Err(SignalError::ResolutionNotDivisor(resolution));
        }
        Ok(Self {
            channel,
            resolution,
            samples,
        })
    }

    pub fn zeros(channel: Channel, resolution: f64) -> Result<Self, SignalError> {
        let n = table_len(resolution)?;
        Ok(Self {
            channel,
            resolution,
            samples: vec![0.0; n],
        })
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn angle_of(&self, index: usize) -> f64 {
        index as f64 * self.resolution
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    /// Linear interpolation between the bracketing samples, wrapping at 720°.
    pub fn sample_at(&self, angle: CrankAngle) -> f64 {
        let n = self.samples.len();
        let pos = angle.degrees() / self.resolution;
        let nearest = pos.round();
        if (pos - nearest).abs() < 1e-9 {
            return self.samples[nearest as usize % n];
        }
        let base = pos.floor();
        let frac = pos - base;
        let i0 = base as usize % n;
        let i1 = (i0 + 1) % n;
        let (s0, s1) = (self.samples[i0], self.samples[i1]);
        s0 + (s1 - s0) * frac
    }
}

/// Convenience wrapper matching the table-lookup operation.
pub fn sample_at_angle(table: &WaveformTable, angle: CrankAngle) -> f64 {
    table.sample_at(angle)
}

pub fn build_crank_table(spec: &ToothWheelSpec, resolution: f64) -> Result<WaveformTable, SignalError> {
    spec.validate()?;
    let n = table_len(resolution)?;
    let max = spec.tooth_width() / 4.0;
    if resolution > max + 1e-12 {
        return Err(SignalError::ResolutionTooCoarse { resolution, max });
    }
    let per_rev = n / 2;
    let teeth = spec.teeth_per_rev as usize;
    let mut samples = vec![0.0; n];
    for tooth in (1..=spec.teeth_per_rev).filter(|t| !spec.is_missing(*t)) {
        for window in spec.tooth_windows(tooth, n)? {
            let rev_base = (window.start_index / per_rev) * per_rev;
            let span = samples.iter_mut().enumerate().skip(window.start_index).take(window.len);
            for (idx, sample) in span {
                // exact rational phase: (k·teeth − (tooth−1)·per_rev) / per_rev
                let k = idx - rev_base;
                let num = k * teeth - (tooth as usize - 1) * per_rev;
                let phase = num as f64 / per_rev as f64;
                *sample = spec.amplitude * (TAU * phase).sin();
            }
        }
    }
    Ok(WaveformTable {
        channel: Channel::Crank,
        resolution,
        samples,
    })
}

pub fn build_cam_table(spec: &CamPatternSpec, resolution: f64) -> Result<WaveformTable, SignalError> {
    spec.validate()?;
    let mut table = WaveformTable::zeros(Channel::Cam, resolution)?;
    for tooth in spec.teeth() {
        let window = spec.tooth_window(tooth.number, resolution)?;
        render_sine_period(&mut table, &window, spec.amplitude);
    }
    Ok(table)
}

/// Writes one sine period spanning `window` (angle-exact, not index-exact).
pub(crate) fn render_sine_period(table: &mut WaveformTable, window: &ToothWindow, amplitude: f64) {
    let n = table.len();
    let res = table.resolution;
    for j in 0..window.len {
        let unwrapped = window.start_index + j;
        let offset = unwrapped as f64 * res - window.start_deg;
        let phase = (offset / window.width_deg).clamp(0.0, 1.0);
        table.samples[unwrapped % n] = amplitude * (TAU * phase).sin();
    }
}

/// Angular interval; `end_deg` may exceed 720 when the interval wraps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AngleInterval {
    pub start_deg: f64,
    pub end_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PulseCensus {
    pub pulse_count: usize,
    pub pulse_windows: Vec<AngleInterval>,
}

#[derive(Debug, Clone, Copy)]
struct Lobe {
    start: usize,
    end: usize,
    positive: bool,
}

/// Counts pulses: maximal runs with |v| > threshold, where a positive lobe
/// followed closely by a negative lobe is one bipolar pulse.
pub fn pulse_census(
    table: &WaveformTable,
    threshold: f64,
    amplitude: f64,
) -> Result<PulseCensus, SignalError> {
    if !(threshold > 0.0 && threshold < amplitude) {
        return Err(SignalError::ThresholdOutOfRange {
            threshold,
            amplitude,
        });
    }
    let s = table.samples();
    let n = s.len();
    let res = table.resolution();
    let above = |i: usize| s[i % n].abs() > threshold;
    let Some(origin) = (0..n).find(|&i| !above(i)) else {
        return Ok(PulseCensus {
            pulse_count: 1,
            pulse_windows: vec![AngleInterval {
                start_deg: 0.0,
                end_deg: CYCLE_DEG,
            }],
        });
    };

    let mut lobes = Vec::new();
    let mut i = origin;
    while i < origin + n {
        if above(i) {
            let start = i;
            let mut peak = s[i % n];
            while i < origin + n && above(i) {
                if s[i % n].abs() > peak.abs() {
                    peak = s[i % n];
                }
                i += 1;
            }
            lobes.push(Lobe {
                start,
                end: i,
                positive: peak > 0.0,
            });
        } else {
            i += 1;
        }
    }

    let mut windows = Vec::new();
    let mut k = 0;
    while k < lobes.len() {
        let cur = lobes[k];
        let mut end = cur.end;
        if let Some(next) = lobes.get(k + 1) {
            let span = (cur.end - cur.start) + (next.end - next.start);
            if cur.positive && !next.positive && next.start - cur.end <= 4 * span {
                end = next.end;
                k += 1;
            }
        }
        let start_deg = (cur.start % n) as f64 * res;
        windows.push(AngleInterval {
            start_deg,
            end_deg: start_deg + (end - cur.start) as f64 * res,
        });
        k += 1;
    }
    Ok(PulseCensus {
        pulse_count: windows.len(),
        pulse_windows: windows,
    })
}

/// Occupancy of every crank tooth window in the table, in angular order
/// (revolution 0 teeth 1..N, then revolution 1). A window is occupied when
/// any sample exceeds `threshold` in magnitude.
pub fn crank_window_occupancy(
    table: &WaveformTable,
    spec: &ToothWheelSpec,
    threshold: f64,
) -> Result<Vec<bool>, SignalError> {
    let n = table.len();
    let mut by_rev: [Vec<bool>; 2] = [Vec::new(), Vec::new()];
    for tooth in 1..=spec.teeth_per_rev {
        for (rev, w) in spec.tooth_windows(tooth, n)?.into_iter().enumerate() {
            by_rev[rev].push(w.indices(n).any(|i| table.samples[i].abs() > threshold));
        }
    }
    let [a, b] = by_rev;
    Ok(a.into_iter().chain(b).collect())
}

/// Complete engine sensor geometry plus table resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineGeometry {
    pub crank: ToothWheelSpec,
    pub cam: CamPatternSpec,
    pub resolution: f64,
}

impl Default for EngineGeometry {
    fn default() -> Self {
        Self {
            crank: ToothWheelSpec::default(),
            cam: CamPatternSpec::default(),
            resolution: 0.1,
        }
    }
}

impl EngineGeometry {
    pub fn build_tables(&self) -> Result<TableSet, SignalError> {
        Ok(TableSet {
            crank: Arc::new(build_crank_table(&self.crank, self.resolution)?),
            cam: Arc::new(build_cam_table(&self.cam, self.resolution)?),
        })
    }

    pub fn amplitude(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Crank => self.crank.amplitude,
            Channel::Cam => self.cam.amplitude,
        }
    }

    pub fn tooth_count(&self, channel: Channel) -> u32 {
        match channel {
            Channel::Crank => self.crank.teeth_per_rev,
            Channel::Cam => self.cam.tooth_count(),
        }
    }

    /// Every table window a tooth occupies: two for crank teeth, one for cam peaks.
    pub fn tooth_windows(&self, channel: Channel, tooth: u32) -> Result<Vec<ToothWindow>, SignalError> {
        match channel {
            Channel::Crank => self.crank.tooth_windows(tooth, table_len(self.resolution)?),
            Channel::Cam => Ok(vec![self.cam.tooth_window(tooth, self.resolution)?]),
        }
    }
}

/// The pair of tables the runtime reads from.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSet {
    pub crank: Arc<WaveformTable>,
    pub cam: Arc<WaveformTable>,
}

impl TableSet {
    pub fn get(&self, channel: Channel) -> &Arc<WaveformTable> {
        match channel {
            Channel::Crank => &self.crank,
            Channel::Cam => &self.cam,
        }
    }

    pub fn set(&mut self, table: WaveformTable) {
        match table.channel() {
            Channel::Crank => self.crank = Arc::new(table),
            Channel::Cam => self.cam = Arc::new(table),
        }
    }
}
