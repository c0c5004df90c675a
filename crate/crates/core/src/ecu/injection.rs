//! Injection pulse emission and capture.
//!
//! The driver fires one pulse per cylinder per cycle at angles taken from the
//! decoder's position estimate, so any decoding error shows up in the
//! captured angles. Capture looks only at the injector lines and the
//! simulator's true crank angle.

use serde::{Deserialize, Serialize};

use super::{default_throttle_table, EcuError};
use crate::sensor::SensorTable;
use crate::signal::CrankAngle;

pub const CYLINDERS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub firing_order: [u8; CYLINDERS],
    /// Start of injection relative to each slot's nominal angle (negative is
    /// before). Slot `j` of the firing order sits at `120·j`.
    pub soi_offset_deg: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Table the throttle voltage is read back through.
    pub throttle_table: SensorTable,
    pub pulse_amplitude: f64,
    /// Capture threshold as a fraction of the pulse amplitude.
    pub capture_threshold_frac: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            firing_order: [1, 5, 3, 6, 2, 4],
            soi_offset_deg: -10.0,
            min_duration_s: 0.5e-3,
            max_duration_s: 2.5e-3,
            throttle_table: default_throttle_table(),
            pulse_amplitude: 1.0,
            capture_threshold_frac: 0.5,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<(), EcuError> {
        let mut seen = [false; CYLINDERS];
        for &c in &self.firing_order {
            if !(1..=CYLINDERS as u8).contains(&c) || seen[c as usize - 1] {
                return Err(EcuError::InvalidConfig(format!(
                    "firing order {:?} is not a permutation of 1..=6",
                    self.firing_order
                )));
            }
            seen[c as usize - 1] = true;
        }
        if !(self.min_duration_s > 0.0 && self.max_duration_s >= self.min_duration_s) {
            return Err(EcuError::InvalidConfig("need 0 < min_duration <= max_duration".into()));
        }
        if !(self.pulse_amplitude > 0.0) {
            return Err(EcuError::InvalidConfig("pulse_amplitude must be > 0".into()));
        }
        if !(self.capture_threshold_frac > 0.0 && self.capture_threshold_frac < 1.0) {
            return Err(EcuError::InvalidConfig("capture threshold must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Commanded start angle of firing slot `slot`.
    pub fn slot_angle(&self, slot: usize) -> f64 {
        CrankAngle::new(self.soi_offset_deg + 120.0 * slot as f64).degrees()
    }

    /// The emitted schedule for one cycle, in firing order.
    pub fn schedule(&self, throttle_pct: f64) -> Vec<InjectionEvent> {
        let duration = self.duration_for_pct(throttle_pct);
        (0..CYLINDERS)
            .map(|slot| InjectionEvent {
                cylinder: self.firing_order[slot],
                start_angle: self.slot_angle(slot),
                duration,
                source: PulseSource::Emitted,
                t_start: None,
            })
            .collect()
    }

    pub fn duration_for_pct(&self, pct: f64) -> f64 {
        let f = (pct / 100.0).clamp(0.0, 1.0);
        self.min_duration_s + (self.max_duration_s - self.min_duration_s) * f
    }

    /// Throttle position recovered from the sensor voltage.
    pub fn throttle_pct(&self, volts: f64) -> f64 {
        invert_table(&self.throttle_table, volts)
    }
}

/// Input whose table output is `volts`, for a monotone table; clamps to the
/// span's ends.
fn invert_table(table: &SensorTable, volts: f64) -> f64 {
    let pts = table.points();
    let (first, last) = (pts[0], pts[pts.len() - 1]);
    let rising = last.1 >= first.1;
    let (lo, hi) = if rising { (first, last) } else { (last, first) };
    if volts <= lo.1 {
        return lo.0;
    }
    if volts >= hi.1 {
        return hi.0;
    }
    for seg in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        if (y0.min(y1)..=y0.max(y1)).contains(&volts) {
            if y0 == y1 {
                return x0;
            }
            return x0 + (volts - y0) / (y1 - y0) * (x1 - x0);
        }
    }
    lo.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseSource {
    Emitted,
    Captured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionEvent {
    pub cylinder: u8,
    pub start_angle: f64,
    pub duration: f64,
    pub source: PulseSource,
    /// Time of the first high sample, when the event was placed in a stream.
    pub t_start: Option<f64>,
}

/// Injector line samples aligned with one runtime frame.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionFrame {
    pub seq: u64,
    pub first_sample: u64,
    pub sample_rate: f64,
    /// One line per cylinder, cylinder 1 first.
    pub lines: [Vec<f64>; CYLINDERS],
    pub events: Vec<InjectionEvent>,
}

#[derive(Debug, Clone)]
pub struct InjectionDriver {
    cfg: InjectionConfig,
    /// Unwrapped decoded angle at which each firing slot next fires.
    next_fire: Option<[f64; CYLINDERS]>,
    remaining: [u64; CYLINDERS],
}

impl InjectionDriver {
    pub fn new(cfg: InjectionConfig) -> Result<Self, EcuError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            next_fire: None,
            remaining: [0; CYLINDERS],
        })
    }

    pub fn config(&self) -> &InjectionConfig {
        &self.cfg
    }

    /// Produces the line levels for one sample.
    ///
    /// `angle` is the decoder's unwrapped cycle angle (None while not
    /// synchronized) and `step` the decoded degrees per sample. A pulse
    /// starts on the sample nearest its commanded angle.
    pub fn sample(
        &mut self,
        t: f64,
        sample_rate: f64,
        angle: Option<f64>,
        step: f64,
        throttle_v: f64,
        events: &mut Vec<InjectionEvent>,
    ) -> [f64; CYLINDERS] {
        match angle {
            None => self.next_fire = None,
            Some(a) => {
                let half = 0.5 * step;
                let next = self.next_fire.get_or_insert_with(|| {
                    std::array::from_fn(|slot| {
                        let s = self.cfg.slot_angle(slot);
                        // first firing strictly ahead of the current position
                        let k = ((a + half - s) / 720.0).floor() + 1.0;
                        s + 720.0 * k
                    })
                });
                for (slot, fire_at) in next.iter_mut().enumerate() {
                    if a >= *fire_at - half {
                        let duration = self.cfg.duration_for_pct(self.cfg.throttle_pct(throttle_v));
                        let n = ((duration * sample_rate).round() as u64).max(1);
                        let cylinder = self.cfg.firing_order[slot];
                        self.remaining[cylinder as usize - 1] = n;
                        events.push(InjectionEvent {
                            cylinder,
                            start_angle: self.cfg.slot_angle(slot),
                            duration,
                            source: PulseSource::Emitted,
                            t_start: Some(t),
                        });
                        *fire_at += 720.0;
                    }
                }
            }
        }
        std::array::from_fn(|c| {
            if self.remaining[c] > 0 {
                self.remaining[c] -= 1;
                self.cfg.pulse_amplitude
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedKind {
    /// No falling edge within a full cycle of the rising edge.
    NoFallingEdge,
    /// A second rising edge less than a revolution after the previous one.
    Glitch,
    /// Still high when the stream ended.
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MalformedPulse {
    pub cylinder: u8,
    pub kind: MalformedKind,
    pub t_s: f64,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CaptureReport {
    pub events: Vec<InjectionEvent>,
    pub malformed: Vec<MalformedPulse>,
}

#[derive(Debug, Clone, Copy)]
struct OpenPulse {
    start_sample: u64,
    t_start: f64,
    angle: f64,
    travel_at_start: f64,
    glitched: bool,
}

#[derive(Debug, Clone, Default)]
struct Line {
    prev: f64,
    open: Option<OpenPulse>,
    last_rise_travel: Option<f64>,
    last_event: Option<usize>,
}

/// Edge-based pulse measurement on the injector lines.
#[derive(Debug, Clone)]
pub struct InjectionCapture {
    threshold: f64,
    lines: [Line; CYLINDERS],
    events: Vec<(InjectionEvent, bool)>,
    malformed: Vec<MalformedPulse>,
    travel: f64,
    prev_angle: Option<f64>,
}

impl InjectionCapture {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            lines: Default::default(),
            events: Vec::new(),
            malformed: Vec::new(),
            travel: 0.0,
            prev_angle: None,
        }
    }

    /// Consumes one block of line samples. `angles` is the true crank angle
    /// of each sample; sample `j` is global sample `first_sample + j`.
    pub fn feed(&mut self, first_sample: u64, sample_rate: f64, angles: &[f64], lines: &[Vec<f64>]) {
        for (j, &angle) in angles.iter().enumerate() {
            if let Some(prev) = self.prev_angle {
                self.travel += CrankAngle::new(prev).forward_to(CrankAngle::new(angle));
            }
            self.prev_angle = Some(angle);
            let sample = first_sample + j as u64;
            let t = (sample + 1) as f64 / sample_rate;
            for (c, line) in lines.iter().enumerate().take(CYLINDERS) {
                self.line_sample(c, sample, t, angle, line[j], sample_rate);
            }
        }
    }

    fn line_sample(&mut self, c: usize, sample: u64, t: f64, angle: f64, v: f64, rate: f64) {
        let cylinder = c as u8 + 1;
        let th = self.threshold;
        let travel = self.travel;
        let state = &mut self.lines[c];
        let prev = std::mem::replace(&mut state.prev, v);

        if let Some(open) = state.open {
            if travel - open.travel_at_start > 720.0 {
                state.open = None;
                self.malformed.push(MalformedPulse {
                    cylinder,
                    kind: MalformedKind::NoFallingEdge,
                    t_s: open.t_start,
                    angle_deg: open.angle,
                });
            }
        }

        if prev < th && v >= th {
            let mut glitched = false;
            if let Some(last) = state.last_rise_travel {
                if travel - last < 360.0 {
                    glitched = true;
                    if let Some(i) = state.last_event.take() {
                        self.events[i].1 = false;
                    }
                    self.malformed.push(MalformedPulse {
                        cylinder,
                        kind: MalformedKind::Glitch,
                        t_s: t,
                        angle_deg: angle,
                    });
                }
            }
            state.last_rise_travel = Some(travel);
            state.open = Some(OpenPulse {
                start_sample: sample,
                t_start: t,
                angle,
                travel_at_start: travel,
                glitched,
            });
        } else if prev >= th && v < th {
            if let Some(open) = state.open.take() {
                if !open.glitched {
                    state.last_event = Some(self.events.len());
                    self.events.push((
                        InjectionEvent {
                            cylinder,
                            start_angle: open.angle,
                            duration: (sample - open.start_sample) as f64 / rate,
                            source: PulseSource::Captured,
                            t_start: Some(open.t_start),
                        },
                        true,
                    ));
                }
            }
        }
    }

    /// Events captured so far (pulses still open are not included).
    pub fn events(&self) -> Vec<InjectionEvent> {
        self.events.iter().filter(|(_, alive)| *alive).map(|(e, _)| *e).collect()
    }

    pub fn malformed(&self) -> &[MalformedPulse] {
        &self.malformed
    }

    /// Closes the capture; pulses still high are reported as truncated.
    pub fn finish(mut self) -> CaptureReport {
        for (c, line) in self.lines.iter().enumerate() {
            if let Some(open) = line.open {
                self.malformed.push(MalformedPulse {
                    cylinder: c as u8 + 1,
                    kind: MalformedKind::Truncated,
                    t_s: open.t_start,
                    angle_deg: open.angle,
                });
            }
        }
        CaptureReport {
            events: self.events(),
            malformed: self.malformed,
        }
    }
}
