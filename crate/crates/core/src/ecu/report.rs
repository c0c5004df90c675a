//! Closed-loop bench and the diagnostics report it produces.

use serde::Serialize;

use super::injection::{InjectionCapture, InjectionDriver, InjectionEvent, InjectionFrame, MalformedPulse, CYLINDERS};
use super::{Decoder, EcuConfig, EcuDiagnostics, EcuError, FaultRecord, RpmEstimate, SyncEvent};
use crate::runtime::FrameBatch;
use crate::sensor::SensorId;
use crate::signal::CrankAngle;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RpmSummary {
    /// Time of the first valid estimate.
    pub first_valid_t_s: Option<f64>,
    pub final_rpm: Option<f64>,
    /// Statistics over valid estimates in the second half of the run.
    pub steady_mean: Option<f64>,
    pub steady_min: Option<f64>,
    pub steady_max: Option<f64>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CylinderStats {
    pub cylinder: u8,
    pub emitted: usize,
    pub captured: usize,
    pub matched: usize,
    pub mean_duration_s: Option<f64>,
    pub max_duration_error_s: Option<f64>,
    pub max_angle_error_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub sample_rate: f64,
    pub samples: u64,
    pub duration_s: f64,
    #[serde(rename = "final")]
    pub final_state: EcuDiagnostics,
    pub rpm: RpmSummary,
    pub sync_timeline: Vec<SyncEvent>,
    pub fault_log: Vec<FaultRecord>,
    pub injection: Vec<CylinderStats>,
    pub malformed_pulses: Vec<MalformedPulse>,
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Decoder, injection driver and capture wired into one frame consumer.
#[derive(Debug, Clone)]
pub struct Bench {
    decoder: Decoder,
    driver: InjectionDriver,
    capture: InjectionCapture,
    emitted: Vec<InjectionEvent>,
    rpm_trace: Vec<(f64, RpmEstimate)>,
    sample_rate: f64,
    samples: u64,
    first_t: Option<f64>,
    last_t: f64,
}

impl Bench {
    pub fn new(cfg: EcuConfig) -> Result<Self, EcuError> {
        let threshold = cfg.injection.capture_threshold_frac * cfg.injection.pulse_amplitude;
        let driver = InjectionDriver::new(cfg.injection.clone())?;
        Ok(Self {
            decoder: Decoder::new(cfg)?,
            driver,
            capture: InjectionCapture::new(threshold),
            emitted: Vec::new(),
            rpm_trace: Vec::new(),
            sample_rate: 0.0,
            samples: 0,
            first_t: None,
            last_t: 0.0,
        })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Decoder {
        &mut self.decoder
    }

    pub fn diagnostics(&self) -> EcuDiagnostics {
        self.decoder.diagnostics()
    }

    pub fn emitted(&self) -> &[InjectionEvent] {
        &self.emitted
    }

    pub fn captured(&self) -> Vec<InjectionEvent> {
        self.capture.events()
    }

    /// Valid-or-not rpm estimate at the end of every frame fed so far.
    pub fn rpm_trace(&self) -> &[(f64, RpmEstimate)] {
        &self.rpm_trace
    }

    pub fn feed(&mut self, frame: &FrameBatch) -> Result<InjectionFrame, EcuError> {
        self.decoder.check_seq(frame.seq)?;
        let rate = frame.sample_rate;
        self.sample_rate = rate;
        let n = frame.len();
        let mut lines: [Vec<f64>; CYLINDERS] = std::array::from_fn(|_| Vec::with_capacity(n));
        let mut events = Vec::new();
        let throttle = &frame.sensors[SensorId::ThrottlePosition.index()];
        #[allow(clippy::needless_range_loop)] // j indexes several parallel channels
        for j in 0..n {
            let t = frame.time_of(j);
            self.decoder.process(t, frame.crank[j], frame.cam[j]);
            let (angle, step) = if self.decoder.is_phase_locked() {
                let step = self.decoder.degrees_per_second().unwrap_or(0.0) / rate;
                (self.decoder.cycle_angle_at(t), step)
            } else {
                (None, 0.0)
            };
            let levels = self.driver.sample(t, rate, angle, step, throttle[j], &mut events);
            for (line, v) in lines.iter_mut().zip(levels) {
                line.push(v);
            }
        }
        self.capture.feed(frame.first_sample, rate, &frame.angle_deg, &lines);
        self.emitted.extend_from_slice(&events);
        self.samples += n as u64;
        if n > 0 {
            self.first_t.get_or_insert(frame.time_of(0));
            self.last_t = frame.time_of(n - 1);
            self.rpm_trace.push((self.last_t, self.decoder.rpm_estimate()));
        }
        Ok(InjectionFrame {
            seq: frame.seq,
            first_sample: frame.first_sample,
            sample_rate: rate,
            lines,
            events,
        })
    }

    pub fn report(&self) -> DiagnosticsReport {
        let capture = self.capture.clone().finish();
        let t0 = self.first_t.unwrap_or(0.0);
        let half = t0 + 0.5 * (self.last_t - t0);
        let valid: Vec<(f64, f64)> = self
            .rpm_trace
            .iter()
            .filter(|(_, e)| e.valid)
            .map(|(t, e)| (*t, e.rpm))
            .collect();
        let steady: Vec<f64> = valid.iter().filter(|(t, _)| *t >= half).map(|(_, r)| *r).collect();
        let rpm = RpmSummary {
            first_valid_t_s: valid.first().map(|(t, _)| *t),
            final_rpm: valid.last().map(|(_, r)| *r),
            steady_mean: (!steady.is_empty()).then(|| steady.iter().sum::<f64>() / steady.len() as f64),
            steady_min: steady.iter().copied().reduce(f64::min),
            steady_max: steady.iter().copied().reduce(f64::max),
            points: valid.len(),
        };
        let injection = (1..=CYLINDERS as u8)
            .map(|c| cylinder_stats(c, &self.emitted, &capture.events, self.sample_rate))
            .collect();
        DiagnosticsReport {
            sample_rate: self.sample_rate,
            samples: self.samples,
            duration_s: if self.sample_rate > 0.0 {
                self.samples as f64 / self.sample_rate
            } else {
                0.0
            },
            final_state: self.decoder.diagnostics(),
            rpm,
            sync_timeline: self.decoder.sync_timeline().to_vec(),
            fault_log: self.decoder.fault_log().to_vec(),
            injection,
            malformed_pulses: capture.malformed,
        }
    }
}

/// Angle error between two cycle angles, wrapped to [-360, 360).
pub(crate) fn angle_error(a: f64, b: f64) -> f64 {
    (CrankAngle::new(a).forward_to(CrankAngle::new(b)) + 360.0).rem_euclid(720.0) - 360.0
}

/// Pairs each captured pulse with the emitted pulse that started on the
/// same sample.
pub(crate) fn match_events<'a>(
    emitted: &'a [InjectionEvent],
    captured: &'a [InjectionEvent],
    sample_rate: f64,
) -> Vec<(&'a InjectionEvent, &'a InjectionEvent)> {
    let tol = 0.5 / sample_rate;
    captured
        .iter()
        .filter_map(|c| {
            let tc = c.t_start?;
            emitted
                .iter()
                .find(|e| e.cylinder == c.cylinder && e.t_start.is_some_and(|te| (te - tc).abs() <= tol))
                .map(|e| (e, c))
        })
        .collect()
}

fn cylinder_stats(
    cylinder: u8,
    emitted: &[InjectionEvent],
    captured: &[InjectionEvent],
    sample_rate: f64,
) -> CylinderStats {
    let em: Vec<InjectionEvent> = emitted.iter().filter(|e| e.cylinder == cylinder).copied().collect();
    let cap: Vec<InjectionEvent> = captured.iter().filter(|e| e.cylinder == cylinder).copied().collect();
    let pairs = match_events(&em, &cap, sample_rate);
    let max_of = |it: &mut dyn Iterator<Item = f64>| it.reduce(f64::max);
    CylinderStats {
        cylinder,
        emitted: em.len(),
        captured: cap.len(),
        matched: pairs.len(),
        mean_duration_s: (!cap.is_empty()).then(|| cap.iter().map(|e| e.duration).sum::<f64>() / cap.len() as f64),
        max_duration_error_s: max_of(&mut pairs.iter().map(|(e, c)| (e.duration - c.duration).abs())),
        max_angle_error_deg: max_of(&mut pairs.iter().map(|(e, c)| angle_error(e.start_angle, c.start_angle).abs())),
    }
}
