//! Crank/cam decoder.
//!
//! Crank edges are placed on an absolute tooth-position scale. Each new
//! edge is measured in units of the rolling-median tooth period since the
//! previous accepted edge; it is accepted only if it lands close to a whole
//! number of teeth, so a missing tooth advances the position by two and
//! noise-triggered edges between teeth are ignored. A three-unit interval
//! longer than `gap_ratio` periods is the index gap. The cam index edge then
//! fixes which crank revolution starts the cycle.

use std::collections::{BTreeSet, VecDeque};

use super::edges::{Hysteresis, Transition};
use super::{
    EcuConfig, EcuDiagnostics, EcuError, FaultCode, FaultRecord, RpmEstimate, SyncEvent, SyncStatus,
};
use crate::runtime::FrameBatch;

/// Edges accepted unconditionally before the median is trusted.
const BOOTSTRAP_PERIODS: usize = 3;

#[derive(Debug, Clone, Copy)]
struct Anchor {
    t: f64,
    pos: i64,
}

#[derive(Debug, Clone, Copy)]
struct Window {
    slot: i64,
    peak: f64,
    transitions: u32,
    full: bool,
}

impl Window {
    fn new(slot: i64, full: bool) -> Self {
        Self {
            slot,
            peak: 0.0,
            transitions: 0,
            full,
        }
    }

    fn add(&mut self, v: f64, transition: Transition) {
        self.peak = self.peak.max(v.abs());
        if transition != Transition::None {
            self.transitions += 1;
        }
    }

    fn passes(&self, floor: f64) -> bool {
        self.peak >= floor && self.transitions == 2
    }
}

#[derive(Debug, Clone, Copy)]
struct CamWindow {
    tooth: usize,
    cycle: i64,
    acc: Window,
}

/// Cycle phase once the cam index has been seen.
#[derive(Debug, Clone, Copy)]
struct Phase {
    /// Tooth position where the cycle's 0° lies.
    origin: i64,
    cycle: i64,
    index_seen: bool,
    checked: bool,
    faulted: bool,
    /// Verdict of this cycle's index window, held until the sync check.
    pending_index: Option<(bool, u32)>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: EcuConfig,
    crank_h: Hysteresis,
    cam_h: Hysteresis,

    anchor: Option<Anchor>,
    periods: VecDeque<f64>,
    ref_period: Option<f64>,
    history: VecDeque<(i64, f64)>,
    /// Position of the most recent tooth-1 edge (end of the gap).
    gap: Option<i64>,
    /// Position of the first gap since tracking began.
    first_gap: Option<i64>,
    phase: Option<Phase>,
    ever_synced: bool,
    rpm: Option<f64>,

    crank_window: Option<Window>,
    cam_window: Option<CamWindow>,
    had_phase_last_sample: bool,

    sync: SyncStatus,
    timeline: Vec<SyncEvent>,
    codes: BTreeSet<FaultCode>,
    log: Vec<FaultRecord>,

    start_t: Option<f64>,
    now: f64,
    last_crank_edge: Option<f64>,
    last_cam_edge: Option<f64>,
    crank_missing: bool,
    cam_missing: bool,
    expected_seq: Option<u64>,
    gaps_seen: u64,
}

impl Decoder {
    pub fn new(cfg: EcuConfig) -> Result<Self, EcuError> {
        cfg.validate()?;
        let crank_band = cfg.hysteresis_frac * cfg.crank_amplitude;
        let cam_band = cfg.hysteresis_frac * cfg.cam_amplitude;
        Ok(Self {
            cfg,
            crank_h: Hysteresis::new(crank_band),
            cam_h: Hysteresis::new(cam_band),
            anchor: None,
            periods: VecDeque::new(),
            ref_period: None,
            history: VecDeque::new(),
            gap: None,
            first_gap: None,
            phase: None,
            ever_synced: false,
            rpm: None,
            crank_window: None,
            cam_window: None,
            had_phase_last_sample: false,
            sync: SyncStatus::Acquiring,
            timeline: Vec::new(),
            codes: BTreeSet::new(),
            log: Vec::new(),
            start_t: None,
            now: 0.0,
            last_crank_edge: None,
            last_cam_edge: None,
            crank_missing: false,
            cam_missing: false,
            expected_seq: None,
            gaps_seen: 0,
        })
    }

    pub fn config(&self) -> &EcuConfig {
        &self.cfg
    }

    /// Feeds a whole frame. Frames must arrive in sequence order.
    pub fn feed(&mut self, frame: &FrameBatch) -> Result<(), EcuError> {
        self.check_seq(frame.seq)?;
        for j in 0..frame.len() {
            self.process(frame.time_of(j), frame.crank[j], frame.cam[j]);
        }
        Ok(())
    }

    pub(crate) fn check_seq(&mut self, seq: u64) -> Result<(), EcuError> {
        if let Some(expected) = self.expected_seq {
            if seq != expected {
                return Err(EcuError::OutOfOrder {
                    expected,
                    found: seq,
                });
            }
        }
        self.expected_seq = Some(seq + 1);
        Ok(())
    }

    pub fn diagnostics(&self) -> EcuDiagnostics {
        EcuDiagnostics {
            rpm_estimate: self.rpm_estimate(),
            sync: self.sync,
            fault_codes: self.codes.iter().copied().collect(),
            crank_angle_estimate: self.cycle_angle_at(self.now).map(|a| a.rem_euclid(720.0)),
        }
    }

    pub fn rpm_estimate(&self) -> RpmEstimate {
        match self.rpm {
            Some(rpm) if self.ever_synced && self.gap.is_some() => RpmEstimate { rpm, valid: true },
            Some(rpm) => RpmEstimate { rpm, valid: false },
            None => RpmEstimate::default(),
        }
    }

    pub fn sync_status(&self) -> SyncStatus {
        self.sync
    }

    pub fn fault_codes(&self) -> &BTreeSet<FaultCode> {
        &self.codes
    }

    pub fn fault_log(&self) -> &[FaultRecord] {
        &self.log
    }

    pub fn sync_timeline(&self) -> &[SyncEvent] {
        &self.timeline
    }

    /// Index gaps detected so far.
    pub fn gaps_seen(&self) -> u64 {
        self.gaps_seen
    }

    /// Unlatches every code. Conditions still present are raised again.
    pub fn clear_fault_codes(&mut self) {
        self.codes.clear();
    }

    fn median_period(&self) -> Option<f64> {
        self.ref_period
    }

    fn compute_median(&self) -> Option<f64> {
        if self.periods.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = self.periods.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }

    /// Extrapolated tooth position at time `t`.
    fn position_at(&self, t: f64) -> Option<f64> {
        let a = self.anchor?;
        let r = self.median_period()?;
        Some(a.pos as f64 + (t - a.t) / r)
    }

    /// Unwrapped cycle angle at `t`; only defined once the phase is known.
    pub fn cycle_angle_at(&self, t: f64) -> Option<f64> {
        let phase = self.phase?;
        let u = self.position_at(t)?;
        Some((u - phase.origin as f64) * self.cfg.tooth_width())
    }

    /// Decoded crank speed in degrees per second.
    pub fn degrees_per_second(&self) -> Option<f64> {
        self.median_period().map(|r| self.cfg.tooth_width() / r)
    }

    pub(crate) fn is_phase_locked(&self) -> bool {
        self.phase.is_some() && self.sync != SyncStatus::Acquiring
    }

    fn set_sync(&mut self, status: SyncStatus) {
        if self.sync != status {
            self.sync = status;
            self.timeline.push(SyncEvent {
                t_s: self.now,
                status,
            });
        }
    }

    fn raise(&mut self, code: FaultCode, tooth: Option<u32>) {
        if self.codes.insert(code) {
            let cycle_angle_deg = self.cycle_angle_at(self.now).map(|a| a.rem_euclid(720.0));
            self.log.push(FaultRecord {
                code,
                t_s: self.now,
                cycle_angle_deg,
                tooth,
            });
        }
    }

    fn lose_track(&mut self) {
        self.anchor = None;
        self.periods.clear();
        self.ref_period = None;
        self.history.clear();
        self.gap = None;
        self.first_gap = None;
        self.phase = None;
        self.ever_synced = false;
        self.rpm = None;
        self.crank_window = None;
        self.cam_window = None;
        self.set_sync(SyncStatus::Acquiring);
    }

    /// Processes one sample taken at time `t`.
    pub fn process(&mut self, t: f64, crank: f64, cam: f64) {
        self.now = t;
        let start = *self.start_t.get_or_insert(t);

        let crank_tr = self.crank_h.feed(t, crank);
        if let Transition::Rising { zero_time } = crank_tr {
            self.last_crank_edge = Some(t);
            self.crank_missing = false;
            let zero_time = match self.median_period() {
                Some(r) => self.crank_h.shaped_zero_time(zero_time, self.cfg.crank_amplitude, r),
                None => zero_time,
            };
            self.on_crank_edge(zero_time);
        }
        let cam_tr = self.cam_h.feed(t, cam);
        if let Transition::Rising { zero_time } = cam_tr {
            self.last_cam_edge = Some(t);
            self.cam_missing = false;
            self.on_cam_edge(zero_time);
        }

        self.check_signals(t, start);
        self.crank_window_step(t, crank, crank_tr);
        self.phase_step(t, cam, cam_tr);
    }

    fn check_signals(&mut self, t: f64, start: f64) {
        let timeout = self.cfg.signal_timeout_s;
        if !self.crank_missing && t - self.last_crank_edge.unwrap_or(start) > timeout {
            self.crank_missing = true;
            self.raise(FaultCode::CrankSignalMissing, None);
            self.lose_track();
        }
        let cycle_s = self.rpm.map_or(0.0, |rpm| 120.0 / rpm);
        let cam_timeout = timeout.max(cycle_s);
        if !self.cam_missing && t - self.last_cam_edge.unwrap_or(start) > cam_timeout {
            self.cam_missing = true;
            self.raise(FaultCode::CamSignalMissing, None);
        }
    }

    fn on_crank_edge(&mut self, zt: f64) {
        let Some(a) = self.anchor else {
            self.anchor = Some(Anchor { t: zt, pos: 0 });
            return;
        };
        let dt = zt - a.t;
        if dt <= 0.0 {
            return;
        }
        if self.periods.len() < BOOTSTRAP_PERIODS {
            self.push_period(dt);
            self.accept(zt, a.pos + 1);
            return;
        }
        let r = self.median_period().expect("bootstrapped");
        let x = dt / r;
        let k = x.round();
        if k < 1.0 || (x - k).abs() >= self.cfg.edge_tolerance {
            // nothing lines up for far longer than a gap: speed changed
            // under us, start over from this edge
            if x > (self.cfg.gap_teeth + 3) as f64 {
                self.lose_track();
                self.anchor = Some(Anchor { t: zt, pos: 0 });
            }
            return;
        }
        let k = k as i64;
        let pos = a.pos + k;
        if k == 1 {
            self.push_period(dt);
        }
        let is_gap = x > self.cfg.gap_ratio && k == self.cfg.gap_teeth as i64 + 1;
        self.accept(zt, pos);

        let teeth = self.cfg.teeth_per_rev as i64;
        if is_gap {
            self.gaps_seen += 1;
            match self.gap {
                Some(g) if pos - g != teeth => {
                    self.lose_track();
                    self.anchor = Some(Anchor { t: zt, pos: 0 });
                }
                _ => {
                    if self.gap.is_none() {
                        self.crank_window = None;
                        self.first_gap = Some(pos);
                    }
                    self.gap = Some(pos);
                }
            }
        } else if let Some(g) = self.gap {
            if pos > g + teeth {
                self.lose_track();
                self.anchor = Some(Anchor { t: zt, pos: 0 });
            }
        }
    }

    fn push_period(&mut self, dt: f64) {
        self.periods.push_back(dt);
        while self.periods.len() > self.cfg.median_window {
            self.periods.pop_front();
        }
        self.ref_period = self.compute_median();
    }

    fn accept(&mut self, zt: f64, pos: i64) {
        self.anchor = Some(Anchor { t: zt, pos });
        let teeth = self.cfg.teeth_per_rev as i64;
        self.history.push_back((pos, zt));
        while self.history.front().is_some_and(|&(p, _)| p < pos - 2 * teeth) {
            self.history.pop_front();
        }
        let i = self.history.partition_point(|&(p, _)| p < pos - teeth);
        let (p0, t0) = self.history[i];
        if pos - p0 >= teeth / 2 && zt > t0 {
            self.rpm = Some(60.0 * (pos - p0) as f64 / (teeth as f64 * (zt - t0)));
        }
    }

    fn on_cam_edge(&mut self, zt: f64) {
        let (Some(gap), Some(u)) = (self.gap, self.position_at(zt)) else {
            return;
        };
        let w = self.cfg.tooth_width();
        let teeth = self.cfg.teeth_per_rev as i64;
        let index = self.cfg.cam_index();
        let win = self.cfg.sync_window_deg;

        let Some(phase) = self.phase else {
            let rev = ((u - gap as f64) / teeth as f64).floor();
            let rev_angle = (u - gap as f64 - rev * teeth as f64) * w;
            if (rev_angle - index.start_deg).abs() <= win {
                let origin = gap + rev as i64 * teeth;
                let cycle = ((u - origin as f64) * w / 720.0).floor() as i64;
                self.phase = Some(Phase {
                    origin,
                    cycle,
                    index_seen: true,
                    checked: false,
                    faulted: false,
                    pending_index: None,
                });
                self.cam_window = None;
                self.ever_synced = true;
                self.set_sync(SyncStatus::Synchronized);
            }
            return;
        };

        let angle = (u - phase.origin as f64) * w;
        let cycle = (angle / 720.0).floor() as i64;
        self.roll_cycle(cycle);
        let theta = angle - cycle as f64 * 720.0;
        if (theta - index.start_deg).abs() <= win {
            if let Some(p) = self.phase.as_mut() {
                p.index_seen = true;
            }
        } else if (theta - 360.0 - index.start_deg).abs() <= win {
            // an index-like edge one revolution off: the cam is out of phase
            self.sync_fault();
        }
    }

    fn sync_fault(&mut self) {
        if let Some(p) = self.phase.as_mut() {
            p.faulted = true;
            p.pending_index = None;
        }
        self.raise(FaultCode::CrankCamSyncFault, None);
        self.set_sync(SyncStatus::SyncFault);
    }

    fn roll_cycle(&mut self, cycle: i64) {
        if let Some(p) = self.phase.as_mut() {
            if cycle > p.cycle {
                *p = Phase {
                    origin: p.origin,
                    cycle,
                    index_seen: false,
                    checked: false,
                    faulted: false,
                    pending_index: None,
                };
            }
        }
    }

    fn crank_window_step(&mut self, t: f64, v: f64, tr: Transition) {
        let (Some(gap), Some(u)) = (self.gap, self.position_at(t)) else {
            return;
        };
        // window [slot - 0.12, slot + 0.88): the comparator reports a
        // transition up to one sample after its zero crossing, which at four
        // samples per tooth is a quarter tooth
        let mut slot = (u + 0.12).floor() as i64;
        match self.crank_window {
            None => self.crank_window = Some(Window::new(slot, false)),
            Some(cur) => {
                // extrapolation may step back a hair when an edge lands
                slot = slot.max(cur.slot);
                if slot != cur.slot {
                    self.finish_crank_window(cur, gap);
                    self.crank_window = Some(Window::new(slot, slot == cur.slot + 1));
                }
            }
        }
        if let Some(w) = self.crank_window.as_mut() {
            w.add(v, tr);
        }
    }

    fn finish_crank_window(&mut self, w: Window, gap: i64) {
        if !w.full {
            return;
        }
        let teeth = self.cfg.teeth_per_rev as i64;
        let rev_pos = (w.slot - gap).rem_euclid(teeth);
        if rev_pos >= teeth - self.cfg.gap_teeth as i64 {
            return;
        }
        let floor = self.cfg.peak_floor_frac * self.cfg.crank_amplitude;
        if !w.passes(floor) {
            self.raise(FaultCode::CrankToothFault, Some(rev_pos as u32 + 1));
        }
    }

    fn phase_step(&mut self, t: f64, v: f64, tr: Transition) {
        let Some(angle) = self.cycle_angle_at(t) else {
            self.had_phase_last_sample = false;
            self.index_watchdog(t);
            return;
        };
        let cycle = (angle / 720.0).floor() as i64;
        self.roll_cycle(cycle);
        let theta = angle - cycle as f64 * 720.0;
        let index = self.cfg.cam_index();
        let check_at = index.start_deg + self.cfg.sync_window_deg;

        let phase = self.phase.expect("phase known");
        if !phase.checked && theta >= check_at && theta < 360.0 {
            if let Some(p) = self.phase.as_mut() {
                p.checked = true;
            }
            if phase.index_seen && !phase.faulted {
                if self.sync == SyncStatus::SyncFault {
                    self.set_sync(SyncStatus::Synchronized);
                }
                if let Some((false, tooth)) = phase.pending_index {
                    self.raise(FaultCode::CamToothFault, Some(tooth));
                }
            } else if !phase.faulted {
                self.sync_fault();
            }
        }

        // cam tooth windows [start - w/4, start + 3w/4)
        let here = self.cfg.cam_teeth.iter().position(|c| {
            let lo = c.start_deg - 0.25 * c.width_deg;
            (theta - lo).rem_euclid(720.0) < c.width_deg
        });
        let continuing = self
            .cam_window
            .is_some_and(|cw| Some(cw.tooth) == here && cw.cycle == cycle);
        if !continuing {
            if let Some(cw) = self.cam_window.take() {
                self.finish_cam_window(cw);
            }
            if let Some(tooth) = here {
                self.cam_window = Some(CamWindow {
                    tooth,
                    cycle,
                    acc: Window::new(0, self.had_phase_last_sample),
                });
            }
        }
        if let Some(cw) = self.cam_window.as_mut() {
            cw.acc.add(v, tr);
        }
        self.had_phase_last_sample = true;
    }

    /// Crank is tracked but no cam edge has landed in the index window for
    /// two full revolutions past the point where it should have.
    fn index_watchdog(&mut self, t: f64) {
        if self.sync == SyncStatus::SyncFault {
            return;
        }
        let (Some(first), Some(u)) = (self.first_gap, self.position_at(t)) else {
            return;
        };
        let index = self.cfg.cam_index();
        let limit = 2 * self.cfg.teeth_per_rev as i64;
        let past = (index.start_deg + self.cfg.sync_window_deg) / self.cfg.tooth_width();
        if u - first as f64 > limit as f64 + past {
            self.raise(FaultCode::CrankCamSyncFault, None);
            self.set_sync(SyncStatus::SyncFault);
        }
    }

    fn finish_cam_window(&mut self, cw: CamWindow) {
        if !cw.acc.full {
            return;
        }
        let Some(phase) = self.phase else {
            return;
        };
        let tooth = self.cfg.cam_teeth[cw.tooth];
        let ok = cw.acc.passes(self.cfg.peak_floor_frac * self.cfg.cam_amplitude);
        if cw.cycle != phase.cycle || phase.faulted {
            return;
        }
        if tooth.is_index && !phase.checked {
            if let Some(p) = self.phase.as_mut() {
                p.pending_index = Some((ok, tooth.number));
            }
        } else if !ok {
            self.raise(FaultCode::CamToothFault, Some(tooth.number));
        }
    }
}
