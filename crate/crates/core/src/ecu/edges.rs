//! Hysteresis comparator for bipolar sensor pulses.

/// Result of feeding one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transition {
    None,
    /// Went high. `zero_time` is the interpolated time of the last zero
    /// up-crossing before the threshold was reached.
    Rising { zero_time: f64 },
    Falling,
}

/// Two-threshold comparator: goes high above `+band`, low below `-band`.
/// Starts low (armed) so the very first pulse is seen.
#[derive(Debug, Clone)]
pub struct Hysteresis {
    band: f64,
    high: bool,
    prev: Option<(f64, f64)>,
    last_zero_up: Option<f64>,
    last_up: Option<UpCrossing>,
}

/// The two samples around the latest zero up-crossing.
#[derive(Debug, Clone, Copy, PartialEq)]
struct UpCrossing {
    before: (f64, f64),
    after: (f64, f64),
}

impl Hysteresis {
    pub fn new(band: f64) -> Self {
        Self {
            band,
            high: false,
            prev: None,
            last_zero_up: None,
            last_up: None,
        }
    }

    pub fn is_high(&self) -> bool {
        self.high
    }

    pub fn reset(&mut self) {
        self.high = false;
        self.prev = None;
        self.last_zero_up = None;
        self.last_up = None;
    }

    /// Zero time of the latest up-crossing for a sine pulse of `amplitude`
    /// and `period`. When the sample before the crossing sat inside the band
    /// (a flat baseline, say) linear interpolation says nothing about where
    /// the pulse left zero, so the first positive sample is walked back
    /// along the sine instead. Falls back to `linear` otherwise.
    pub fn shaped_zero_time(&self, linear: f64, amplitude: f64, period: f64) -> f64 {
        let Some(UpCrossing { before, after }) = self.last_up else {
            return linear;
        };
        if before.1.abs() > self.band || !(amplitude > 0.0 && period > 0.0) {
            return linear;
        }
        let phase = (after.1 / amplitude).clamp(0.0, 1.0).asin() / std::f64::consts::TAU;
        (after.0 - phase * period).clamp(before.0, after.0)
    }

    pub fn feed(&mut self, t: f64, v: f64) -> Transition {
        if let Some((tp, vp)) = self.prev {
            if vp <= 0.0 && v > 0.0 {
                let frac = if v == vp { 0.0 } else { -vp / (v - vp) };
                self.last_zero_up = Some(tp + frac * (t - tp));
                self.last_up = Some(UpCrossing {
                    before: (tp, vp),
                    after: (t, v),
                });
            }
        } else if v > 0.0 {
            self.last_zero_up = Some(t);
        }
        self.prev = Some((t, v));

        if !self.high && v > self.band {
            self.high = true;
            Transition::Rising {
                zero_time: self.last_zero_up.unwrap_or(t),
            }
        } else if self.high && v < -self.band {
            self.high = false;
            Transition::Falling
        } else {
            Transition::None
        }
    }
}
