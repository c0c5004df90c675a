//! Min/max display decimation. Each bucket keeps the extremes of the samples
//! it covers, so a single missing or distorted tooth stays visible at any
//! zoom.

use serde::Serialize;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MinMaxTrace {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl MinMaxTrace {
    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }
}

/// Index range of bucket `i` out of `buckets` over `n` samples.
pub fn bucket_range(i: usize, buckets: usize, n: usize) -> std::ops::Range<usize> {
    (i * n / buckets)..((i + 1) * n / buckets)
}

/// Splits `samples` into at most `buckets` contiguous, near-equal buckets
/// and keeps each one's minimum and maximum.
pub fn decimate(samples: &[f64], buckets: usize) -> MinMaxTrace {
    let n = samples.len();
    let b = buckets.min(n);
    let mut out = MinMaxTrace {
        min: Vec::with_capacity(b),
        max: Vec::with_capacity(b),
    };
    for i in 0..b {
        let chunk = &samples[bucket_range(i, b, n)];
        let lo = chunk.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.min.push(lo as f32);
        out.max.push(hi as f32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn short_input_keeps_every_sample() {
        let t = decimate(&[1.0, -2.0, 3.0], 10);
        assert_eq!(t.min, vec![1.0, -2.0, 3.0]);
        assert_eq!(t.max, t.min);
    }

    #[test]
    fn empty_input_gives_empty_trace() {
        assert!(decimate(&[], 8).is_empty());
    }

    #[test]
    fn lone_spike_survives() {
        let mut s = vec![0.0; 10_000];
        s[4321] = 0.9;
        let t = decimate(&s, 50);
        assert_eq!(t.max.iter().filter(|&&v| v == 0.9f32).count(), 1);
    }

    proptest! {
        #[test]
        fn buckets_hold_true_extremes(samples in prop::collection::vec(-5.0f64..5.0, 1..3000), buckets in 1usize..400) {
            let t = decimate(&samples, buckets);
            let b = buckets.min(samples.len());
            prop_assert_eq!(t.len(), b);
            let mut covered = 0;
            for i in 0..b {
                let r = bucket_range(i, b, samples.len());
                prop_assert!(!r.is_empty());
                prop_assert_eq!(r.start, covered);
                covered = r.end;
                let chunk = &samples[r];
                let lo = chunk.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(t.min[i], lo as f32);
                prop_assert_eq!(t.max[i], hi as f32);
            }
            prop_assert_eq!(covered, samples.len());
        }
    }
}
