mod common;

use crankhil_core::fault::{Activation, FaultKind, FaultSpec};
use crankhil_core::signal::Channel;
use proptest::prelude::*;

use common::*;

fn window_deltas(fault: &FaultSpec) -> (Vec<f64>, Vec<f64>) {
    let t = clean(fault.kind.channel());
    let out = apply(&t, fault);
    let mut idx: Vec<usize> = support_indices(fault).into_iter().collect();
    idx.sort();
    let orig = idx.iter().map(|&i| t.samples()[i]).collect();
    let new = idx.iter().map(|&i| out.samples()[i]).collect();
    (orig, new)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation, two-pass.
fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn partial_noise_std_matches_sigma() {
    for seed in [1, 2, 3] {
        let f = FaultSpec::new(
            "n",
            FaultKind::PartialNoise {
                sensor: Channel::Crank,
                tooth: 28,
                sigma_volts: 0.05,
                seed,
            },
            Activation::OnStart,
        );
        let (orig, new) = window_deltas(&f);
        let diff: Vec<f64> = orig.iter().zip(&new).map(|(a, b)| b - a).collect();
        assert_eq!(diff.len(), 120, "two 6° windows at 0.1°");
        let sd = std_dev(&diff);
        assert!((sd - 0.05).abs() <= 0.2 * 0.05, "seed {seed}: std {sd}");
    }
}

#[test]
fn full_noise_replace_is_bounded_and_uncorrelated() {
    let f = FaultSpec::new(
        "r",
        FaultKind::FullNoiseReplace {
            sensor: Channel::Cam,
            tooth: 2,
            noise_amplitude: 0.3,
            seed: 7,
        },
        Activation::OnStart,
    );
    let (orig, new) = window_deltas(&f);
    assert!(new.iter().all(|v| v.abs() <= 0.3));
    let r = correlation(&orig, &new);
    // 120 samples: independent noise gives |r| around 0.09
    assert!(r.abs() < 0.3, "correlation {r}");
}

#[test]
fn live_faults_on_disjoint_teeth_commute() {
    let a = FaultSpec::new(
        "a",
        FaultKind::MissingTooth {
            sensor: Channel::Crank,
            tooth: 5,
        },
        Activation::LiveImmediate,
    );
    let b = FaultSpec::new(
        "b",
        FaultKind::PartialNoise {
            sensor: Channel::Crank,
            tooth: 30,
            sigma_volts: 0.1,
            seed: 9,
        },
        Activation::LiveImmediate,
    );
    let run = |first: &FaultSpec, second: &FaultSpec| {
        let mut sim = sim_at(2000.0, 48_000.0);
        sim.start().unwrap();
        sim.step(100).unwrap();
        sim.inject_live(first.clone()).unwrap();
        sim.step(7).unwrap();
        sim.inject_live(second.clone()).unwrap();
        sim.step(1).unwrap();
        sim.tables().clone()
    };
    assert_eq!(run(&a, &b), run(&b, &a));
}

#[test]
fn clear_unknown_id_is_an_error() {
    let mut sim = sim_at(2000.0, 48_000.0);
    sim.start().unwrap();
    assert!(sim.clear_fault("nope").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn missing_tooth_is_idempotent(f in tooth_fault("f")) {
        idempotent_missing_tooth(&f).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn per_tooth_faults_are_local(f in tooth_fault("f")) {
        local(&f).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn disjoint_faults_commute(a in tooth_fault("a"), b in tooth_fault("b")) {
        disjoint_commute(&a, &b).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn clear_rebuilds_from_remaining_faults(a in tooth_fault("a"), b in tooth_fault("b")) {
        clear_rebuilds(&a, &b).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn apply_leaves_input_untouched(f in tooth_fault("f")) {
        let t = clean(f.kind.channel());
        let copy = t.clone();
        let _ = apply(&t, &f);
        prop_assert_eq!(t, copy);
    }

    #[test]
    fn seeded_faults_are_reproducible(f in tooth_fault("f")) {
        let t = clean(f.kind.channel());
        let a = apply(&t, &f);
        let b = apply(&t, &f);
        prop_assert!(a.samples().iter().zip(b.samples()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sync_offset_inverts(k in -7199i32..7200) {
        let d = f64::from(k) * 0.1;
        let shift = |off: f64| FaultSpec::new("s", FaultKind::SyncOffset { offset_deg_crank: off }, Activation::OnStart);
        let t = clean(Channel::Cam);
        let back = apply(&apply(&t, &shift(d)), &shift(-d));
        prop_assert_eq!(back, t);
    }

    #[test]
    fn global_noise_is_seeded(seed in any::<u64>(), sigma in 0.0f64..0.5) {
        let f = FaultSpec::new("g", FaultKind::GlobalNoise { sensor: Channel::Crank, sigma_volts: sigma, seed }, Activation::OnStart);
        let t = clean(Channel::Crank);
        prop_assert_eq!(apply(&t, &f), apply(&t, &f));
    }
}
