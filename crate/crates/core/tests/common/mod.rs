//! Shared helpers for the integration and acceptance targets.

#![allow(dead_code)]

use std::collections::HashSet;

use crankhil_core::ecu::{Bench, EcuConfig};
use crankhil_core::fault::{apply_fault, fault_support, Activation, AppliedAt, FaultKind, FaultSpec, FaultStage};
use crankhil_core::runtime::{FrameBatch, RunConfig, Simulator};
use crankhil_core::signal::{Channel, EngineGeometry, WaveformTable};
use proptest::prelude::*;

pub fn sim_at(rpm: f64, rate: f64) -> Simulator {
    sim_with(rpm, rate, 480)
}

pub fn sim_with(rpm: f64, rate: f64, frame_size: usize) -> Simulator {
    let config = RunConfig {
        sample_rate: rate,
        initial_rpm: rpm,
        frame_size,
        ..Default::default()
    };
    Simulator::new(config, EngineGeometry::default()).expect("valid config")
}

pub fn bench() -> Bench {
    Bench::new(EcuConfig::default()).expect("default ECU config")
}

/// Runs `seconds` of simulated time through the bench, calling `each` after
/// every frame.
pub fn drive<F: FnMut(&FrameBatch, &Bench)>(sim: &mut Simulator, bench: &mut Bench, seconds: f64, mut each: F) {
    let n = (seconds * sim.config().sample_rate).round() as usize;
    let frame = sim.config().frame_size;
    let mut done = 0;
    while done < n {
        let f = sim.step(frame.min(n - done)).expect("running");
        bench.feed(&f).expect("in order");
        each(&f, bench);
        done += f.len();
    }
}

pub fn run_for(sim: &mut Simulator, bench: &mut Bench, seconds: f64) {
    drive(sim, bench, seconds, |_, _| {});
}

pub fn live(id: &str, kind: FaultKind) -> FaultSpec {
    FaultSpec::new(id, kind, Activation::LiveCycleBoundary)
}

/// Time stamp of the first sample shaped by ledger entry `id`.
pub fn activation_time(sim: &Simulator, id: &str) -> f64 {
    let entry = sim
        .ledger()
        .active
        .iter()
        .find(|e| e.fault.id == id)
        .expect("fault active");
    (entry.applied_at.sample + 1) as f64 / sim.config().sample_rate
}

pub fn geometry() -> EngineGeometry {
    EngineGeometry::default()
}

pub fn clean(channel: Channel) -> WaveformTable {
    let tables = geometry().build_tables().unwrap();
    (**tables.get(channel)).clone()
}

pub fn at0() -> AppliedAt {
    AppliedAt { sample: 0, cycle: 0 }
}

fn channel_strategy() -> impl Strategy<Value = Channel> {
    prop_oneof![Just(Channel::Crank), Just(Channel::Cam)]
}

fn tooth_for(channel: Channel) -> impl Strategy<Value = u32> {
    let count = geometry().tooth_count(channel);
    1..=count
}

/// Any per-tooth fault that is valid on the default geometry.
pub fn tooth_fault(id: &'static str) -> impl Strategy<Value = FaultSpec> {
    channel_strategy()
        .prop_flat_map(|ch| (Just(ch), tooth_for(ch), 0usize..5, 0.2f64..1.0, any::<u64>()))
        .prop_map(move |(sensor, tooth, variant, x, seed)| {
            let kind = match variant {
                0 => FaultKind::MissingTooth { sensor, tooth },
                1 => FaultKind::AmplitudeScale {
                    sensor,
                    tooth,
                    factor: 4.0 * x,
                },
                2 => FaultKind::WidthScale {
                    sensor,
                    tooth,
                    factor: x,
                },
                3 => FaultKind::PartialNoise {
                    sensor,
                    tooth,
                    sigma_volts: 0.5 * x,
                    seed,
                },
                _ => FaultKind::FullNoiseReplace {
                    sensor,
                    tooth,
                    noise_amplitude: x,
                    seed,
                },
            };
            FaultSpec::new(id, kind, Activation::OnStart)
        })
}

/// Table indices a fault may touch.
pub fn support_indices(fault: &FaultSpec) -> HashSet<usize> {
    let g = geometry();
    let n = clean(fault.kind.channel()).len();
    fault_support(fault, &g)
        .unwrap()
        .expect("per-tooth fault")
        .iter()
        .flat_map(|w| w.indices(n).collect::<Vec<_>>())
        .collect()
}

pub fn apply(table: &WaveformTable, fault: &FaultSpec) -> WaveformTable {
    apply_fault(table, fault, &geometry()).expect("valid fault")
}

pub fn idempotent_missing_tooth(fault: &FaultSpec) -> Result<(), String> {
    let FaultKind::MissingTooth { sensor, .. } = fault.kind else {
        return Ok(());
    };
    let t = clean(sensor);
    let once = apply(&t, fault);
    let twice = apply(&once, fault);
    if once.samples() == twice.samples() {
        Ok(())
    } else {
        Err(format!("{fault:?} not idempotent"))
    }
}

pub fn disjoint_commute(a: &FaultSpec, b: &FaultSpec) -> Result<bool, String> {
    if a.kind.channel() != b.kind.channel() {
        return Ok(false);
    }
    if !support_indices(a).is_disjoint(&support_indices(b)) {
        return Ok(false);
    }
    let t = clean(a.kind.channel());
    let ab = apply(&apply(&t, a), b);
    let ba = apply(&apply(&t, b), a);
    if ab.samples() == ba.samples() {
        Ok(true)
    } else {
        Err(format!("{a:?} and {b:?} do not commute"))
    }
}

pub fn local(fault: &FaultSpec) -> Result<(), String> {
    let t = clean(fault.kind.channel());
    let out = apply(&t, fault);
    let support = support_indices(fault);
    for (i, (x, y)) in t.samples().iter().zip(out.samples()).enumerate() {
        if !support.contains(&i) && x.to_bits() != y.to_bits() {
            return Err(format!("{fault:?} touched index {i} outside its window"));
        }
    }
    Ok(())
}

pub fn clear_rebuilds(a: &FaultSpec, b: &FaultSpec) -> Result<(), String> {
    let mut a = a.clone();
    a.id = "a".into();
    let mut b = b.clone();
    b.id = "b".into();
    let g = geometry();

    let mut stage = FaultStage::new(g.clone()).unwrap();
    stage.apply(a.clone(), at0()).unwrap();
    stage.clear("a").unwrap();
    if stage.tables() != stage.clean_tables() {
        return Err(format!("apply+clear of {a:?} differs from clean"));
    }

    stage.apply(a, at0()).unwrap();
    stage.apply(b.clone(), at0()).unwrap();
    stage.clear("a").unwrap();
    let mut only_b = FaultStage::new(g).unwrap();
    only_b.apply(b, at0()).unwrap();
    if stage.tables() != only_b.tables() {
        return Err("clear(a) after a, b differs from b alone".into());
    }
    Ok(())
}
