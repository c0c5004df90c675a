mod common;

use std::time::Duration;

use crankhil_service::protocol::{Response, TelemetryKind};
use crankhil_service::Service;
use serde_json::json;

use common::*;

fn ack_result(r: &Response) -> &serde_json::Value {
    match r {
        Response::Ack { result, .. } => result,
        Response::Error { error, .. } => panic!("expected ack, got {error:?}"),
    }
}

fn error_code(r: &Response) -> &'static str {
    match r {
        Response::Error { error, .. } => error.code,
        Response::Ack { .. } => panic!("expected error, got {r:?}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn set_rpm_while_running_acks_the_applied_value() {
    let svc = service();
    let mut s = svc.session();
    ack_result(&s.handle(&request("1", "start", json!({}))).await);
    let r = s.handle(&request("2", "set_rpm", json!({ "rpm": 2000 }))).await;
    assert_eq!(ack_result(&r)["applied_rpm"], 2000.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn live_fault_ack_names_the_activation_cycle() {
    let svc = service();
    let mut s = svc.session();
    s.handle(&request("1", "start", json!({}))).await;
    let fault = json!({
        "id": "m27", "type": "missing_tooth", "sensor": "crank", "tooth": 27,
        "activation": "live_cycle_boundary"
    });
    let r = s.handle(&request("2", "inject_fault", fault)).await;
    let at = &ack_result(&r)["applies_at"];
    assert!(at["cycle"].as_u64().unwrap() >= 1, "{at}");
}

#[tokio::test(flavor = "multi_thread")]
async fn rpm_above_the_platform_ceiling_reports_the_ceiling() {
    let svc = Service::start(config_with(10_000.0, 1000.0, Some(10_000.0))).unwrap();
    let mut s = svc.session();
    s.handle(&request("1", "start", json!({}))).await;
    let r = s.handle(&request("2", "set_rpm", json!({ "rpm": 3000 }))).await;
    assert_eq!(error_code(&r), "above_ceiling");
    let Response::Error { error, .. } = r else { unreachable!() };
    assert_eq!(error.ceiling_rpm, Some(2500.0));
    let ok = s.handle(&request("3", "set_rpm", json!({ "rpm": 2500 }))).await;
    assert_eq!(ack_result(&ok)["applied_rpm"], 2500.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn subscriber_sees_the_ledger_change_after_injection() {
    let svc = service();
    let mut s = svc.session();
    let out = s.outbox();
    s.handle(&request("1", "subscribe", json!({}))).await;
    s.handle(&request("2", "start", json!({}))).await;
    let fault = json!({
        "id": "n", "type": "global_noise", "sensor": "cam", "sigma": 0.01,
        "activation": "live_immediate"
    });
    s.handle(&request("3", "inject_fault", fault)).await;
    let msgs = wait_for(&out, Duration::from_secs(2), |m| {
        m.kind == TelemetryKind::FaultLedger && m.payload["active"].as_array().is_some_and(|a| a.len() == 1)
    })
    .await;
    let ledger = msgs.last().unwrap();
    assert_eq!(ledger.payload["active"][0]["fault"]["id"], "n");
    assert_eq!(ledger.v, 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn steady_state_sends_only_frame_summaries() {
    let svc = service();
    let mut s = svc.session();
    let out = s.outbox();
    s.handle(&request("1", "start", json!({}))).await;
    s.handle(&request("2", "subscribe", json!({}))).await;
    // let the ECU synchronize
    wait_for(&out, Duration::from_secs(3), |m| {
        m.kind == TelemetryKind::Diagnostics && m.payload["diagnostics"]["sync"] == "synchronized"
    })
    .await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    while out.try_pop().is_some() {}
    let msgs = collect_for(&out, Duration::from_secs(1)).await;
    assert!(msgs.iter().all(|m| m.kind == TelemetryKind::FrameSummary), "{:?}", kinds(&msgs));
    // 20 Hz display rate, give or take scheduling
    assert!((15..=25).contains(&msgs.len()), "{} summaries in 1 s", msgs.len());
    let m = &msgs[0].payload;
    assert_eq!(m["samples"], 2400);
    assert_eq!(m["crank"]["min"].as_array().unwrap().len(), 240);
    let max = m["crank"]["max"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).fold(f64::MIN, f64::max);
    let min = m["crank"]["min"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).fold(f64::MAX, f64::min);
    assert!(max > 0.99 && min < -0.99, "{min}..{max}");
    assert!((m["ecu_rpm"].as_f64().unwrap() - 2000.0).abs() < 10.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn stalled_consumer_loses_summaries_never_acks() {
    let mut cfg = config_with(48_000.0, 2000.0, None);
    cfg.summary_capacity = 16;
    let svc = Service::start(cfg).unwrap();
    let mut s = svc.session();
    let out = s.outbox();
    s.handle(&request("sub", "subscribe", json!({}))).await;
    s.handle(&request("go", "start", json!({}))).await;
    // nobody reads the outbox for 5 s while requests keep coming
    let mut ids = vec!["sub".to_string(), "go".to_string()];
    for k in 0..25 {
        let id = format!("r{k}");
        s.handle(&request(&id, "set_rpm", json!({ "rpm": 1500 + 20 * k }))).await;
        ids.push(id);
        tokio::time::sleep(Duration::from_millis(200)).await;
    }
    assert!(out.dropped() > 0);
    let mut msgs = Vec::new();
    while let Some(m) = out.try_pop() {
        msgs.push(m);
    }
    let acks: Vec<String> = msgs
        .iter()
        .filter(|m| m.kind == TelemetryKind::Ack)
        .map(|m| m.payload["request_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(acks, ids);
    let summaries = msgs.iter().filter(|m| m.kind == TelemetryKind::FrameSummary).count();
    assert_eq!(summaries, 16);
    assert!(msgs.windows(2).all(|w| w[0].seq < w[1].seq));
    assert!(msgs.windows(2).any(|w| w[1].seq > w[0].seq + 1), "no gap in seq");
}

#[tokio::test(flavor = "multi_thread")]
async fn retried_request_is_not_applied_twice() {
    let svc = service();
    let mut s = svc.session();
    s.handle(&request("1", "start", json!({}))).await;
    let fault = json!({
        "id": "a", "type": "amplitude_scale", "sensor": "crank", "tooth": 3, "factor": 0.5,
        "activation": "live_immediate"
    });
    let first = s.handle(&request("2", "inject_fault", fault.clone())).await;
    let again = s.handle(&request("2", "inject_fault", fault.clone())).await;
    assert_eq!(first, again);
    // a fresh id re-applies and so hits the duplicate fault id
    let fresh = s.handle(&request("3", "inject_fault", fault)).await;
    assert_eq!(error_code(&fresh), "invalid_fault");
    let reused = s.handle(&request("2", "set_rpm", json!({ "rpm": 100 }))).await;
    assert_eq!(error_code(&reused), "duplicate_request_id");
    let state = svc.rig().state().await.unwrap();
    assert_eq!(state["faults"]["active"].as_array().unwrap().len(), 1);
    assert_eq!(state["engine"]["rpm_commanded"], 2000.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn one_writer_at_a_time() {
    let svc = service();
    let mut a = svc.session();
    let mut b = svc.session();
    ack_result(&a.handle(&request("1", "set_rpm", json!({ "rpm": 1000 }))).await);
    let denied = b.handle(&request("1", "set_rpm", json!({ "rpm": 1200 }))).await;
    assert_eq!(error_code(&denied), "not_in_control");
    // observers may still subscribe
    ack_result(&b.handle(&request("2", "subscribe", json!({}))).await);
    let took = b.handle(&request("3", "take_control", json!({}))).await;
    assert_eq!(ack_result(&took)["previous"], a.id());
    ack_result(&b.handle(&request("4", "set_rpm", json!({ "rpm": 1200 }))).await);
    assert_eq!(error_code(&a.handle(&request("2", "stop", json!({}))).await), "not_in_control");
    drop(b);
    assert_eq!(svc.hub().controller(), None);
}

#[tokio::test(flavor = "multi_thread")]
async fn runtime_state_errors_are_reported() {
    let svc = service();
    let mut s = svc.session();
    assert_eq!(error_code(&s.handle(&request("1", "stop", json!({}))).await), "not_running");
    s.handle(&request("2", "start", json!({}))).await;
    assert_eq!(error_code(&s.handle(&request("3", "start", json!({}))).await), "already_running");
    let bad = json!({ "id": "x", "type": "missing_tooth", "sensor": "crank", "tooth": 61, "activation": "live_immediate" });
    assert_eq!(error_code(&s.handle(&request("4", "inject_fault", bad)).await), "invalid_fault");
    assert_eq!(
        error_code(&s.handle(&request("5", "clear_fault", json!({ "id": "nope" }))).await),
        "unknown_fault"
    );
    let on_start = json!({ "id": "y", "type": "missing_tooth", "sensor": "crank", "tooth": 5, "activation": "on_start" });
    assert_eq!(error_code(&s.handle(&request("6", "inject_fault", on_start)).await), "invalid_fault");
}

#[tokio::test(flavor = "multi_thread")]
async fn sync_fault_round_trip_through_the_service() {
    let svc = service();
    let mut s = svc.session();
    let out = s.outbox();
    s.handle(&request("sub", "subscribe", json!({}))).await;
    s.handle(&request("go", "start", json!({}))).await;
    wait_for(&out, Duration::from_secs(3), |m| m.payload["diagnostics"]["sync"] == "synchronized").await;
    let shift = |id: &str, d: f64| json!({ "id": id, "type": "sync_offset", "offset_deg": d, "activation": "live_cycle_boundary" });
    s.handle(&request("f1", "inject_fault", shift("plus", 30.0))).await;
    wait_for(&out, Duration::from_secs(3), |m| {
        m.kind == TelemetryKind::Diagnostics
            && m.payload["diagnostics"]["fault_codes"]
                .as_array()
                .is_some_and(|c| c.iter().any(|x| x == "crank_cam_sync_fault"))
    })
    .await;
    s.handle(&request("f2", "clear_fault", json!({ "id": "plus" }))).await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    s.handle(&request("cc", "clear_codes", json!({}))).await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    let state = svc.rig().state().await.unwrap();
    assert_eq!(state["ecu"]["diagnostics"]["sync"], "synchronized", "{state}");
    assert_eq!(state["ecu"]["diagnostics"]["fault_codes"], json!([]));
}
