//! Per-session outgoing queue.
//!
//! Frame summaries sit in a bounded queue that drops its oldest entry when
//! full. Everything else (acks, errors, diagnostics, ledger updates) is kept
//! until delivered. A per-session sequence number is stamped on enqueue, so
//! a dropped summary shows up as a hole in `seq`.

use std::collections::VecDeque;
use std::sync::Mutex;

use serde_json::Value;
use tokio::sync::Notify;

use crate::protocol::{Telemetry, TelemetryKind, PROTOCOL_VERSION};

#[derive(Debug, Default)]
struct Queues {
    next_seq: u64,
    reliable: VecDeque<Telemetry>,
    summaries: VecDeque<Telemetry>,
    dropped: u64,
    closed: bool,
}

#[derive(Debug)]
pub struct Outbox {
    queues: Mutex<Queues>,
    ready: Notify,
    summary_capacity: usize,
}

impl Outbox {
    pub fn new(summary_capacity: usize) -> Self {
        Self {
            queues: Mutex::new(Queues::default()),
            ready: Notify::new(),
            summary_capacity: summary_capacity.max(1),
        }
    }

    /// Enqueues a message and returns its sequence number.
    pub fn push(&self, kind: TelemetryKind, payload: Value) -> u64 {
        let mut q = self.queues.lock().expect("outbox lock");
        let seq = q.next_seq;
        q.next_seq += 1;
        let msg = Telemetry {
            v: PROTOCOL_VERSION,
            seq,
            kind,
            payload,
        };
        if kind == TelemetryKind::FrameSummary {
            if q.summaries.len() >= self.summary_capacity {
                q.summaries.pop_front();
                q.dropped += 1;
            }
            q.summaries.push_back(msg);
        } else {
            q.reliable.push_back(msg);
        }
        drop(q);
        self.ready.notify_one();
        seq
    }

    /// Oldest queued message, if any.
    pub fn try_pop(&self) -> Option<Telemetry> {
        let mut q = self.queues.lock().expect("outbox lock");
        let take_summary = match (q.reliable.front(), q.summaries.front()) {
            (Some(r), Some(s)) => s.seq < r.seq,
            (None, Some(_)) => true,
            _ => false,
        };
        if take_summary {
            q.summaries.pop_front()
        } else {
            q.reliable.pop_front()
        }
    }

    /// Waits for the next message; `None` once the outbox is closed and empty.
    pub async fn next(&self) -> Option<Telemetry> {
        loop {
            if let Some(m) = self.try_pop() {
                return Some(m);
            }
            if self.queues.lock().expect("outbox lock").closed {
                return None;
            }
            self.ready.notified().await;
        }
    }

    pub fn close(&self) {
        self.queues.lock().expect("outbox lock").closed = true;
        self.ready.notify_one();
    }

    /// Frame summaries discarded so far because the consumer fell behind.
    pub fn dropped(&self) -> u64 {
        self.queues.lock().expect("outbox lock").dropped
    }

    pub fn len(&self) -> usize {
        let q = self.queues.lock().expect("outbox lock");
        q.reliable.len() + q.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn summaries_drop_oldest_reliable_never() {
        let o = Outbox::new(3);
        for k in 0..10 {
            o.push(TelemetryKind::FrameSummary, json!(k));
            if k % 2 == 0 {
                o.push(TelemetryKind::Ack, json!(k));
            }
        }
        assert_eq!(o.dropped(), 7);
        let mut out = Vec::new();
        while let Some(m) = o.try_pop() {
            out.push(m);
        }
        let acks = out.iter().filter(|m| m.kind == TelemetryKind::Ack).count();
        assert_eq!(acks, 5);
        let summaries: Vec<_> = out
            .iter()
            .filter(|m| m.kind == TelemetryKind::FrameSummary)
            .map(|m| m.payload.as_i64().unwrap())
            .collect();
        assert_eq!(summaries, vec![7, 8, 9]);
        assert!(out.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    #[tokio::test]
    async fn next_wakes_on_push_and_ends_on_close() {
        let o = std::sync::Arc::new(Outbox::new(4));
        let o2 = o.clone();
        let h = tokio::spawn(async move {
            let mut got = Vec::new();
            while let Some(m) = o2.next().await {
                got.push(m.seq);
            }
            got
        });
        tokio::task::yield_now().await;
        o.push(TelemetryKind::Ack, json!(null));
        o.push(TelemetryKind::Diagnostics, json!(null));
        o.close();
        assert_eq!(h.await.unwrap(), vec![0, 1]);
    }
}
