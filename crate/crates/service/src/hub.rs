//! Session registry, telemetry fan-out and control authority.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::Value;

use crate::outbox::Outbox;
use crate::protocol::{ErrorBody, TelemetryKind};

pub type SessionId = u64;

#[derive(Debug)]
struct Slot {
    outbox: Arc<Outbox>,
    subscribed: bool,
}

#[derive(Debug)]
pub struct Hub {
    sessions: Mutex<HashMap<SessionId, Slot>>,
    controller: Mutex<Option<SessionId>>,
    next_id: AtomicU64,
    summary_capacity: usize,
}

impl Hub {
    pub fn new(summary_capacity: usize) -> Self {
        Self {
            sessions: Mutex::new(HashMap::new()),
            controller: Mutex::new(None),
            next_id: AtomicU64::new(1),
            summary_capacity,
        }
    }

    pub fn register(&self) -> (SessionId, Arc<Outbox>) {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let outbox = Arc::new(Outbox::new(self.summary_capacity));
        self.sessions.lock().expect("hub lock").insert(
            id,
            Slot {
                outbox: Arc::clone(&outbox),
                subscribed: false,
            },
        );
        (id, outbox)
    }

    /// Drops the session, closing its outbox and releasing control if held.
    pub fn unregister(&self, id: SessionId) {
        if let Some(slot) = self.sessions.lock().expect("hub lock").remove(&id) {
            slot.outbox.close();
        }
        let mut c = self.controller.lock().expect("hub lock");
        if *c == Some(id) {
            *c = None;
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("hub lock").len()
    }

    /// Marks the session subscribed and returns its outbox.
    pub fn subscribe(&self, id: SessionId) -> Option<Arc<Outbox>> {
        let mut sessions = self.sessions.lock().expect("hub lock");
        let slot = sessions.get_mut(&id)?;
        slot.subscribed = true;
        Some(Arc::clone(&slot.outbox))
    }

    pub fn broadcast(&self, kind: TelemetryKind, payload: &Value) {
        for slot in self.sessions.lock().expect("hub lock").values() {
            if slot.subscribed {
                slot.outbox.push(kind, payload.clone());
            }
        }
    }

    pub fn controller(&self) -> Option<SessionId> {
        *self.controller.lock().expect("hub lock")
    }

    /// Grants control to `id` if nobody holds it; fails if someone else does.
    pub fn authorize(&self, id: SessionId) -> Result<(), ErrorBody> {
        let mut c = self.controller.lock().expect("hub lock");
        match *c {
            None => {
                *c = Some(id);
                Ok(())
            }
            Some(holder) if holder == id => Ok(()),
            Some(holder) => Err(ErrorBody::new(
                "not_in_control",
                format!("session {holder} holds control; send take_control to take over"),
            )),
        }
    }

    /// Control for a client without a session (plain HTTP): allowed only
    /// while no session holds it.
    pub fn authorize_anonymous(&self) -> Result<(), ErrorBody> {
        match self.controller() {
            None => Ok(()),
            Some(holder) => Err(ErrorBody::new(
                "not_in_control",
                format!("session {holder} holds control"),
            )),
        }
    }

    /// Hands control to `id` and returns the previous holder.
    pub fn take_control(&self, id: SessionId) -> Option<SessionId> {
        self.controller.lock().expect("hub lock").replace(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn first_writer_wins_until_takeover() {
        let hub = Hub::new(4);
        let (a, _) = hub.register();
        let (b, _) = hub.register();
        hub.authorize(a).unwrap();
        assert_eq!(hub.authorize(b).unwrap_err().code, "not_in_control");
        assert!(hub.authorize_anonymous().is_err());
        assert_eq!(hub.take_control(b), Some(a));
        assert!(hub.authorize(a).is_err());
        hub.unregister(b);
        assert_eq!(hub.controller(), None);
        hub.authorize(a).unwrap();
    }

    #[test]
    fn broadcast_reaches_only_subscribers() {
        let hub = Hub::new(4);
        let (a, out_a) = hub.register();
        let (_b, out_b) = hub.register();
        hub.subscribe(a).unwrap();
        hub.broadcast(TelemetryKind::Diagnostics, &json!({}));
        assert_eq!(out_a.len(), 1);
        assert!(out_b.is_empty());
    }
}
