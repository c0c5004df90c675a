//! One client connection, independent of the transport carrying it.

use std::collections::HashMap;
use std::sync::Arc;

use serde_json::json;

use crate::hub::{Hub, SessionId};
use crate::outbox::Outbox;
use crate::protocol::{parse_request, Control, ErrorBody, Request, Response};
use crate::rig::RigHandle;

#[derive(Debug)]
pub struct Session {
    id: SessionId,
    hub: Arc<Hub>,
    rig: RigHandle,
    outbox: Arc<Outbox>,
    /// Answer already given to each request id, with its fingerprint.
    answered: HashMap<String, (String, Response)>,
}

impl Session {
    pub fn open(hub: Arc<Hub>, rig: RigHandle) -> Self {
        let (id, outbox) = hub.register();
        Self {
            id,
            hub,
            rig,
            outbox,
            answered: HashMap::new(),
        }
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    /// Everything this session should send to its client, in order.
    pub fn outbox(&self) -> Arc<Outbox> {
        Arc::clone(&self.outbox)
    }

    /// Handles one request. The response is queued on the outbox and also
    /// returned. Requests are handled one at a time, so responses leave in
    /// request order.
    pub async fn handle(&mut self, text: &str) -> Response {
        let response = match parse_request(text) {
            Err(e) => Response::Error {
                request_id: e.request_id,
                error: e.error,
            },
            Ok(req) => self.dispatch(req).await,
        };
        self.outbox.push(response.telemetry_kind(), response.payload());
        response
    }

    async fn dispatch(&mut self, req: Request) -> Response {
        if let Some((fingerprint, earlier)) = self.answered.get(&req.request_id) {
            if *fingerprint == req.fingerprint {
                return earlier.clone();
            }
            return Response::Error {
                request_id: Some(req.request_id),
                error: ErrorBody::new(
                    "duplicate_request_id",
                    "request_id was already used for a different request",
                ),
            };
        }
        let kind = req.control.kind();
        let outcome = self.execute(req.control).await;
        let response = match outcome {
            Ok(result) => Response::Ack {
                request_id: req.request_id.clone(),
                kind,
                result,
            },
            Err(error) => Response::Error {
                request_id: Some(req.request_id.clone()),
                error,
            },
        };
        self.answered
            .insert(req.request_id, (req.fingerprint, response.clone()));
        response
    }

    async fn execute(&mut self, control: Control) -> Result<serde_json::Value, ErrorBody> {
        if control.mutates() {
            self.hub.authorize(self.id)?;
        }
        match control {
            Control::Subscribe => {
                self.rig.subscribe(self.id).await?;
                Ok(json!({ "session": self.id }))
            }
            Control::TakeControl => {
                let previous = self.hub.take_control(self.id);
                Ok(json!({ "session": self.id, "previous": previous }))
            }
            other => self.rig.control(other).await,
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.hub.unregister(self.id);
    }
}
