//! Process-wide frame trace and the no-data-before-auth validator.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::Serialize;

use super::frame::FrameType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Sent(FrameType),
    /// Received and acted upon.
    Accepted(FrameType),
    /// Received and refused without acting on it.
    Rejected(FrameType),
    Opened,
    Closed,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEvent {
    /// Process-unique per session endpoint.
    pub endpoint: u64,
    pub sid: String,
    pub side: Side,
    pub kind: TraceKind,
}

static TRACE: Mutex<Vec<TraceEvent>> = Mutex::new(Vec::new());
static NEXT_ENDPOINT: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_endpoint() -> u64 {
    NEXT_ENDPOINT.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn record(endpoint: u64, sid: &str, side: Side, kind: TraceKind) {
    TRACE.lock().push(TraceEvent {
        endpoint,
        sid: sid.to_string(),
        side,
        kind,
    });
}

/// Every frame event recorded so far in this process.
pub fn snapshot() -> Vec<TraceEvent> {
    TRACE.lock().clone()
}

pub fn len() -> usize {
    TRACE.lock().len()
}

#[derive(Debug, Default)]
struct EndpointState {
    sent_auth: bool,
    accepted_auth: bool,
    open: bool,
}

/// Checks that on every session endpoint no data frame was sent or accepted
/// before the endpoint opened, and that opening followed both sending and
/// accepting an AUTH frame. Returns the offending events otherwise.
pub fn validate(events: &[TraceEvent]) -> Result<usize, Vec<TraceEvent>> {
    let mut state: HashMap<u64, EndpointState> = HashMap::new();
    let mut bad = Vec::new();
    let mut data_frames = 0;
    for e in events {
        let st = state.entry(e.endpoint).or_default();
        match e.kind {
            TraceKind::Sent(FrameType::Auth) => st.sent_auth = true,
            TraceKind::Accepted(FrameType::Auth) => st.accepted_auth = true,
            TraceKind::Opened => {
                if !(st.sent_auth && st.accepted_auth) {
                    bad.push(e.clone());
                }
                st.open = true;
            }
            TraceKind::Closed => st.open = false,
            TraceKind::Sent(t) | TraceKind::Accepted(t) if t.is_data() => {
                data_frames += 1;
                if !st.open {
                    bad.push(e.clone());
                }
            }
            _ => {}
        }
    }
    if bad.is_empty() {
        Ok(data_frames)
    } else {
        Err(bad)
    }
}
