//! Sessions and the mutual challenge-response handshake.
//!
//! ```text
//! initiator                         responder
//!   HELLO {from, to, nonce: Ni}  ->
//!                                <- CHALLENGE {from, nonce: Nr, echo: Ni}
//!   AUTH {sig: initiator proof}  ->
//!                                <- AUTH {sig: responder proof}
//!   OPEN {}                      ->
//! ```
//!
//! A proof signs the domain-separated transcript of the session id, both
//! addresses and both nonces, labelled with the signer's role.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::RngCore;
use serde_json::{json, Map, Value};

use super::frame::{self, Frame, FrameType, MAX_FRAME_LEN};
use super::identity::{verify_signature, GateIdentity, KeyLookup};
use super::trace::{self, Side, TraceKind};
use super::transport::{Connection, KillSwitch};
use super::WireError;
use crate::model::GateAddress;

const AUTH_CONTEXT: &[u8] = b"ioda-wire-auth/v1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Handshaking,
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionConfig {
    /// Upper bound on the encoded size of frames this endpoint sends;
    /// larger result sets are split across frames.
    pub max_frame: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_frame: MAX_FRAME_LEN,
        }
    }
}

static NEXT_SID: AtomicU64 = AtomicU64::new(1);

fn fresh_sid() -> String {
    format!(
        "{:08x}-{}",
        std::process::id(),
        NEXT_SID.fetch_add(1, Ordering::Relaxed)
    )
}

fn fresh_nonce() -> String {
    let mut n = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut n);
    hex::encode(n)
}

/// Bytes signed by one side of the handshake.
pub fn transcript(
    role: Side,
    sid: &str,
    initiator: &GateAddress,
    responder: &GateAddress,
    ni: &str,
    nr: &str,
) -> Vec<u8> {
    let mut m = AUTH_CONTEXT.to_vec();
    let label: &[u8] = match role {
        Side::Initiator => b"initiator",
        Side::Responder => b"responder",
    };
    for part in [
        label,
        sid.as_bytes(),
        initiator.to_string().as_bytes(),
        responder.to_string().as_bytes(),
    ] {
        m.extend_from_slice(part);
        m.push(0);
    }
    m.extend_from_slice(&hex::decode(ni).unwrap_or_default());
    m.extend_from_slice(&hex::decode(nr).unwrap_or_default());
    m
}

fn body_str<'a>(f: &'a Frame, key: &str) -> Result<&'a str, WireError> {
    f.body
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| WireError::ProtocolViolation(format!("{:?} frame lacks string field {key:?}", f.t)))
}

fn valid_nonce(n: &str) -> bool {
    n.len() == 64 && hex::decode(n).is_ok()
}

pub struct WireSession {
    endpoint: u64,
    sid: String,
    side: Side,
    local: GateAddress,
    remote: GateAddress,
    state: SessionState,
    nonces: (String, String),
    conn: Connection,
    config: SessionConfig,
}

impl std::fmt::Debug for WireSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WireSession")
            .field("sid", &self.sid)
            .field("side", &self.side)
            .field("local", &self.local.to_string())
            .field("remote", &self.remote.to_string())
            .field("state", &self.state)
            .finish()
    }
}

impl WireSession {
    fn new(conn: Connection, side: Side, local: GateAddress, config: SessionConfig) -> Self {
        Self {
            endpoint: trace::next_endpoint(),
            sid: String::new(),
            side,
            remote: local.clone(),
            local,
            state: SessionState::Handshaking,
            nonces: (String::new(), String::new()),
            conn,
            config,
        }
    }

    pub fn sid(&self) -> &str {
        &self.sid
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn local(&self) -> &GateAddress {
        &self.local
    }

    pub fn remote(&self) -> &GateAddress {
        &self.remote
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    /// The (initiator, responder) nonces of the handshake.
    pub fn nonces(&self) -> (&str, &str) {
        (&self.nonces.0, &self.nonces.1)
    }

    pub fn config(&self) -> SessionConfig {
        self.config
    }

    pub fn kill_switch(&self) -> KillSwitch {
        self.conn.kill_switch()
    }

    fn note(&self, kind: TraceKind) {
        trace::record(self.endpoint, &self.sid, self.side, kind);
    }

    /// Sends a frame. Data frames require an open session.
    pub fn send(&mut self, t: FrameType, body: Value) -> Result<(), WireError> {
        if self.state == SessionState::Closed {
            return Err(WireError::SessionClosed);
        }
        if t.is_data() && self.state != SessionState::Open {
            return Err(WireError::ProtocolViolation(format!("{t:?} before session open")));
        }
        let f = Frame::new(t, &self.sid, body);
        match frame::write_frame(&mut self.conn.writer, &f) {
            Ok(()) => {
                self.note(TraceKind::Sent(t));
                Ok(())
            }
            Err(e) => {
                self.fail();
                Err(e)
            }
        }
    }

    /// Receives the next frame. Data frames arriving before the session is
    /// open and frames for another session are refused; a remote ERROR frame
    /// becomes the corresponding error.
    pub fn recv(&mut self) -> Result<Frame, WireError> {
        if self.state == SessionState::Closed {
            return Err(WireError::SessionClosed);
        }
        let f = match frame::read_frame(&mut self.conn.reader) {
            Ok(f) => f,
            Err(e) => {
                self.fail();
                return Err(e);
            }
        };
        if f.sid != self.sid {
            self.note(TraceKind::Rejected(f.t));
            return Err(self.violation(format!("frame for session {:?} on session {:?}", f.sid, self.sid)));
        }
        if f.t.is_data() && self.state != SessionState::Open {
            self.note(TraceKind::Rejected(f.t));
            return Err(self.violation(format!("{:?} before session open", f.t)));
        }
        self.note(TraceKind::Accepted(f.t));
        if f.t == FrameType::Error {
            let err = WireError::from_error_body(&f.body);
            if self.state == SessionState::Handshaking {
                self.close_quietly();
            }
            return Err(err);
        }
        Ok(f)
    }

    /// Receives a frame of the given type or fails with a protocol violation.
    pub fn expect(&mut self, t: FrameType) -> Result<Frame, WireError> {
        let f = self.recv()?;
        if f.t != t {
            return Err(self.violation(format!("expected {t:?}, got {:?}", f.t)));
        }
        Ok(f)
    }

    /// Reports a protocol violation to the peer and closes the session.
    pub fn violation(&mut self, message: String) -> WireError {
        let err = WireError::ProtocolViolation(message);
        self.send_error(&err);
        self.close_quietly();
        err
    }

    /// Best-effort ERROR frame for `err`.
    pub fn send_error(&mut self, err: &WireError) {
        if self.state != SessionState::Closed {
            let _ = self.send(FrameType::Error, err.to_error_body());
        }
    }

    fn fail(&mut self) {
        if self.state != SessionState::Closed {
            self.state = SessionState::Closed;
            self.note(TraceKind::Closed);
        }
    }

    fn close_quietly(&mut self) {
        self.fail();
        self.conn.finish();
    }

    fn auth_failed(&mut self, why: String) -> WireError {
        let err = WireError::AuthFailed(why);
        self.send_error(&err);
        self.close_quietly();
        err
    }

    fn open(&mut self) {
        self.state = SessionState::Open;
        self.note(TraceKind::Opened);
    }

    /// Sends BYE and closes.
    pub fn close(mut self) {
        if self.state == SessionState::Open {
            let _ = self.send(FrameType::Bye, json!({}));
        }
        self.close_quietly();
    }

    pub(crate) fn mark_closed(&mut self) {
        self.close_quietly();
    }

    /// Runs the handshake as the connecting side.
    pub fn establish(
        local: &GateIdentity,
        conn: Connection,
        remote: &GateAddress,
        keys: &dyn KeyLookup,
        config: SessionConfig,
    ) -> Result<WireSession, WireError> {
        let mut s = WireSession::new(conn, Side::Initiator, local.address().clone(), config);
        s.sid = fresh_sid();
        s.remote = remote.gate_only();
        let ni = fresh_nonce();
        s.send(
            FrameType::Hello,
            json!({"from": s.local.to_string(), "to": s.remote.to_string(), "nonce": ni}),
        )?;
        let ch = s.expect(FrameType::Challenge)?;
        let from = body_str(&ch, "from")?.to_string();
        let nr = body_str(&ch, "nonce")?.to_string();
        let echo = body_str(&ch, "echo")?.to_string();
        if echo != ni || !valid_nonce(&nr) {
            return Err(s.violation("challenge does not echo our nonce".into()));
        }
        if from != s.remote.to_string() {
            return Err(s.auth_failed(format!("expected {} but {from} answered", s.remote)));
        }
        let Some(peer_key) = keys.verification_key(&s.remote) else {
            return Err(s.auth_failed(format!("no verification key for {}", s.remote)));
        };
        s.nonces = (ni, nr);
        let mine = transcript(Side::Initiator, &s.sid, &s.local, &s.remote, &s.nonces.0, &s.nonces.1);
        s.send(FrameType::Auth, json!({"sig": local.sign(&mine)}))?;
        let auth = s.expect(FrameType::Auth)?;
        let theirs = transcript(Side::Responder, &s.sid, &s.local, &s.remote, &s.nonces.0, &s.nonces.1);
        if !verify_signature(&peer_key, &theirs, body_str(&auth, "sig")?) {
            return Err(s.auth_failed(format!("bad signature from {}", s.remote)));
        }
        s.send(FrameType::Open, json!({}))?;
        s.open();
        Ok(s)
    }

    /// Runs the handshake as the listening side.
    pub fn accept(
        local: &GateIdentity,
        conn: Connection,
        keys: &dyn KeyLookup,
        config: SessionConfig,
    ) -> Result<WireSession, WireError> {
        let mut s = WireSession::new(conn, Side::Responder, local.address().clone(), config);
        let hello = match frame::read_frame(&mut s.conn.reader) {
            Ok(f) => f,
            Err(e) => {
                s.close_quietly();
                return Err(e);
            }
        };
        s.sid = hello.sid.clone();
        if hello.t != FrameType::Hello {
            s.note(TraceKind::Rejected(hello.t));
            return Err(s.violation(format!("expected HELLO, got {:?}", hello.t)));
        }
        s.note(TraceKind::Accepted(FrameType::Hello));
        let from = body_str(&hello, "from")?.to_string();
        let to = body_str(&hello, "to")?.to_string();
        let ni = body_str(&hello, "nonce")?.to_string();
        if !valid_nonce(&ni) || hello.sid.is_empty() {
            return Err(s.violation("malformed HELLO".into()));
        }
        if to != s.local.to_string() {
            return Err(s.auth_failed(format!("HELLO addressed to {to}, this is {}", s.local)));
        }
        let remote: GateAddress = match from.parse() {
            Ok(a) => a,
            Err(_) => return Err(s.violation(format!("bad peer address {from:?}"))),
        };
        s.remote = remote;
        let Some(peer_key) = keys.verification_key(&s.remote) else {
            return Err(s.auth_failed(format!("no verification key for {from}")));
        };
        let nr = fresh_nonce();
        s.send(
            FrameType::Challenge,
            json!({"from": s.local.to_string(), "nonce": nr, "echo": ni}),
        )?;
        s.nonces = (ni, nr);
        let auth = s.expect(FrameType::Auth)?;
        let theirs = transcript(Side::Initiator, &s.sid, &s.remote, &s.local, &s.nonces.0, &s.nonces.1);
        if !verify_signature(&peer_key, &theirs, body_str(&auth, "sig")?) {
            return Err(s.auth_failed(format!("bad signature from {}", s.remote)));
        }
        let mine = transcript(Side::Responder, &s.sid, &s.remote, &s.local, &s.nonces.0, &s.nonces.1);
        s.send(FrameType::Auth, json!({"sig": local.sign(&mine)}))?;
        s.expect(FrameType::Open)?;
        s.open();
        Ok(s)
    }
}

/// Splits `items` into pages whose encoded frames stay within `max_frame`.
/// Each item must fit a frame on its own.
pub fn paginate(items: Vec<Value>, key: &str, max_frame: usize) -> Result<Vec<Map<String, Value>>, WireError> {
    // "t", "sid" and the continuation flag fit comfortably in this allowance.
    const OVERHEAD: usize = 256;
    let budget = max_frame.saturating_sub(OVERHEAD);
    let mut pages: Vec<Vec<Value>> = vec![Vec::new()];
    let mut used = 0;
    for item in items {
        let size = serde_json::to_string(&item).expect("values serialize").len() + 1;
        if size > budget {
            return Err(WireError::FrameTooLarge(size));
        }
        if used + size > budget && !pages.last().expect("non-empty").is_empty() {
            pages.push(Vec::new());
            used = 0;
        }
        used += size;
        pages.last_mut().expect("non-empty").push(item);
    }
    let n = pages.len();
    Ok(pages
        .into_iter()
        .enumerate()
        .map(|(i, page)| {
            let mut m = Map::new();
            m.insert(key.to_string(), Value::Array(page));
            m.insert("more".into(), Value::Bool(i + 1 < n));
            m
        })
        .collect())
}
