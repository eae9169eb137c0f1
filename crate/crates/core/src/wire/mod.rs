//! Authenticated channels between gates.
//!
//! A wire is a framed session over any reliable ordered byte stream. Both
//! ends prove possession of their registered signing keys before any query,
//! subscription or resolution request is exchanged. The serving gate applies
//! its own policy to the principal named in each request.

pub mod client;
pub mod frame;
pub mod identity;
pub mod server;
pub mod session;
pub mod trace;
pub mod transport;

use serde_json::{json, Map, Value};

use crate::gate::GateError;
use crate::resolution::ResolveError;

pub use client::{RemoteRegistry, RemoteSubscription, WireClient};
pub use frame::{decode, encode, Frame, FrameType, MAX_FRAME_LEN};
pub use identity::{GateIdentity, KeyDirectory, KeyLookup, RegistryKeyring};
pub use server::{serve, RegistryService, ServerHandle, WireService};
pub use session::{SessionConfig, SessionState, WireSession};
pub use transport::{pipe, Connection, InprocNetwork, KillSwitch, Network, TcpNetwork};

/// Gate name under which each domain's registry service listens.
pub const REGISTRY_GATE: &str = "grs";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("transport closed")]
    TransportClosed,
    #[error("session closed")]
    SessionClosed,
    #[error("frame of {0} bytes exceeds the frame limit")]
    FrameTooLarge(usize),
    #[error("no endpoint listening for {0}")]
    Unreachable(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("access denied: {0}")]
    AccessDenied(String),
    #[error("unknown oport: {0}")]
    UnknownOPort(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("remote {kind}: {message}")]
    Remote { kind: String, message: String },
}

impl WireError {
    pub fn kind(&self) -> &str {
        match self {
            WireError::AuthFailed(_) => "AuthFailed",
            WireError::ProtocolViolation(_) => "ProtocolViolation",
            WireError::TransportClosed => "TransportClosed",
            WireError::SessionClosed => "SessionClosed",
            WireError::FrameTooLarge(_) => "FrameTooLarge",
            WireError::Unreachable(_) => "Unreachable",
            WireError::Io(_) => "Io",
            WireError::InvalidKey(_) => "InvalidKey",
            WireError::AccessDenied(_) => "AccessDenied",
            WireError::UnknownOPort(_) => "UnknownOPort",
            WireError::NotFound(_) => "NotFound",
            WireError::Remote { kind, .. } => kind,
        }
    }

    fn message(&self) -> String {
        match self {
            WireError::AuthFailed(m)
            | WireError::ProtocolViolation(m)
            | WireError::Unreachable(m)
            | WireError::Io(m)
            | WireError::InvalidKey(m)
            | WireError::AccessDenied(m)
            | WireError::UnknownOPort(m)
            | WireError::NotFound(m) => m.clone(),
            WireError::Remote { message, .. } => message.clone(),
            other => other.to_string(),
        }
    }

    /// Whether the failure concerns the transport rather than a request.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            WireError::TransportClosed | WireError::SessionClosed | WireError::Io(_) | WireError::Unreachable(_)
        )
    }

    pub fn to_error_body(&self) -> Value {
        json!({"kind": self.kind(), "message": self.message()})
    }

    pub fn from_error_body(body: &Map<String, Value>) -> Self {
        let kind = body
            .get("kind")
            .and_then(Value::as_str)
            .unwrap_or("Unknown")
            .to_string();
        let message = body.get("message").and_then(Value::as_str).unwrap_or("").to_string();
        match kind.as_str() {
            "AuthFailed" => WireError::AuthFailed(message),
            "ProtocolViolation" => WireError::ProtocolViolation(message),
            "SessionClosed" => WireError::SessionClosed,
            "AccessDenied" => WireError::AccessDenied(message),
            "UnknownOPort" => WireError::UnknownOPort(message),
            "NotFound" => WireError::NotFound(message),
            _ => WireError::Remote { kind, message },
        }
    }
}

impl From<GateError> for WireError {
    fn from(e: GateError) -> Self {
        match &e {
            GateError::AccessDenied { principal, oport, perm } => {
                WireError::AccessDenied(format!("{principal} lacks {perm} on {oport}"))
            }
            GateError::UnknownOPort(o) => WireError::UnknownOPort(o.clone()),
            GateError::Closed => WireError::SessionClosed,
            _ => WireError::Remote {
                kind: "GateError".into(),
                message: e.to_string(),
            },
        }
    }
}

impl From<ResolveError> for WireError {
    fn from(e: ResolveError) -> Self {
        match e {
            ResolveError::NotFound => WireError::NotFound(e.to_string()),
            other => WireError::Remote {
                kind: "ResolveError".into(),
                message: other.to_string(),
            },
        }
    }
}
