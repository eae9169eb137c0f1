//! Requesting side of a wire.

use std::sync::Arc;

use serde_json::{json, Value};

use super::frame::{Frame, FrameType};
use super::identity::{GateIdentity, KeyLookup};
use super::session::{SessionConfig, WireSession};
use super::transport::{KillSwitch, Network};
use super::WireError;
use crate::dataflow::Operator;
use crate::gate::ViewEvent;
use crate::model::{DataRecord, GateAddress, GateMetadata, Principal};
use crate::resolution::{RegistryEndpoint, ResolveError, Selector};

fn parse_list<T: serde::de::DeserializeOwned>(f: &Frame, key: &str) -> Result<(Vec<T>, bool), WireError> {
    let items = f
        .body
        .get(key)
        .cloned()
        .ok_or_else(|| WireError::ProtocolViolation(format!("{:?} lacks {key:?}", f.t)))?;
    let items: Vec<T> =
        serde_json::from_value(items).map_err(|e| WireError::ProtocolViolation(format!("{:?}.{key}: {e}", f.t)))?;
    let more = f.body.get("more").and_then(Value::as_bool).unwrap_or(false);
    Ok((items, more))
}

/// An open session used for request/response exchanges.
#[derive(Debug)]
pub struct WireClient {
    session: WireSession,
}

impl WireClient {
    /// Connects to `remote`'s listener and authenticates both ends.
    pub fn connect(
        network: &dyn Network,
        identity: &GateIdentity,
        keys: &dyn KeyLookup,
        remote: &GateAddress,
        config: SessionConfig,
    ) -> Result<Self, WireError> {
        let conn = network.connect(&remote.gate_only())?;
        Ok(Self {
            session: WireSession::establish(identity, conn, remote, keys, config)?,
        })
    }

    pub fn from_session(session: WireSession) -> Self {
        Self { session }
    }

    pub fn session(&self) -> &WireSession {
        &self.session
    }

    /// Queries a remote oport; the serving gate applies its policy to `principal`.
    pub fn query(
        &mut self,
        oport: &str,
        principal: &Principal,
        filter: Option<&Operator>,
    ) -> Result<Vec<DataRecord>, WireError> {
        let mut body = json!({"oport": oport, "principal": principal});
        if let Some(f) = filter {
            body["filter"] = serde_json::to_value(f).expect("operators serialize");
        }
        self.session.send(FrameType::Query, body)?;
        let mut out = Vec::new();
        loop {
            let f = self.session.expect(FrameType::Result)?;
            let (records, more) = parse_list::<DataRecord>(&f, "records")?;
            out.extend(records);
            if !more {
                return Ok(out);
            }
        }
    }

    pub fn resolve(&mut self, requester: &GateMetadata, selector: &Selector) -> Result<GateAddress, WireError> {
        self.session.send(
            FrameType::Resolve,
            json!({"requester": requester, "selector": selector}),
        )?;
        let f = self.session.expect(FrameType::Resolved)?;
        let text = f
            .body
            .get("address")
            .and_then(Value::as_str)
            .ok_or_else(|| WireError::ProtocolViolation("RESOLVED lacks address".into()))?;
        text.parse()
            .map_err(|_| WireError::ProtocolViolation(format!("RESOLVED carries bad address {text:?}")))
    }

    /// Turns the session into an event stream of events with `seq > from_seq`.
    pub fn subscribe(
        mut self,
        oport: &str,
        principal: &Principal,
        from_seq: u64,
    ) -> Result<RemoteSubscription, WireError> {
        self.session.send(
            FrameType::Subscribe,
            json!({"oport": oport, "principal": principal, "from_seq": from_seq}),
        )?;
        let ack = self.session.expect(FrameType::Ack)?;
        let cursor = ack.body.get("cursor").and_then(Value::as_u64);
        if cursor != Some(from_seq) {
            return Err(self
                .session
                .violation(format!("subscription confirmed at {cursor:?}, asked {from_seq}")));
        }
        Ok(RemoteSubscription {
            session: self.session,
            oport: oport.to_string(),
            cursor: from_seq,
            acked: from_seq,
        })
    }

    pub fn close(self) {
        self.session.close();
    }
}

/// A remote event stream. Each group must be ACKed before the server sends
/// the next one.
#[derive(Debug)]
pub struct RemoteSubscription {
    session: WireSession,
    oport: String,
    cursor: u64,
    acked: u64,
}

impl RemoteSubscription {
    pub fn oport(&self) -> &str {
        &self.oport
    }

    /// Highest sequence number received.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn acked(&self) -> u64 {
        self.acked
    }

    pub fn kill_switch(&self) -> KillSwitch {
        self.session.kill_switch()
    }

    pub fn session(&self) -> &WireSession {
        &self.session
    }

    /// Blocks until the next publication group arrives. Sequence numbers must
    /// continue the stream without gaps.
    pub fn next_group(&mut self) -> Result<Vec<ViewEvent>, WireError> {
        let mut group = Vec::new();
        loop {
            let f = self.session.expect(FrameType::Event)?;
            let (events, more) = parse_list::<ViewEvent>(&f, "events")?;
            for e in events {
                if e.seq != self.cursor + 1 {
                    return Err(self
                        .session
                        .violation(format!("event {} does not follow {}", e.seq, self.cursor)));
                }
                self.cursor = e.seq;
                group.push(e);
            }
            if !more {
                return Ok(group);
            }
        }
    }

    pub fn ack(&mut self, seq: u64) -> Result<(), WireError> {
        self.session.send(FrameType::Ack, json!({"seq": seq}))?;
        self.acked = self.acked.max(seq);
        Ok(())
    }

    pub fn close(self) {
        self.session.close();
    }
}

/// A peer domain's registry reached over a wire, authenticated as the local
/// domain's registry service.
pub struct RemoteRegistry {
    domain: String,
    remote: GateAddress,
    identity: GateIdentity,
    keys: Arc<dyn KeyLookup>,
    network: Arc<dyn Network>,
    config: SessionConfig,
}

impl RemoteRegistry {
    pub fn new(
        domain: &str,
        identity: GateIdentity,
        keys: Arc<dyn KeyLookup>,
        network: Arc<dyn Network>,
    ) -> Result<Self, WireError> {
        let remote =
            GateAddress::for_gate(domain, super::REGISTRY_GATE).map_err(|e| WireError::Unreachable(e.to_string()))?;
        Ok(Self {
            domain: domain.to_string(),
            remote,
            identity,
            keys,
            network,
            config: SessionConfig::default(),
        })
    }
}

impl RegistryEndpoint for RemoteRegistry {
    fn domain(&self) -> String {
        self.domain.clone()
    }

    fn resolve_for(&self, requester: &GateMetadata, sel: &Selector) -> Result<GateAddress, ResolveError> {
        let mut client = WireClient::connect(
            self.network.as_ref(),
            &self.identity,
            self.keys.as_ref(),
            &self.remote,
            self.config,
        )
        .map_err(|e| ResolveError::Remote(e.to_string()))?;
        let out = client.resolve(requester, sel);
        client.close();
        out.map_err(|e| match e {
            WireError::NotFound(_) => ResolveError::NotFound,
            other => ResolveError::Remote(other.to_string()),
        })
    }
}
