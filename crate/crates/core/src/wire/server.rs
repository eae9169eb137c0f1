//! Serving side: accepts sessions and answers requests on behalf of a gate
//! or a domain registry.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use super::frame::{Frame, FrameType};
use super::identity::{GateIdentity, KeyLookup};
use super::session::{paginate, SessionConfig, WireSession};
use super::transport::{KillSwitch, Network};
use super::WireError;
use crate::dataflow::Operator;
use crate::gate::{Gate, GateError, Subscription};
use crate::model::{DataRecord, GateAddress, GateMetadata, Principal};
use crate::resolution::{RegistryEndpoint, Selector};

const POLL: Duration = Duration::from_millis(25);

/// Requests a wire endpoint can answer. `caller` is the authenticated peer.
pub trait WireService: Send + Sync {
    fn serve_query(
        &self,
        caller: &GateAddress,
        oport: &str,
        principal: &Principal,
        filter: Option<&Operator>,
    ) -> Result<Vec<DataRecord>, WireError> {
        let _ = (caller, oport, principal, filter);
        Err(unsupported("QUERY"))
    }

    fn serve_subscribe(
        &self,
        caller: &GateAddress,
        oport: &str,
        principal: &Principal,
        from_seq: u64,
    ) -> Result<Subscription, WireError> {
        let _ = (caller, oport, principal, from_seq);
        Err(unsupported("SUBSCRIBE"))
    }

    fn serve_resolve(
        &self,
        caller: &GateAddress,
        requester: &GateMetadata,
        sel: &Selector,
    ) -> Result<GateAddress, WireError> {
        let _ = (caller, requester, sel);
        Err(unsupported("RESOLVE"))
    }
}

fn unsupported(what: &str) -> WireError {
    WireError::Remote {
        kind: "Unsupported".into(),
        message: format!("{what} is not served here"),
    }
}

impl WireService for Arc<Gate> {
    fn serve_query(
        &self,
        _caller: &GateAddress,
        oport: &str,
        principal: &Principal,
        filter: Option<&Operator>,
    ) -> Result<Vec<DataRecord>, WireError> {
        Ok(Gate::query(self, oport, principal, filter)?)
    }

    fn serve_subscribe(
        &self,
        _caller: &GateAddress,
        oport: &str,
        principal: &Principal,
        from_seq: u64,
    ) -> Result<Subscription, WireError> {
        Ok(self.watch(oport, principal, from_seq)?)
    }
}

/// Answers RESOLVE requests against one domain's registry. A caller may only
/// resolve on behalf of requesters from its own domain.
pub struct RegistryService {
    registry: Arc<dyn RegistryEndpoint>,
}

impl RegistryService {
    pub fn new(registry: Arc<dyn RegistryEndpoint>) -> Self {
        Self { registry }
    }
}

impl WireService for RegistryService {
    fn serve_resolve(
        &self,
        caller: &GateAddress,
        requester: &GateMetadata,
        sel: &Selector,
    ) -> Result<GateAddress, WireError> {
        if caller.domain() != requester.address.domain() {
            return Err(WireError::AccessDenied(format!(
                "{caller} may not resolve on behalf of {}",
                requester.address
            )));
        }
        Ok(self.registry.resolve_for(requester, sel)?)
    }
}

#[derive(Debug, Default)]
struct Stats {
    sessions: AtomicU64,
    auth_failures: Mutex<Vec<String>>,
}

/// A running listener. Dropping it stops the listener and severs its sessions.
pub struct ServerHandle {
    address: GateAddress,
    network: Arc<dyn Network>,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<KillSwitch>>>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    acceptor: Option<JoinHandle<()>>,
    stats: Arc<Stats>,
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle")
            .field("address", &self.address.to_string())
            .finish()
    }
}

impl ServerHandle {
    pub fn address(&self) -> &GateAddress {
        &self.address
    }

    /// Sessions that completed the handshake.
    pub fn sessions_opened(&self) -> u64 {
        self.stats.sessions.load(Ordering::SeqCst)
    }

    /// Handshakes this server refused, with the reason.
    pub fn auth_failures(&self) -> Vec<String> {
        self.stats.auth_failures.lock().clone()
    }

    /// Severs every open session without stopping the listener.
    pub fn sever_all(&self) {
        for k in self.conns.lock().drain(..) {
            k.kill();
        }
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        self.network.unlisten(&self.address);
        self.sever_all();
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
        self.sever_all();
        let workers: Vec<_> = self.workers.lock().drain(..).collect();
        for w in workers {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Starts listening for `identity`'s address and serves each authenticated
/// session on its own thread.
pub fn serve(
    network: Arc<dyn Network>,
    identity: GateIdentity,
    keys: Arc<dyn KeyLookup>,
    service: Arc<dyn WireService>,
    config: SessionConfig,
) -> Result<ServerHandle, WireError> {
    let address = identity.address().clone();
    let listener = network.listen(&address)?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<KillSwitch>>> = Arc::default();
    let workers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let stats: Arc<Stats> = Arc::default();
    let acceptor = {
        let (stop, conns, workers, stats) = (stop.clone(), conns.clone(), workers.clone(), stats.clone());
        let identity = Arc::new(identity);
        std::thread::Builder::new()
            .name(format!("wire-accept-{address}"))
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let conn = match listener.accept_timeout(POLL) {
                        Ok(Some(c)) => c,
                        Ok(None) => continue,
                        Err(_) => break,
                    };
                    conns.lock().push(conn.kill_switch());
                    let (identity, keys, service, stop, stats) = (
                        identity.clone(),
                        keys.clone(),
                        service.clone(),
                        stop.clone(),
                        stats.clone(),
                    );
                    let worker =
                        std::thread::spawn(
                            move || match WireSession::accept(&identity, conn, keys.as_ref(), config) {
                                Ok(session) => {
                                    stats.sessions.fetch_add(1, Ordering::SeqCst);
                                    serve_session(session, service.as_ref(), &stop);
                                }
                                Err(e) => {
                                    log::info!("{}: refused session: {e}", identity.address());
                                    if matches!(e, WireError::AuthFailed(_)) {
                                        stats.auth_failures.lock().push(e.to_string());
                                    }
                                }
                            },
                        );
                    workers.lock().push(worker);
                }
            })
            .map_err(|e| WireError::Io(e.to_string()))?
    };
    Ok(ServerHandle {
        address,
        network,
        stop,
        conns,
        workers,
        acceptor: Some(acceptor),
        stats,
    })
}

fn field<T: DeserializeOwned>(f: &Frame, key: &str) -> Result<T, WireError> {
    let v = f.body.get(key).cloned().unwrap_or(Value::Null);
    serde_json::from_value(v).map_err(|e| WireError::ProtocolViolation(format!("{:?}.{key}: {e}", f.t)))
}

fn optional<T: DeserializeOwned>(f: &Frame, key: &str) -> Result<Option<T>, WireError> {
    match f.body.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(_) => field(f, key).map(Some),
    }
}

fn serve_session(mut s: WireSession, service: &dyn WireService, stop: &AtomicBool) {
    let caller = s.remote().clone();
    loop {
        let f = match s.recv() {
            Ok(f) => f,
            Err(e) => {
                if !e.is_transport() {
                    log::debug!("{}: session {} ended: {e}", s.local(), s.sid());
                }
                s.mark_closed();
                return;
            }
        };
        let outcome = match f.t {
            FrameType::Query => handle_query(&mut s, service, &caller, &f),
            FrameType::Resolve => handle_resolve(&mut s, service, &caller, &f),
            FrameType::Subscribe => {
                if let Err(e) = handle_subscribe(&mut s, service, &caller, &f, stop) {
                    log::debug!("{}: subscription on {} ended: {e}", s.local(), s.sid());
                }
                s.mark_closed();
                return;
            }
            FrameType::Bye => {
                s.mark_closed();
                return;
            }
            other => Err(s.violation(format!("unexpected {other:?} from client"))),
        };
        match outcome {
            Ok(()) => {}
            Err(WireError::ProtocolViolation(m)) => {
                let _ = s.violation(m);
                return;
            }
            Err(e) if e.is_transport() => {
                s.mark_closed();
                return;
            }
            Err(e) => s.send_error(&e),
        }
    }
}

fn handle_query(
    s: &mut WireSession,
    service: &dyn WireService,
    caller: &GateAddress,
    f: &Frame,
) -> Result<(), WireError> {
    let oport: String = field(f, "oport")?;
    let principal: Principal = field(f, "principal")?;
    let filter: Option<Operator> = optional(f, "filter")?;
    let records = service.serve_query(caller, &oport, &principal, filter.as_ref())?;
    let values = records
        .iter()
        .map(|r| serde_json::to_value(r).expect("records serialize"))
        .collect();
    for page in paginate(values, "records", s.config().max_frame)? {
        s.send(FrameType::Result, Value::Object(page))?;
    }
    Ok(())
}

fn handle_resolve(
    s: &mut WireSession,
    service: &dyn WireService,
    caller: &GateAddress,
    f: &Frame,
) -> Result<(), WireError> {
    let requester: GateMetadata = field(f, "requester")?;
    let selector: Selector = field(f, "selector")?;
    let address = service.serve_resolve(caller, &requester, &selector)?;
    s.send(FrameType::Resolved, json!({"address": address.to_string()}))
}

fn handle_subscribe(
    s: &mut WireSession,
    service: &dyn WireService,
    caller: &GateAddress,
    f: &Frame,
    stop: &AtomicBool,
) -> Result<(), WireError> {
    let oport: String = field(f, "oport")?;
    let principal: Principal = field(f, "principal")?;
    let from_seq: u64 = field(f, "from_seq")?;
    let mut sub = match service.serve_subscribe(caller, &oport, &principal, from_seq) {
        Ok(sub) => sub,
        Err(e) => {
            s.send_error(&e);
            return Err(e);
        }
    };
    s.send(FrameType::Ack, json!({"cursor": from_seq}))?;
    loop {
        if stop.load(Ordering::SeqCst) {
            return Err(WireError::SessionClosed);
        }
        let group = match sub.recv_timeout(POLL) {
            Ok(Some(group)) => group,
            Ok(None) => continue,
            Err(GateError::Closed) => {
                s.send_error(&WireError::SessionClosed);
                return Err(WireError::SessionClosed);
            }
            Err(e) => return Err(e.into()),
        };
        let values = group
            .iter()
            .map(|e| serde_json::to_value(e).expect("events serialize"))
            .collect();
        for page in paginate(values, "events", s.config().max_frame)? {
            s.send(FrameType::Event, Value::Object(page))?;
        }
        let reply = s.recv()?;
        match reply.t {
            FrameType::Ack => sub.ack(field(&reply, "seq")?),
            FrameType::Bye => return Ok(()),
            other => return Err(WireError::ProtocolViolation(format!("expected ACK, got {other:?}"))),
        }
    }
}
