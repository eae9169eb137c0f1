//! Circuits: named graphs of gates joined by wires.
//!
//! A circuit is verified before it runs. Verification resolves every edge,
//! rejects gate-level cycles, checks that each source oport's schema covers
//! the fields the destination iport's first stage reads, that cross-domain
//! edges only use exported oports, and that each destination gate may watch
//! its source. Activation opens one subscription per edge in topological
//! order; each edge feeds the events it receives into the destination iport.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::dataflow::{Aggregate, FieldPath, Operator};
use crate::gate::{GateHandle, SourceSpec};
use crate::governance::{self};
use crate::model::{validate_segment, FieldType, GateAddress, Permission, Schema};
use crate::resolution::{resolve_cross, PeeringTable, SharedRegistry};
use crate::wire::{
    GateIdentity, KeyLookup, KillSwitch, Network, RemoteSubscription, SessionConfig, WireClient, WireError,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CircuitError {
    #[error("invalid circuit spec: {0}")]
    InvalidSpec(String),
    #[error("circuit {} failed verification", .0.circuit)]
    NotVerified(Box<VerificationReport>),
    #[error("activation failed on edge {edge}: {cause}")]
    ActivationFailed { edge: usize, cause: String },
    #[error("no edge {0}")]
    UnknownEdge(usize),
    #[error("edge {0} is not degraded")]
    NotDegraded(usize),
    #[error("reconnecting edge {edge} failed: {cause}")]
    ReconnectFailed { edge: usize, cause: String },
    #[error("circuit not quiescent after {0:?}: {1}")]
    Timeout(Duration, String),
}

/// A wire from a source oport into a destination iport. Without `from`, the
/// source is whatever the destination iport's declared source resolves to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<GateAddress>,
    pub to: GateAddress,
    pub iport: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawCircuitSpec", into = "RawCircuitSpec")]
pub struct CircuitSpec {
    name: String,
    edges: Vec<EdgeSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCircuitSpec {
    name: String,
    edges: Vec<EdgeSpec>,
}

impl TryFrom<RawCircuitSpec> for CircuitSpec {
    type Error = CircuitError;
    fn try_from(r: RawCircuitSpec) -> Result<Self, CircuitError> {
        CircuitSpec::new(&r.name, r.edges)
    }
}

impl From<CircuitSpec> for RawCircuitSpec {
    fn from(c: CircuitSpec) -> Self {
        RawCircuitSpec {
            name: c.name,
            edges: c.edges,
        }
    }
}

impl CircuitSpec {
    pub fn new(name: &str, edges: Vec<EdgeSpec>) -> Result<Self, CircuitError> {
        validate_segment(name).map_err(|e| CircuitError::InvalidSpec(e.to_string()))?;
        if edges.is_empty() {
            return Err(CircuitError::InvalidSpec(format!("circuit {name} has no edges")));
        }
        let mut seen = BTreeSet::new();
        for e in &edges {
            if e.to.oport().is_some() {
                return Err(CircuitError::InvalidSpec(format!(
                    "edge destination {} names an oport",
                    e.to
                )));
            }
            if let Some(from) = &e.from {
                if from.oport().is_none() {
                    return Err(CircuitError::InvalidSpec(format!("edge source {from} names no oport")));
                }
            }
            validate_segment(&e.iport).map_err(|err| CircuitError::InvalidSpec(err.to_string()))?;
            if !seen.insert((e.from.clone(), e.to.clone(), e.iport.clone())) {
                return Err(CircuitError::InvalidSpec(format!(
                    "duplicate edge into {}/{}",
                    e.to, e.iport
                )));
            }
        }
        Ok(Self {
            name: name.to_string(),
            edges,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn edges(&self) -> &[EdgeSpec] {
        &self.edges
    }

    /// Domains of the destination gates and explicit sources.
    pub fn domains(&self) -> BTreeSet<String> {
        self.edges
            .iter()
            .flat_map(|e| e.from.iter().chain(std::iter::once(&e.to)))
            .map(|a| a.domain().to_string())
            .collect()
    }
}

/// Everything a circuit needs from its deployment.
pub struct CircuitEnv {
    pub registries: BTreeMap<String, SharedRegistry>,
    pub peers: BTreeMap<String, PeeringTable>,
    pub gates: BTreeMap<GateAddress, GateHandle>,
    pub identities: BTreeMap<GateAddress, GateIdentity>,
    pub keys: Arc<dyn KeyLookup>,
    pub network: Arc<dyn Network>,
    pub session: SessionConfig,
}

impl CircuitEnv {
    pub fn gate(&self, addr: &GateAddress) -> Option<&GateHandle> {
        self.gates.get(&addr.gate_only())
    }

    /// The source oport an edge reads from.
    pub fn resolve_source(&self, edge: &EdgeSpec) -> Result<GateAddress, String> {
        if let Some(from) = &edge.from {
            return Ok(from.clone());
        }
        let dest = self
            .gate(&edge.to)
            .ok_or_else(|| format!("gate {} is not deployed", edge.to))?;
        let iport = dest
            .spec()
            .iport(&edge.iport)
            .ok_or_else(|| format!("{} has no iport {}", edge.to, edge.iport))?;
        match &iport.source {
            None => Err(format!(
                "{}/{} declares no source and the edge names none",
                edge.to, edge.iport
            )),
            Some(SourceSpec::Address(a)) => Ok(a.clone()),
            Some(SourceSpec::Selector(sel)) => {
                let domain = edge.to.domain();
                let reg = self
                    .registries
                    .get(domain)
                    .ok_or_else(|| format!("no registry for domain {domain}"))?;
                let empty = PeeringTable::new(domain);
                let peers = self.peers.get(domain).unwrap_or(&empty);
                resolve_cross(&reg.read(), peers, dest.metadata(), sel)
                    .map_err(|e| format!("selector of {}/{} does not resolve: {e}", edge.to, edge.iport))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Resolvable,
    Acyclic,
    SchemaCompatible,
    ExportedAcrossDomains,
    WatchPermitted,
}

impl CheckKind {
    pub const ALL: [CheckKind; 5] = [
        CheckKind::Resolvable,
        CheckKind::Acyclic,
        CheckKind::SchemaCompatible,
        CheckKind::ExportedAcrossDomains,
        CheckKind::WatchPermitted,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CheckKind::Resolvable => "resolvable",
            CheckKind::Acyclic => "acyclic",
            CheckKind::SchemaCompatible => "schema_compatible",
            CheckKind::ExportedAcrossDomains => "exported_across_domains",
            CheckKind::WatchPermitted => "watch_permitted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckFailure {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckKind,
    pub passed: bool,
    pub failures: Vec<CheckFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedEdge {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<GateAddress>,
    pub to: GateAddress,
    pub iport: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub circuit: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub edges: Vec<ResolvedEdge>,
    /// Gates on a cycle, first gate repeated at the end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle: Option<Vec<GateAddress>>,
    /// Gate activation order when acyclic.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub order: Vec<GateAddress>,
}

impl VerificationReport {
    pub fn check(&self, kind: CheckKind) -> &CheckResult {
        self.checks
            .iter()
            .find(|c| c.check == kind)
            .expect("every check is reported")
    }

    pub fn failed_checks(&self) -> Vec<CheckKind> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.check).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("reports serialize")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "circuit {}: {}\n",
            self.circuit,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for c in &self.checks {
            let _ = writeln!(out, "  [{}] {}", if c.passed { "ok" } else { "FAIL" }, c.check.label());
            for f in &c.failures {
                match f.edge {
                    Some(i) => {
                        let _ = writeln!(out, "      edge {i}: {}", f.message);
                    }
                    None => {
                        let _ = writeln!(out, "      {}", f.message);
                    }
                }
            }
        }
        out
    }
}

/// Gate-level topological order, or a cycle. Ties are broken by address so
/// the order is deterministic.
fn topo_order(
    nodes: &BTreeSet<GateAddress>,
    arcs: &BTreeSet<(GateAddress, GateAddress)>,
) -> Result<Vec<GateAddress>, Vec<GateAddress>> {
    let mut indeg: BTreeMap<&GateAddress, usize> = nodes.iter().map(|n| (n, 0)).collect();
    for (_, b) in arcs {
        *indeg.get_mut(b).expect("arc ends are nodes") += 1;
    }
    let mut ready: BTreeSet<&GateAddress> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut order = Vec::new();
    while let Some(n) = ready.pop_first() {
        order.push(n.clone());
        for (_, b) in arcs.iter().filter(|(a, _)| a == n) {
            let d = indeg.get_mut(b).expect("arc ends are nodes");
            *d -= 1;
            if *d == 0 {
                ready.insert(b);
            }
        }
    }
    if order.len() == nodes.len() {
        return Ok(order);
    }
    // Every leftover node keeps a leftover predecessor, so walking backwards
    // must revisit a node.
    let done: BTreeSet<&GateAddress> = order.iter().collect();
    let left: BTreeSet<&GateAddress> = nodes.iter().filter(|n| !done.contains(n)).collect();
    let mut path: Vec<GateAddress> = vec![(*left.iter().next().expect("some node is left")).clone()];
    loop {
        let cur = path.last().expect("path is non-empty").clone();
        let prev = arcs
            .iter()
            .find(|(a, b)| *b == cur && left.contains(a))
            .map(|(a, _)| a.clone())
            .expect("every leftover node has a leftover predecessor");
        if let Some(pos) = path.iter().position(|p| *p == prev) {
            let mut cycle = vec![prev];
            cycle.extend(path[pos..].iter().rev().cloned());
            return Err(cycle);
        }
        path.push(prev);
    }
}

/// Fields the first stage of a dataflow reads, with the type each must have.
fn first_stage_requirements(op: &Operator) -> Vec<(FieldPath, Requirement)> {
    match op {
        Operator::Filter { path, value, .. } => vec![(path.clone(), Requirement::ComparableWith(value.clone()))],
        Operator::Project { paths } => paths.iter().map(|p| (p.clone(), Requirement::Exists)).collect(),
        Operator::Sort { path, .. } => vec![(path.clone(), Requirement::Scalar)],
        Operator::Join { left_path, .. } => vec![(left_path.clone(), Requirement::Scalar)],
        Operator::Window { function, path, .. } => match function {
            Aggregate::Count => vec![],
            _ => vec![(path.clone(), Requirement::Numeric)],
        },
    }
}

#[derive(Debug, Clone)]
enum Requirement {
    Exists,
    Scalar,
    Numeric,
    ComparableWith(serde_json::Value),
}

fn field_compatible(schema: &Schema, path: &FieldPath, req: &Requirement) -> Result<(), String> {
    let Some(field) = schema.field(path.head()) else {
        return Err(format!("field {} is not in the source schema", path.head()));
    };
    let ty = if path.segments().len() > 1 {
        if field.ty != FieldType::Map {
            return Err(format!("{path} descends into {} of type {:?}", field.name, field.ty));
        }
        // Nested fields are untyped in schemas; only the container is checked.
        return Ok(());
    } else {
        field.ty
    };
    let ok = match req {
        Requirement::Exists => true,
        Requirement::Scalar => ty.is_scalar(),
        Requirement::Numeric => ty.is_numeric(),
        Requirement::ComparableWith(v) => match v {
            serde_json::Value::Number(_) => ty.is_numeric(),
            serde_json::Value::String(_) => ty == FieldType::String,
            serde_json::Value::Bool(_) => ty == FieldType::Bool,
            _ => false,
        },
    };
    if ok {
        Ok(())
    } else {
        Err(format!("field {path} has type {ty:?}, incompatible with its use"))
    }
}

/// Runs all five checks. Edges whose endpoints cannot be resolved only fail
/// the resolvability check.
pub fn verify(spec: &CircuitSpec, env: &CircuitEnv) -> VerificationReport {
    let mut results: BTreeMap<CheckKind, Vec<CheckFailure>> = CheckKind::ALL.iter().map(|k| (*k, Vec::new())).collect();
    let mut fail = |kind: CheckKind, edge: Option<usize>, message: String| {
        results
            .get_mut(&kind)
            .expect("all kinds present")
            .push(CheckFailure { edge, message });
    };
    let mut resolved = Vec::new();
    let mut usable = Vec::new();
    for (i, e) in spec.edges.iter().enumerate() {
        let from = match env.resolve_source(e) {
            Ok(a) => Some(a),
            Err(m) => {
                fail(CheckKind::Resolvable, Some(i), m);
                None
            }
        };
        resolved.push(ResolvedEdge {
            index: i,
            from: from.clone(),
            to: e.to.clone(),
            iport: e.iport.clone(),
        });
        let Some(from) = from else { continue };
        let mut ok = true;
        let oport = from.oport().unwrap_or_default();
        let src_meta = env
            .registries
            .get(from.domain())
            .and_then(|r| r.read().lookup(from.gate()).cloned());
        match &src_meta {
            None => {
                fail(
                    CheckKind::Resolvable,
                    Some(i),
                    format!("{} is not registered in domain {}", from.gate_only(), from.domain()),
                );
                ok = false;
            }
            Some(m) if !m.oports.contains_key(oport) => {
                fail(
                    CheckKind::Resolvable,
                    Some(i),
                    format!("{} publishes no oport {oport}", from.gate_only()),
                );
                ok = false;
            }
            _ => {}
        }
        if env.gate(&from).is_none() {
            fail(
                CheckKind::Resolvable,
                Some(i),
                format!("source gate {} is not deployed", from.gate_only()),
            );
            ok = false;
        }
        let dest_registered = env
            .registries
            .get(e.to.domain())
            .is_some_and(|r| r.read().lookup(e.to.gate()).is_some());
        if !dest_registered {
            fail(
                CheckKind::Resolvable,
                Some(i),
                format!("{} is not registered in domain {}", e.to, e.to.domain()),
            );
            ok = false;
        }
        match env.gate(&e.to) {
            None => {
                fail(
                    CheckKind::Resolvable,
                    Some(i),
                    format!("destination gate {} is not deployed", e.to),
                );
                ok = false;
            }
            Some(g) if g.spec().iport(&e.iport).is_none() => {
                fail(
                    CheckKind::Resolvable,
                    Some(i),
                    format!("{} has no iport {}", e.to, e.iport),
                );
                ok = false;
            }
            _ => {}
        }
        if ok {
            usable.push((i, from));
        }
    }

    let mut nodes = BTreeSet::new();
    let mut arcs = BTreeSet::new();
    for (i, from) in &usable {
        let (a, b) = (from.gate_only(), spec.edges[*i].to.clone());
        nodes.insert(a.clone());
        nodes.insert(b.clone());
        arcs.insert((a, b));
    }
    let (order, cycle) = match topo_order(&nodes, &arcs) {
        Ok(order) => (order, None),
        Err(cycle) => {
            let names: Vec<String> = cycle.iter().map(ToString::to_string).collect();
            fail(CheckKind::Acyclic, None, format!("cycle {}", names.join(" -> ")));
            (Vec::new(), Some(cycle))
        }
    };

    for (i, from) in &usable {
        let e = &spec.edges[*i];
        let src = env.gate(from).expect("usable edges have deployed sources");
        let dst = env.gate(&e.to).expect("usable edges have deployed destinations");
        let oport_name = from.oport().expect("sources name an oport");
        let src_oport = src.spec().oport(oport_name).expect("checked above");

        let iport = dst.spec().iport(&e.iport).expect("checked above");
        if let Some(first) = iport.dataflow.stages().first() {
            for (path, req) in first_stage_requirements(first) {
                if let Err(m) = field_compatible(&src_oport.schema, &path, &req) {
                    fail(
                        CheckKind::SchemaCompatible,
                        Some(*i),
                        format!("{from} -> {}/{}: {m}", e.to, e.iport),
                    );
                }
            }
        }

        if from.domain() != e.to.domain() && !src_oport.exported {
            fail(
                CheckKind::ExportedAcrossDomains,
                Some(*i),
                format!("{from} is not exported but feeds {} in domain {}", e.to, e.to.domain()),
            );
        }

        let principal = dst.spec().principal();
        if !governance::check(&src_oport.policy, &principal, oport_name, Permission::Watch).is_allow() {
            fail(
                CheckKind::WatchPermitted,
                Some(*i),
                format!("{} may not watch {from}", principal.id),
            );
        }
    }

    let checks: Vec<CheckResult> = results
        .into_iter()
        .map(|(check, failures)| CheckResult {
            check,
            passed: failures.is_empty(),
            failures,
        })
        .collect();
    VerificationReport {
        circuit: spec.name.clone(),
        passed: checks.iter().all(|c| c.passed),
        checks,
        edges: resolved,
        cycle,
        order,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeSession {
    Opening,
    Open,
    Degraded,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CircuitState {
    Running,
    Degraded,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeStatus {
    pub index: usize,
    pub from: GateAddress,
    pub to: GateAddress,
    pub iport: String,
    pub session: EdgeSession,
    pub high_water: u64,
    pub groups: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateStatus {
    pub address: GateAddress,
    pub live: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitStatus {
    pub circuit: String,
    pub state: CircuitState,
    pub gates: Vec<GateStatus>,
    pub edges: Vec<EdgeStatus>,
}

impl CircuitStatus {
    pub fn degraded_edges(&self) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter(|e| e.session == EdgeSession::Degraded)
            .map(|e| e.index)
            .collect()
    }
}

struct EdgeInner {
    session: EdgeSession,
    error: Option<String>,
    kill: Option<KillSwitch>,
    driver: Option<JoinHandle<()>>,
}

struct EdgeRuntime {
    index: usize,
    from: GateAddress,
    to: GateAddress,
    iport: String,
    high_water: AtomicU64,
    groups: AtomicU64,
    inner: Mutex<EdgeInner>,
}

impl EdgeRuntime {
    fn degrade(&self, why: String, stopping: &AtomicBool) {
        let mut inner = self.inner.lock();
        if stopping.load(Ordering::SeqCst) {
            inner.session = EdgeSession::Closed;
        } else if inner.session != EdgeSession::Degraded {
            log::warn!("edge {} ({} -> {}) degraded: {why}", self.index, self.from, self.to);
            inner.session = EdgeSession::Degraded;
            inner.error = Some(why);
        }
    }
}

/// An activated circuit. Dropping it stops every edge.
pub struct RunningCircuit {
    spec: CircuitSpec,
    env: Arc<CircuitEnv>,
    edges: Vec<Arc<EdgeRuntime>>,
    /// Edge indices in activation order.
    order: Vec<usize>,
    gates: Vec<GateAddress>,
    stopping: Arc<AtomicBool>,
}

impl std::fmt::Debug for RunningCircuit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunningCircuit").field("name", &self.spec.name).finish()
    }
}

fn open_edge(env: &CircuitEnv, edge: &EdgeRuntime) -> Result<RemoteSubscription, WireError> {
    let identity = env
        .identities
        .get(&edge.to)
        .ok_or_else(|| WireError::AuthFailed(format!("no identity for {}", edge.to)))?;
    let dest = env
        .gate(&edge.to)
        .ok_or_else(|| WireError::Unreachable(edge.to.to_string()))?;
    let client = WireClient::connect(
        env.network.as_ref(),
        identity,
        env.keys.as_ref(),
        &edge.from,
        env.session,
    )?;
    let oport = edge.from.oport().expect("resolved sources name an oport");
    client.subscribe(oport, &dest.spec().principal(), edge.high_water.load(Ordering::SeqCst))
}

fn drive(edge: Arc<EdgeRuntime>, mut sub: RemoteSubscription, dest: GateHandle, stopping: Arc<AtomicBool>) {
    loop {
        let group = match sub.next_group() {
            Ok(g) => g,
            Err(e) => {
                edge.degrade(e.to_string(), &stopping);
                return;
            }
        };
        let Some(last) = group.last().map(|e| e.seq) else {
            continue;
        };
        let records: Vec<_> = group.into_iter().map(|e| e.record).collect();
        if let Err(e) = dest.ingest(&edge.iport, &records) {
            edge.degrade(format!("ingest into {}/{} failed: {e}", edge.to, edge.iport), &stopping);
            sub.kill_switch().kill();
            return;
        }
        edge.high_water.fetch_max(last, Ordering::SeqCst);
        edge.groups.fetch_add(1, Ordering::SeqCst);
        if let Err(e) = sub.ack(last) {
            edge.degrade(e.to_string(), &stopping);
            return;
        }
    }
}

impl RunningCircuit {
    fn start_edge(&self, edge: &Arc<EdgeRuntime>) -> Result<(), WireError> {
        let sub = open_edge(&self.env, edge)?;
        let dest = self
            .env
            .gate(&edge.to)
            .expect("verified destinations are deployed")
            .clone();
        let mut inner = edge.inner.lock();
        inner.kill = Some(sub.kill_switch());
        inner.session = EdgeSession::Open;
        inner.error = None;
        let (e, stopping) = (edge.clone(), self.stopping.clone());
        inner.driver = Some(
            std::thread::Builder::new()
                .name(format!("edge-{}-{}", self.spec.name, edge.index))
                .spawn(move || drive(e, sub, dest, stopping))
                .map_err(|e| WireError::Io(e.to_string()))?,
        );
        Ok(())
    }

    fn stop_edge(edge: &EdgeRuntime) {
        let (kill, driver) = {
            let mut inner = edge.inner.lock();
            (inner.kill.take(), inner.driver.take())
        };
        if let Some(k) = kill {
            k.kill();
        }
        if let Some(d) = driver {
            let _ = d.join();
        }
    }

    pub fn spec(&self) -> &CircuitSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Edge indices in the order they were activated.
    pub fn activation_order(&self) -> &[usize] {
        &self.order
    }

    /// Resolved source oport of an edge.
    pub fn edge_source(&self, edge: usize) -> Option<&GateAddress> {
        self.edges.get(edge).map(|e| &e.from)
    }

    pub fn status(&self) -> CircuitStatus {
        let edges: Vec<EdgeStatus> = self
            .edges
            .iter()
            .map(|e| {
                let inner = e.inner.lock();
                EdgeStatus {
                    index: e.index,
                    from: e.from.clone(),
                    to: e.to.clone(),
                    iport: e.iport.clone(),
                    session: inner.session,
                    high_water: e.high_water.load(Ordering::SeqCst),
                    groups: e.groups.load(Ordering::SeqCst),
                    error: inner.error.clone(),
                }
            })
            .collect();
        let state = if self.stopping.load(Ordering::SeqCst) {
            CircuitState::Stopped
        } else if edges.iter().all(|e| e.session == EdgeSession::Open) {
            CircuitState::Running
        } else {
            CircuitState::Degraded
        };
        CircuitStatus {
            circuit: self.spec.name.clone(),
            state,
            gates: self
                .gates
                .iter()
                .map(|g| GateStatus {
                    address: g.clone(),
                    live: self.env.gate(g).is_some_and(|h| !h.is_closed()),
                })
                .collect(),
            edges,
        }
    }

    /// Severs the transport of one edge; the edge is reported degraded.
    pub fn inject_fault(&self, edge: usize) -> Result<(), CircuitError> {
        let e = self.edges.get(edge).ok_or(CircuitError::UnknownEdge(edge))?;
        {
            let mut inner = e.inner.lock();
            inner.session = EdgeSession::Degraded;
            inner.error = Some("injected fault".into());
        }
        Self::stop_edge(e);
        Ok(())
    }

    /// Re-establishes a degraded edge, resuming after its high-water mark.
    pub fn reconnect(&self, edge: usize) -> Result<(), CircuitError> {
        let e = self.edges.get(edge).ok_or(CircuitError::UnknownEdge(edge))?;
        if e.inner.lock().session != EdgeSession::Degraded {
            return Err(CircuitError::NotDegraded(edge));
        }
        Self::stop_edge(e);
        self.start_edge(e).map_err(|err| {
            e.inner.lock().error = Some(err.to_string());
            CircuitError::ReconnectFailed {
                edge,
                cause: err.to_string(),
            }
        })
    }

    /// Waits until every open edge has delivered everything its source oport
    /// has published. Degraded and closed edges are skipped.
    pub fn wait_quiescent(&self, timeout: Duration) -> Result<(), CircuitError> {
        let deadline = Instant::now() + timeout;
        loop {
            let mut lagging = Vec::new();
            for &i in &self.order {
                let e = &self.edges[i];
                if e.inner.lock().session != EdgeSession::Open {
                    continue;
                }
                let src = self.env.gate(&e.from).expect("verified sources are deployed");
                let published = src
                    .last_seq(e.from.oport().expect("sources name an oport"))
                    .unwrap_or(0);
                let hw = e.high_water.load(Ordering::SeqCst);
                if hw < published {
                    lagging.push(format!("edge {i} at {hw} of {published}"));
                }
            }
            if lagging.is_empty() {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(CircuitError::Timeout(timeout, lagging.join(", ")));
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    pub fn stop(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        for e in &self.edges {
            Self::stop_edge(e);
            e.inner.lock().session = EdgeSession::Closed;
        }
    }
}

impl Drop for RunningCircuit {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Attempts an authenticated handshake for every resolvable edge, as the
/// destination gate, and reports the edges that fail.
pub fn probe(spec: &CircuitSpec, env: &CircuitEnv) -> BTreeMap<usize, WireError> {
    let mut failed = BTreeMap::new();
    for (i, e) in spec.edges.iter().enumerate() {
        let Ok(from) = env.resolve_source(e) else { continue };
        let Some(identity) = env.identities.get(&e.to) else {
            failed.insert(i, WireError::AuthFailed(format!("no identity for {}", e.to)));
            continue;
        };
        match WireClient::connect(env.network.as_ref(), identity, env.keys.as_ref(), &from, env.session) {
            Ok(client) => client.close(),
            Err(err) => {
                failed.insert(i, err);
            }
        }
    }
    failed
}

/// Verifies the circuit and opens its edges in topological order. On any
/// failure the edges opened so far are closed again.
pub fn activate(spec: &CircuitSpec, env: Arc<CircuitEnv>) -> Result<RunningCircuit, CircuitError> {
    let report = verify(spec, &env);
    if !report.passed {
        return Err(CircuitError::NotVerified(Box::new(report)));
    }
    let rank: BTreeMap<&GateAddress, usize> = report.order.iter().enumerate().map(|(i, g)| (g, i)).collect();
    let edges: Vec<Arc<EdgeRuntime>> = report
        .edges
        .iter()
        .map(|r| {
            Arc::new(EdgeRuntime {
                index: r.index,
                from: r.from.clone().expect("verified edges are resolved"),
                to: r.to.clone(),
                iport: r.iport.clone(),
                high_water: AtomicU64::new(0),
                groups: AtomicU64::new(0),
                inner: Mutex::new(EdgeInner {
                    session: EdgeSession::Opening,
                    error: None,
                    kill: None,
                    driver: None,
                }),
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&i| (rank[&edges[i].from.gate_only()], rank[&edges[i].to], i));
    let mut circuit = RunningCircuit {
        spec: spec.clone(),
        env,
        edges,
        order: order.clone(),
        gates: report.order.clone(),
        stopping: Arc::new(AtomicBool::new(false)),
    };
    for &i in &order {
        if let Err(e) = circuit.start_edge(&circuit.edges[i].clone()) {
            circuit.stop();
            return Err(CircuitError::ActivationFailed {
                edge: i,
                cause: e.to_string(),
            });
        }
    }
    log::info!("circuit {} running with {} edges", spec.name, order.len());
    Ok(circuit)
}
