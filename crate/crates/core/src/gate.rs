//! Gate runtime: ingestion through iports, the store, oport views, and the
//! query/watch interfaces.
//!
//! Every gate is both a consumer (iports) and a contributor (oports); there is
//! no separate source or sink kind. Views are recomputed from the full store
//! after each ingest. Each recomputation that surfaces new view records
//! publishes them as one group of events with consecutive sequence numbers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataflow::{apply_dataflow_observed, apply_operator, BatchRef, Dataflow, DataflowError, Operator};
use crate::governance::{self, GovernanceError, LedgerEntry, Origin, ProvenanceLedger};
use crate::model::{
    conforms, validate_segment, DataRecord, GateAddress, GateMetadata, OPortMetadata, Permission, Policy, Principal,
    RecordId, Schema,
};
use crate::resolution::Selector;
use crate::store::{open_store, DataStore, StoreBackend, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("invalid gate spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("unknown iport {0:?}")]
    UnknownIPort(String),
    #[error("unknown oport {0:?}")]
    UnknownOPort(String),
    #[error("access denied: {principal} lacks {perm} on {oport}")]
    AccessDenied {
        principal: String,
        oport: String,
        perm: Permission,
    },
    #[error("query filter must be a filter operator")]
    InvalidFilter,
    #[error(transparent)]
    Dataflow(#[from] DataflowError),
    #[error(transparent)]
    Provenance(#[from] GovernanceError),
    #[error("gate is shut down")]
    Closed,
}

impl GateError {
    pub fn is_store_unavailable(&self) -> bool {
        matches!(self, GateError::Store(StoreError::Unavailable { .. }))
    }
}

/// Where an iport's records come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourceSpec {
    Address(GateAddress),
    Selector(Selector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IPortSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceSpec>,
    #[serde(default)]
    pub dataflow: Dataflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OPortSpec {
    pub name: String,
    pub schema: Schema,
    #[serde(default)]
    pub view: Dataflow,
    #[serde(default)]
    pub exported: bool,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

/// Declarative gate description. The published metadata is derived from the
/// address, description, tags and oport declarations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGateSpec", into = "RawGateSpec")]
pub struct GateSpec {
    address: GateAddress,
    metadata: GateMetadata,
    iports: Vec<IPortSpec>,
    oports: Vec<OPortSpec>,
    store: StoreBackend,
    roles: BTreeSet<String>,
    tables: BTreeMap<String, Vec<Value>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGateSpec {
    address: GateAddress,
    #[serde(default)]
    description: String,
    #[serde(default)]
    tags: BTreeMap<String, String>,
    #[serde(default)]
    roles: BTreeSet<String>,
    #[serde(default)]
    iports: Vec<IPortSpec>,
    #[serde(default)]
    oports: Vec<OPortSpec>,
    #[serde(default)]
    store: StoreBackend,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tables: BTreeMap<String, Vec<Value>>,
}

impl TryFrom<RawGateSpec> for GateSpec {
    type Error = GateError;
    fn try_from(r: RawGateSpec) -> Result<Self, GateError> {
        GateSpec::builder(r.address, r.description, r.tags)
            .roles(r.roles)
            .iports(r.iports)
            .oports(r.oports)
            .store(r.store)
            .tables(r.tables)
            .build()
    }
}

impl From<GateSpec> for RawGateSpec {
    fn from(s: GateSpec) -> Self {
        RawGateSpec {
            address: s.address,
            description: s.metadata.description,
            tags: s.metadata.tags,
            roles: s.roles,
            iports: s.iports,
            oports: s.oports,
            store: s.store,
            tables: s.tables,
        }
    }
}

pub struct GateSpecBuilder {
    address: GateAddress,
    description: String,
    tags: BTreeMap<String, String>,
    iports: Vec<IPortSpec>,
    oports: Vec<OPortSpec>,
    store: StoreBackend,
    roles: BTreeSet<String>,
    tables: BTreeMap<String, Vec<Value>>,
}

impl GateSpecBuilder {
    pub fn iports(mut self, iports: Vec<IPortSpec>) -> Self {
        self.iports = iports;
        self
    }

    pub fn iport(mut self, iport: IPortSpec) -> Self {
        self.iports.push(iport);
        self
    }

    pub fn oports(mut self, oports: Vec<OPortSpec>) -> Self {
        self.oports = oports;
        self
    }

    pub fn oport(mut self, oport: OPortSpec) -> Self {
        self.oports.push(oport);
        self
    }

    pub fn store(mut self, store: StoreBackend) -> Self {
        self.store = store;
        self
    }

    pub fn roles<I: IntoIterator<Item = S>, S: Into<String>>(mut self, roles: I) -> Self {
        self.roles = roles.into_iter().map(Into::into).collect();
        self
    }

    pub fn tables(mut self, tables: BTreeMap<String, Vec<Value>>) -> Self {
        self.tables = tables;
        self
    }

    pub fn table(mut self, name: &str, rows: Vec<Value>) -> Self {
        self.tables.insert(name.to_string(), rows);
        self
    }

    pub fn build(self) -> Result<GateSpec, GateError> {
        let invalid = |m: String| GateError::InvalidSpec(m);
        if self.address.oport().is_some() {
            return Err(invalid(format!("gate address {} must not name an oport", self.address)));
        }
        let mut names = BTreeSet::new();
        for ip in &self.iports {
            validate_segment(&ip.name).map_err(|e| invalid(e.to_string()))?;
            if !names.insert(ip.name.as_str()) {
                return Err(invalid(format!("duplicate iport {:?}", ip.name)));
            }
        }
        let mut oports = BTreeMap::new();
        for op in &self.oports {
            validate_segment(&op.name).map_err(|e| invalid(e.to_string()))?;
            let meta = OPortMetadata {
                schema: op.schema.clone(),
                exported: op.exported,
                tags: op.tags.clone(),
            };
            if oports.insert(op.name.clone(), meta).is_some() {
                return Err(invalid(format!("duplicate oport {:?}", op.name)));
            }
            for e in op.policy.entries() {
                if e.oport != op.name {
                    return Err(invalid(format!(
                        "policy of oport {:?} grants on {:?}",
                        op.name, e.oport
                    )));
                }
            }
        }
        for (i, ip) in self.iports.iter().enumerate() {
            for src in ip.dataflow.join_sources() {
                check_join_ref(src, &self.tables, &oports)
                    .map_err(|m| invalid(format!("iport {}: {m}", self.iports[i].name)))?;
            }
        }
        for op in &self.oports {
            for src in op.view.join_sources() {
                check_join_ref(src, &self.tables, &oports).map_err(|m| invalid(format!("oport {}: {m}", op.name)))?;
            }
        }
        let metadata = GateMetadata {
            address: self.address.clone(),
            description: self.description,
            tags: self.tags,
            oports,
        };
        metadata.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(GateSpec {
            address: self.address,
            metadata,
            iports: self.iports,
            oports: self.oports,
            store: self.store,
            roles: self.roles,
            tables: self.tables,
        })
    }
}

fn check_join_ref(
    src: &BatchRef,
    tables: &BTreeMap<String, Vec<Value>>,
    oports: &BTreeMap<String, OPortMetadata>,
) -> Result<(), String> {
    let known = match src {
        BatchRef::Table(t) => tables.contains_key(t),
        BatchRef::OPort(o) => oports.contains_key(o),
    };
    if known {
        Ok(())
    } else {
        Err(format!("join source {src} is not declared"))
    }
}

impl GateSpec {
    pub fn builder(address: GateAddress, description: String, tags: BTreeMap<String, String>) -> GateSpecBuilder {
        GateSpecBuilder {
            address,
            description,
            tags,
            iports: Vec::new(),
            oports: Vec::new(),
            store: StoreBackend::Memory,
            roles: BTreeSet::new(),
            tables: BTreeMap::new(),
        }
    }

    pub fn address(&self) -> &GateAddress {
        &self.address
    }

    pub fn metadata(&self) -> &GateMetadata {
        &self.metadata
    }

    pub fn iports(&self) -> &[IPortSpec] {
        &self.iports
    }

    pub fn oports(&self) -> &[OPortSpec] {
        &self.oports
    }

    pub fn iport(&self, name: &str) -> Option<&IPortSpec> {
        self.iports.iter().find(|i| i.name == name)
    }

    pub fn oport(&self, name: &str) -> Option<&OPortSpec> {
        self.oports.iter().find(|o| o.name == name)
    }

    pub fn store_backend(&self) -> &StoreBackend {
        &self.store
    }

    pub fn roles(&self) -> &BTreeSet<String> {
        &self.roles
    }

    /// The identity this gate presents when it consumes another gate's oport.
    pub fn principal(&self) -> Principal {
        Principal {
            id: self.address.to_string(),
            roles: self.roles.clone(),
        }
    }

    pub fn with_store(mut self, store: StoreBackend) -> Self {
        self.store = store;
        self
    }

    /// Rows of a reference table as records with ids derived from the gate,
    /// table name and row position.
    pub fn table_records(&self, name: &str) -> Option<Vec<DataRecord>> {
        let rows = self.tables.get(name)?;
        Some(
            rows.iter()
                .enumerate()
                .map(|(i, row)| {
                    let id = RecordId::derive(&format!("table/{}/{name}/{i}", self.address), &[], row);
                    DataRecord::source(id, 0, row.clone()).expect("table rows are shallow")
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEvent {
    pub seq: u64,
    pub record: DataRecord,
}

#[derive(Debug, Clone)]
struct LoggedEvent {
    event: ViewEvent,
    group: u64,
}

#[derive(Debug, Default)]
struct ViewState {
    log: Vec<LoggedEvent>,
    published: HashMap<RecordId, u64>,
    current: Vec<ViewEvent>,
    dropped: usize,
    groups: u64,
}

impl ViewState {
    fn last_seq(&self) -> u64 {
        self.log.len() as u64
    }
}

/// Materialized oport view: current records, each tagged with the sequence
/// number of the event that first published it.
#[derive(Debug, Clone, PartialEq)]
pub struct OPortView {
    pub oport: String,
    pub entries: Vec<ViewEvent>,
    /// Sequence number of the latest published event; 0 when none.
    pub seq: u64,
    /// Records dropped because they failed the oport schema.
    pub dropped: usize,
}

impl OPortView {
    pub fn records(&self) -> Vec<DataRecord> {
        self.entries.iter().map(|e| e.record.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub derived: usize,
}

struct GateState {
    store: Box<dyn DataStore>,
    views: BTreeMap<String, ViewState>,
}

pub struct Gate {
    spec: GateSpec,
    state: RwLock<GateState>,
    ledger: Option<Arc<Mutex<ProvenanceLedger>>>,
    generation: Mutex<u64>,
    published: Condvar,
    closed: AtomicBool,
}

pub type GateHandle = Arc<Gate>;

impl std::fmt::Debug for Gate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gate").field("address", &self.spec.address).finish()
    }
}

pub fn create_gate(spec: GateSpec) -> Result<GateHandle, GateError> {
    Gate::create(spec, None)
}

impl Gate {
    /// Starts a gate. A file-backed store is replayed and the views are
    /// rebuilt from it.
    pub fn create(spec: GateSpec, ledger: Option<Arc<Mutex<ProvenanceLedger>>>) -> Result<GateHandle, GateError> {
        let store = open_store(&spec.store)?;
        let views = spec
            .oports
            .iter()
            .map(|o| (o.name.clone(), ViewState::default()))
            .collect();
        let gate = Arc::new(Gate {
            spec,
            state: RwLock::new(GateState { store, views }),
            ledger,
            generation: Mutex::new(0),
            published: Condvar::new(),
            closed: AtomicBool::new(false),
        });
        {
            let mut state = gate.state.write();
            if !state.store.is_empty() {
                gate.refresh_views(&mut state)?;
            }
        }
        Ok(gate)
    }

    pub fn spec(&self) -> &GateSpec {
        &self.spec
    }

    pub fn address(&self) -> &GateAddress {
        &self.spec.address
    }

    pub fn metadata(&self) -> &GateMetadata {
        &self.spec.metadata
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    /// Stops the gate; pending and future watches end with [`GateError::Closed`].
    pub fn shutdown(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.bump();
    }

    fn bump(&self) {
        *self.generation.lock() += 1;
        self.published.notify_all();
    }

    fn resolver<'a>(&'a self, state: &'a GateState) -> impl Fn(&BatchRef) -> Option<Vec<DataRecord>> + 'a {
        move |r: &BatchRef| match r {
            BatchRef::Table(t) => self.spec.table_records(t),
            BatchRef::OPort(o) => state
                .views
                .get(o)
                .map(|v| v.current.iter().map(|e| e.record.clone()).collect()),
        }
    }

    fn record_provenance(&self, port: &str, inputs: &[DataRecord], minted: &[DataRecord]) -> Result<(), GateError> {
        let Some(ledger) = &self.ledger else {
            return Ok(());
        };
        let mut ledger = ledger.lock();
        for r in inputs {
            if ledger.get(&r.id()).is_none() {
                let origin = if r.is_source() {
                    Origin::Source
                } else {
                    Origin::Imported
                };
                ledger.append(LedgerEntry::for_record(r, &self.spec.address, port, origin))?;
            }
        }
        for r in minted {
            ledger.append(LedgerEntry::for_record(r, &self.spec.address, port, Origin::Derived))?;
        }
        Ok(())
    }

    /// Runs the iport's dataflow over `batch` and appends the derived records
    /// to the store. Raw inputs are not stored.
    pub fn ingest(&self, iport: &str, batch: &[DataRecord]) -> Result<IngestReport, GateError> {
        if self.is_closed() {
            return Err(GateError::Closed);
        }
        let spec = self
            .spec
            .iport(iport)
            .ok_or_else(|| GateError::UnknownIPort(iport.to_string()))?;
        let mut state = self.state.write();
        let mut minted = Vec::new();
        let derived = apply_dataflow_observed(&spec.dataflow, batch, self.resolver(&state), &mut |r| {
            minted.push(r.clone())
        })?;
        self.record_provenance(iport, batch, &minted)?;
        state.store.append(iport, &derived)?;
        self.refresh_views(&mut state)?;
        Ok(IngestReport {
            accepted: batch.len(),
            derived: derived.len(),
        })
    }

    fn refresh_views(&self, state: &mut GateState) -> Result<(), GateError> {
        let stored: Vec<DataRecord> = state.store.scan_all().iter().map(|s| s.record.clone()).collect();
        let mut any = false;
        for op in &self.spec.oports {
            let mut minted = Vec::new();
            let computed =
                apply_dataflow_observed(&op.view, &stored, self.resolver(state), &mut |r| minted.push(r.clone()))?;
            let view = state.views.get_mut(&op.name).expect("views match oports");
            let (conforming, nonconforming): (Vec<_>, Vec<_>) =
                computed.into_iter().partition(|r| conforms(r, &op.schema));
            view.dropped = nonconforming.len();
            let group = view.groups + 1;
            let mut current = Vec::with_capacity(conforming.len());
            let mut fresh = false;
            for record in conforming {
                let seq = match view.published.get(&record.id()) {
                    Some(seq) => *seq,
                    None => {
                        let seq = view.last_seq() + 1;
                        view.published.insert(record.id(), seq);
                        view.log.push(LoggedEvent {
                            event: ViewEvent {
                                seq,
                                record: record.clone(),
                            },
                            group,
                        });
                        fresh = true;
                        seq
                    }
                };
                current.push(ViewEvent { seq, record });
            }
            if fresh {
                view.groups = group;
                any = true;
            }
            view.current = current;
            self.record_provenance(&op.name, &[], &minted)?;
        }
        if any {
            self.bump();
        }
        Ok(())
    }

    /// The cached view of an oport.
    pub fn materialize(&self, oport: &str) -> Result<OPortView, GateError> {
        let state = self.state.read();
        let view = state
            .views
            .get(oport)
            .ok_or_else(|| GateError::UnknownOPort(oport.to_string()))?;
        Ok(OPortView {
            oport: oport.to_string(),
            entries: view.current.clone(),
            seq: view.last_seq(),
            dropped: view.dropped,
        })
    }

    /// Every event ever published on the oport, in sequence order.
    pub fn event_log(&self, oport: &str) -> Result<Vec<ViewEvent>, GateError> {
        let state = self.state.read();
        let view = state
            .views
            .get(oport)
            .ok_or_else(|| GateError::UnknownOPort(oport.to_string()))?;
        Ok(view.log.iter().map(|l| l.event.clone()).collect())
    }

    pub fn last_seq(&self, oport: &str) -> Result<u64, GateError> {
        let state = self.state.read();
        state
            .views
            .get(oport)
            .map(ViewState::last_seq)
            .ok_or_else(|| GateError::UnknownOPort(oport.to_string()))
    }

    pub fn store_len(&self) -> usize {
        self.state.read().store.len()
    }

    pub fn scan_store(&self) -> Vec<DataRecord> {
        self.state
            .read()
            .store
            .scan_all()
            .iter()
            .map(|s| s.record.clone())
            .collect()
    }

    fn authorize(&self, oport: &str, principal: &Principal, perm: Permission) -> Result<&OPortSpec, GateError> {
        let spec = self
            .spec
            .oport(oport)
            .ok_or_else(|| GateError::UnknownOPort(oport.to_string()))?;
        if !governance::check(&spec.policy, principal, oport, perm).is_allow() {
            return Err(GateError::AccessDenied {
                principal: principal.id.clone(),
                oport: oport.to_string(),
                perm,
            });
        }
        Ok(spec)
    }

    /// The oport view, optionally filtered, if the principal may query it.
    pub fn query(
        &self,
        oport: &str,
        principal: &Principal,
        filter: Option<&Operator>,
    ) -> Result<Vec<DataRecord>, GateError> {
        self.authorize(oport, principal, Permission::Query)?;
        let records = self.materialize(oport)?.records();
        match filter {
            None => Ok(records),
            Some(op @ Operator::Filter { .. }) => Ok(apply_operator(op, &records, None)?),
            Some(_) => Err(GateError::InvalidFilter),
        }
    }

    /// Subscribes to view events with `seq > from_seq`.
    pub fn watch(
        self: &Arc<Self>,
        oport: &str,
        principal: &Principal,
        from_seq: u64,
    ) -> Result<Subscription, GateError> {
        self.authorize(oport, principal, Permission::Watch)?;
        Ok(Subscription {
            gate: Arc::clone(self),
            oport: oport.to_string(),
            delivered: from_seq,
            acked: from_seq,
        })
    }

    fn next_group(&self, oport: &str, after: u64) -> Option<Vec<ViewEvent>> {
        let state = self.state.read();
        let view = state.views.get(oport)?;
        let start = after as usize;
        let first = view.log.get(start)?;
        Some(
            view.log[start..]
                .iter()
                .take_while(|l| l.group == first.group)
                .map(|l| l.event.clone())
                .collect(),
        )
    }
}

/// A cursor over an oport's event log. Events are handed out in publication
/// groups, in sequence order, each exactly once.
#[derive(Debug)]
pub struct Subscription {
    gate: GateHandle,
    oport: String,
    delivered: u64,
    acked: u64,
}

impl Subscription {
    pub fn oport(&self) -> &str {
        &self.oport
    }

    /// Sequence number of the last event handed out.
    pub fn cursor(&self) -> u64 {
        self.delivered
    }

    pub fn acked(&self) -> u64 {
        self.acked
    }

    pub fn ack(&mut self, seq: u64) {
        self.acked = self.acked.max(seq.min(self.delivered));
    }

    /// Next group of events, if one is already published.
    pub fn poll(&mut self) -> Option<Vec<ViewEvent>> {
        let group = self.gate.next_group(&self.oport, self.delivered)?;
        self.delivered = group.last().map(|e| e.seq).unwrap_or(self.delivered);
        Some(group)
    }

    /// Waits up to `timeout` for the next group; `Ok(None)` on timeout.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Vec<ViewEvent>>, GateError> {
        let deadline = Instant::now() + timeout;
        loop {
            let seen = *self.gate.generation.lock();
            if let Some(group) = self.poll() {
                return Ok(Some(group));
            }
            if self.gate.is_closed() {
                return Err(GateError::Closed);
            }
            let mut generation = self.gate.generation.lock();
            if *generation == seen && self.gate.published.wait_until(&mut generation, deadline).timed_out() {
                return Ok(None);
            }
        }
    }
}
