//! Gate resolution: per-domain registries, selector matching and
//! cross-domain lookups through peered registries.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::model::{validate_segment, DataRecord, FieldType, GateAddress, GateMetadata, ModelError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResolveError {
    #[error("no oport matches the selector")]
    NotFound,
    #[error("unknown peer domain {0:?}")]
    UnknownPeer(String),
    #[error("gate {gate} does not belong to domain {expected:?}")]
    WrongDomain { expected: String, gate: GateAddress },
    #[error("invalid selector: {0}")]
    InvalidSelector(String),
    #[error("invalid registry: {0}")]
    InvalidRegistry(String),
    #[error("remote registry failed: {0}")]
    Remote(String),
}

impl From<ModelError> for ResolveError {
    fn from(e: ModelError) -> Self {
        ResolveError::InvalidRegistry(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaRequirement {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: FieldType,
}

/// Metadata constraints an iport uses to discover a source oport.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selector {
    #[serde(default)]
    pub constraints: BTreeMap<String, String>,
    #[serde(default)]
    pub schema_requires: Vec<SchemaRequirement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_hint: Option<String>,
}

impl Selector {
    pub fn validate(&self) -> Result<(), ResolveError> {
        if self.constraints.is_empty() && self.schema_requires.is_empty() {
            return Err(ResolveError::InvalidSelector(
                "needs at least one tag constraint or schema requirement".into(),
            ));
        }
        if let Some(d) = &self.domain_hint {
            validate_segment(d).map_err(|e| ResolveError::InvalidSelector(e.to_string()))?;
        }
        Ok(())
    }

    fn matches(&self, meta: &GateMetadata, oport: &str) -> bool {
        let Some(o) = meta.oports.get(oport) else {
            return false;
        };
        let tags = meta.effective_tags(oport);
        self.constraints.iter().all(|(k, v)| tags.get(k) == Some(v))
            && self
                .schema_requires
                .iter()
                .all(|req| o.schema.field(&req.name).is_some_and(|f| f.ty == req.ty))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub metadata: GateMetadata,
    /// Hex-encoded verification key the gate authenticates wires with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification_key: Option<String>,
}

/// Registry of the gates of one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainRegistry {
    domain: String,
    entries: BTreeMap<String, RegistryEntry>,
}

impl DomainRegistry {
    pub fn new(domain: &str) -> Result<Self, ResolveError> {
        validate_segment(domain)?;
        Ok(Self {
            domain: domain.to_string(),
            entries: BTreeMap::new(),
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    /// Adds or replaces the gate's metadata. A previously registered key is kept.
    pub fn register(&mut self, meta: GateMetadata) -> Result<(), ResolveError> {
        if meta.address.domain() != self.domain {
            return Err(ResolveError::WrongDomain {
                expected: self.domain.clone(),
                gate: meta.address.clone(),
            });
        }
        meta.validate()?;
        let gate = meta.address.gate().to_string();
        let key = self.entries.remove(&gate).and_then(|e| e.verification_key);
        self.entries.insert(
            gate,
            RegistryEntry {
                metadata: meta,
                verification_key: key,
            },
        );
        Ok(())
    }

    pub fn register_key(&mut self, gate: &GateAddress, key_hex: &str) -> Result<(), ResolveError> {
        if gate.domain() != self.domain {
            return Err(ResolveError::WrongDomain {
                expected: self.domain.clone(),
                gate: gate.clone(),
            });
        }
        let entry = self
            .entries
            .get_mut(gate.gate())
            .ok_or_else(|| ResolveError::InvalidRegistry(format!("{gate} is not registered")))?;
        entry.verification_key = Some(key_hex.to_string());
        Ok(())
    }

    pub fn lookup(&self, gate: &str) -> Option<&GateMetadata> {
        self.entries.get(gate).map(|e| &e.metadata)
    }

    pub fn entry(&self, gate: &str) -> Option<&RegistryEntry> {
        self.entries.get(gate)
    }

    pub fn verification_key(&self, gate: &str) -> Option<&str> {
        self.entries.get(gate)?.verification_key.as_deref()
    }

    pub fn gates(&self) -> impl Iterator<Item = &GateMetadata> {
        self.entries.values().map(|e| &e.metadata)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries as records, one per gate, in gate-name order.
    pub fn to_records(&self) -> Vec<DataRecord> {
        self.entries
            .values()
            .map(|e| {
                let payload = serde_json::to_value(e).expect("registry entries serialize");
                let id = crate::model::RecordId::derive("registry-entry", &[], &payload);
                DataRecord::source(id, 0, payload).expect("registry payload is shallow")
            })
            .collect()
    }

    pub fn from_records(domain: &str, records: &[DataRecord]) -> Result<Self, ResolveError> {
        let mut reg = Self::new(domain)?;
        for r in records {
            let entry: RegistryEntry = serde_json::from_value(r.payload().clone())
                .map_err(|e| ResolveError::InvalidRegistry(e.to_string()))?;
            let gate = entry.metadata.address.clone();
            let key = entry.verification_key.clone();
            reg.register(entry.metadata)?;
            if let Some(k) = key {
                reg.register_key(&gate, &k)?;
            }
        }
        Ok(reg)
    }

    fn best(&self, requester: &GateMetadata, sel: &Selector, exported_only: bool) -> Result<GateAddress, ResolveError> {
        sel.validate()?;
        let mut best: Option<(usize, String, GateAddress)> = None;
        for meta in self.gates() {
            if meta.address == requester.address {
                continue;
            }
            for (name, o) in &meta.oports {
                if (exported_only && !o.exported) || !sel.matches(meta, name) {
                    continue;
                }
                let tags = meta.effective_tags(name);
                let overlap = requester.tags.iter().filter(|(k, v)| tags.get(*k) == Some(*v)).count();
                let addr = meta.address.with_oport(name)?;
                let text = addr.to_string();
                let better = match &best {
                    None => true,
                    Some((o, t, _)) => overlap > *o || (overlap == *o && text < *t),
                };
                if better {
                    best = Some((overlap, text, addr));
                }
            }
        }
        best.map(|(_, _, a)| a).ok_or(ResolveError::NotFound)
    }
}

/// Resolves a selector within one registry. Candidates are ranked by the
/// number of tags shared with the requester, then by canonical address.
/// The requester's own oports are never candidates.
pub fn resolve(reg: &DomainRegistry, requester: &GateMetadata, sel: &Selector) -> Result<GateAddress, ResolveError> {
    reg.best(requester, sel, false)
}

/// Same as [`resolve`] restricted to exported oports.
pub fn resolve_exported(
    reg: &DomainRegistry,
    requester: &GateMetadata,
    sel: &Selector,
) -> Result<GateAddress, ResolveError> {
    reg.best(requester, sel, true)
}

pub fn register(reg: &mut DomainRegistry, meta: GateMetadata) -> Result<(), ResolveError> {
    reg.register(meta)
}

/// A registry reachable for resolution queries, local or remote.
pub trait RegistryEndpoint: Send + Sync {
    fn domain(&self) -> String;

    /// Resolves on behalf of `requester`. Requesters from other domains only
    /// ever see exported oports.
    fn resolve_for(&self, requester: &GateMetadata, sel: &Selector) -> Result<GateAddress, ResolveError>;
}

/// A registry shared between concurrent readers and serialized writers.
#[derive(Debug, Clone)]
pub struct SharedRegistry(Arc<RwLock<DomainRegistry>>);

impl SharedRegistry {
    pub fn new(reg: DomainRegistry) -> Self {
        Self(Arc::new(RwLock::new(reg)))
    }

    pub fn read(&self) -> parking_lot::RwLockReadGuard<'_, DomainRegistry> {
        self.0.read()
    }

    pub fn write(&self) -> parking_lot::RwLockWriteGuard<'_, DomainRegistry> {
        self.0.write()
    }
}

impl RegistryEndpoint for SharedRegistry {
    fn domain(&self) -> String {
        self.read().domain().to_string()
    }

    fn resolve_for(&self, requester: &GateMetadata, sel: &Selector) -> Result<GateAddress, ResolveError> {
        let reg = self.read();
        reg.best(requester, sel, requester.address.domain() != reg.domain())
    }
}

/// Peer registries a domain may query, keyed by domain.
#[derive(Clone, Default)]
pub struct PeeringTable {
    local: String,
    peers: BTreeMap<String, Arc<dyn RegistryEndpoint>>,
}

impl PeeringTable {
    pub fn new(local_domain: &str) -> Self {
        Self {
            local: local_domain.to_string(),
            peers: BTreeMap::new(),
        }
    }

    pub fn add_peer(&mut self, domain: &str, endpoint: Arc<dyn RegistryEndpoint>) -> Result<(), ResolveError> {
        validate_segment(domain)?;
        if domain == self.local {
            return Err(ResolveError::InvalidRegistry(format!(
                "domain {domain} cannot peer with itself"
            )));
        }
        self.peers.insert(domain.to_string(), endpoint);
        Ok(())
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.peers.keys().map(String::as_str)
    }

    pub fn get(&self, domain: &str) -> Option<&Arc<dyn RegistryEndpoint>> {
        self.peers.get(domain)
    }
}

impl std::fmt::Debug for PeeringTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeeringTable")
            .field("local", &self.local)
            .field("peers", &self.peers.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Resolves locally first, then through peers in domain order. A domain hint
/// restricts the search to that one domain.
pub fn resolve_cross(
    local: &DomainRegistry,
    peers: &PeeringTable,
    requester: &GateMetadata,
    sel: &Selector,
) -> Result<GateAddress, ResolveError> {
    sel.validate()?;
    let local_exported_only = requester.address.domain() != local.domain();
    if let Some(hint) = &sel.domain_hint {
        if hint == local.domain() {
            return local.best(requester, sel, local_exported_only);
        }
        let peer = peers.get(hint).ok_or_else(|| ResolveError::UnknownPeer(hint.clone()))?;
        return peer.resolve_for(requester, sel);
    }
    match local.best(requester, sel, local_exported_only) {
        Err(ResolveError::NotFound) => {}
        other => return other,
    }
    for (domain, peer) in &peers.peers {
        match peer.resolve_for(requester, sel) {
            Ok(addr) => return Ok(addr),
            Err(ResolveError::NotFound) => continue,
            Err(e) => {
                log::warn!("peer {domain} failed to resolve: {e}");
                continue;
            }
        }
    }
    Err(ResolveError::NotFound)
}
