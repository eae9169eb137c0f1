//! RBAC decisions, the provenance ledger, and static governance rules.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{DataRecord, GateAddress, GateMetadata, Permission, Policy, Principal, RecordId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GovernanceError {
    #[error("unknown record {0}")]
    UnknownRecord(RecordId),
    #[error("record {0} lists itself in its lineage")]
    SelfReference(RecordId),
    #[error("record {0} is already recorded with a different lineage")]
    LineageConflict(RecordId),
    #[error("appending {0} would close a lineage cycle")]
    Cycle(RecordId),
    #[error("invalid governance rule: {0}")]
    InvalidRule(String),
    #[error("malformed ledger line {line}: {reason}")]
    MalformedLedger { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Deny,
}

impl Decision {
    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

/// Default-deny RBAC: allow iff some role of the principal is granted `perm` on `oport`.
pub fn check(policy: &Policy, principal: &Principal, oport: &str, perm: Permission) -> Decision {
    let granted = policy
        .entries()
        .iter()
        .any(|e| e.oport == oport && principal.roles.contains(&e.role) && e.permissions.contains(&perm));
    if granted {
        Decision::Allow
    } else {
        Decision::Deny
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    /// First seen as a record without lineage, entering through an iport.
    Source,
    /// Arrived with lineage minted elsewhere (typically another domain).
    Imported,
    /// Minted by a dataflow stage on this gate.
    Derived,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub record: RecordId,
    pub lineage: BTreeSet<RecordId>,
    pub gate: GateAddress,
    pub port: String,
    pub ts: u64,
    pub origin: Origin,
}

impl LedgerEntry {
    pub fn for_record(record: &DataRecord, gate: &GateAddress, port: &str, origin: Origin) -> Self {
        Self {
            record: record.id(),
            lineage: record.lineage().clone(),
            gate: gate.gate_only(),
            port: port.to_string(),
            ts: record.ts(),
            origin,
        }
    }
}

/// Append-only map from record id to its provenance.
#[derive(Debug, Clone, Default)]
pub struct ProvenanceLedger {
    entries: HashMap<RecordId, LedgerEntry>,
    order: Vec<RecordId>,
}

impl ProvenanceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, id: &RecordId) -> Option<&LedgerEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.order.iter().map(|id| &self.entries[id])
    }

    /// Appends an entry. Returns `Ok(false)` when the same record is already
    /// present with identical lineage.
    pub fn append(&mut self, entry: LedgerEntry) -> Result<bool, GovernanceError> {
        let id = entry.record;
        if entry.lineage.contains(&id) {
            return Err(GovernanceError::SelfReference(id));
        }
        if let Some(existing) = self.entries.get(&id) {
            return if existing.lineage == entry.lineage {
                Ok(false)
            } else {
                Err(GovernanceError::LineageConflict(id))
            };
        }
        if self.reaches(&entry.lineage, id) {
            return Err(GovernanceError::Cycle(id));
        }
        self.order.push(id);
        self.entries.insert(id, entry);
        Ok(true)
    }

    fn reaches(&self, from: &BTreeSet<RecordId>, target: RecordId) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<RecordId> = from.iter().copied().collect();
        while let Some(id) = stack.pop() {
            if id == target {
                return true;
            }
            if !seen.insert(id) {
                continue;
            }
            if let Some(e) = self.entries.get(&id) {
                stack.extend(e.lineage.iter().copied());
            }
        }
        false
    }

    /// One JSON entry per line, in append order.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(e).expect("ledger entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self, GovernanceError> {
        let mut ledger = Self::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: LedgerEntry = serde_json::from_str(line).map_err(|e| GovernanceError::MalformedLedger {
                line: i + 1,
                reason: e.to_string(),
            })?;
            ledger.append(entry)?;
        }
        Ok(ledger)
    }
}

/// Read access to provenance entries, from one ledger or several.
pub trait ProvenanceSource {
    fn lookup(&self, id: &RecordId) -> Option<&LedgerEntry>;
}

impl ProvenanceSource for ProvenanceLedger {
    fn lookup(&self, id: &RecordId) -> Option<&LedgerEntry> {
        self.get(id)
    }
}

/// Several domain ledgers viewed together. Entries minted or first seen in
/// a domain take precedence over imported copies.
impl ProvenanceSource for [&ProvenanceLedger] {
    fn lookup(&self, id: &RecordId) -> Option<&LedgerEntry> {
        let mut fallback = None;
        for l in self {
            if let Some(e) = l.get(id) {
                if e.origin != Origin::Imported {
                    return Some(e);
                }
                fallback.get_or_insert(e);
            }
        }
        fallback
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceNode {
    pub record: RecordId,
    /// `None` for ids referenced by lineage but absent from every ledger.
    pub entry: Option<LedgerEntry>,
}

/// Ancestor DAG of one record. Edges point from a record to each id in its lineage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvenanceDag {
    pub root: RecordId,
    pub nodes: BTreeMap<RecordId, TraceNode>,
    pub edges: BTreeSet<(RecordId, RecordId)>,
}

impl ProvenanceDag {
    /// Nodes with no lineage of their own.
    pub fn leaves(&self) -> BTreeSet<RecordId> {
        let parents: BTreeSet<RecordId> = self.edges.iter().map(|(child, _)| *child).collect();
        self.nodes.keys().filter(|id| !parents.contains(id)).copied().collect()
    }

    pub fn derived_nodes(&self) -> usize {
        self.nodes.len() - self.leaves().len()
    }
}

pub fn trace<S: ProvenanceSource + ?Sized>(source: &S, record: RecordId) -> Result<ProvenanceDag, GovernanceError> {
    let root_entry = source.lookup(&record).ok_or(GovernanceError::UnknownRecord(record))?;
    let mut nodes = BTreeMap::new();
    let mut edges = BTreeSet::new();
    let mut queue = VecDeque::new();
    nodes.insert(
        record,
        TraceNode {
            record,
            entry: Some(root_entry.clone()),
        },
    );
    queue.push_back(record);
    while let Some(id) = queue.pop_front() {
        let Some(entry) = nodes[&id].entry.clone() else {
            continue;
        };
        for parent in &entry.lineage {
            edges.insert((id, *parent));
            if !nodes.contains_key(parent) {
                nodes.insert(
                    *parent,
                    TraceNode {
                        record: *parent,
                        entry: source.lookup(parent).cloned(),
                    },
                );
                queue.push_back(*parent);
            }
        }
    }
    Ok(ProvenanceDag {
        root: record,
        nodes,
        edges,
    })
}

/// Length of the longest lineage chain ending at `id`; unknown ids count as sources.
pub fn lineage_depth<S: ProvenanceSource + ?Sized>(source: &S, id: RecordId) -> usize {
    fn go<S: ProvenanceSource + ?Sized>(s: &S, id: RecordId, memo: &mut HashMap<RecordId, usize>) -> usize {
        if let Some(d) = memo.get(&id) {
            return *d;
        }
        let d = match s.lookup(&id) {
            Some(e) if !e.lineage.is_empty() => 1 + e.lineage.iter().map(|p| go(s, *p, memo)).max().unwrap_or(0),
            _ => 0,
        };
        memo.insert(id, d);
        d
    }
    go(source, id, &mut HashMap::new())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum GovernanceRule {
    MaxLineageDepth { n: usize },
    RequireField { oport: GateAddress, field: String },
    ForbidExportTag { tag: String },
}

impl GovernanceRule {
    pub fn validate(&self) -> Result<(), GovernanceError> {
        match self {
            GovernanceRule::MaxLineageDepth { n: 0 } => {
                Err(GovernanceError::InvalidRule("max_lineage_depth needs n >= 1".into()))
            }
            GovernanceRule::RequireField { oport, .. } if oport.oport().is_none() => Err(GovernanceError::InvalidRule(
                format!("require_field target {oport} does not name an oport"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for GovernanceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GovernanceRule::MaxLineageDepth { n } => write!(f, "max_lineage_depth({n})"),
            GovernanceRule::RequireField { oport, field } => write!(f, "require_field({oport}, {field})"),
            GovernanceRule::ForbidExportTag { tag } => write!(f, "forbid_export_tag({tag})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateAddress>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oport: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<RecordId>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_compliant(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every rule against the deployment's gate metadata and provenance.
pub fn audit<S: ProvenanceSource + ?Sized>(
    rules: &[GovernanceRule],
    gates: &[GateMetadata],
    records: &[RecordId],
    provenance: &S,
) -> Result<AuditReport, GovernanceError> {
    let mut violations = Vec::new();
    for rule in rules {
        rule.validate()?;
        match rule {
            GovernanceRule::MaxLineageDepth { n } => {
                let mut memo_ids = BTreeSet::new();
                for id in records {
                    if !memo_ids.insert(*id) {
                        continue;
                    }
                    let depth = lineage_depth(provenance, *id);
                    if depth > *n {
                        let entry = provenance.lookup(id);
                        violations.push(Violation {
                            rule: rule.to_string(),
                            gate: entry.map(|e| e.gate.clone()),
                            oport: None,
                            record: Some(*id),
                            detail: format!("lineage depth {depth} exceeds {n}"),
                        });
                    }
                }
            }
            GovernanceRule::RequireField { oport, field } => {
                let gate = oport.gate_only();
                let name = oport.oport().expect("validated");
                let schema = gates
                    .iter()
                    .find(|g| g.address == gate)
                    .and_then(|g| g.oports.get(name))
                    .map(|o| &o.schema);
                let detail = match schema {
                    None => Some(format!("oport {oport} does not exist")),
                    Some(s) => match s.field(field) {
                        Some(f) if f.required => None,
                        Some(_) => Some(format!("field {field:?} is optional")),
                        None => Some(format!("field {field:?} is not in the schema")),
                    },
                };
                if let Some(detail) = detail {
                    violations.push(Violation {
                        rule: rule.to_string(),
                        gate: Some(gate),
                        oport: Some(name.to_string()),
                        record: None,
                        detail,
                    });
                }
            }
            GovernanceRule::ForbidExportTag { tag } => {
                for g in gates {
                    for (name, o) in &g.oports {
                        if o.exported && g.effective_tags(name).contains_key(tag) {
                            violations.push(Violation {
                                rule: rule.to_string(),
                                gate: Some(g.address.clone()),
                                oport: Some(name.clone()),
                                record: None,
                                detail: format!("exported oport carries tag {tag:?}"),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(AuditReport { violations })
}
