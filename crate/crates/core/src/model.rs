//! Shared data model: addresses, records, schemas, gate metadata, principals
//! and access policies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MAX_SEGMENT_LEN: usize = 64;
pub const MAX_PAYLOAD_DEPTH: usize = 32;
pub const MAX_TAGS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("malformed address {text:?}: {reason}")]
    MalformedAddress { text: String, reason: String },
    #[error("invalid name segment {0:?}")]
    InvalidSegment(String),
    #[error("malformed record id {0:?}")]
    MalformedRecordId(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid principal: {0}")]
    InvalidPrincipal(String),
}

/// Checks one name segment: non-empty, at most 64 chars of `[a-z0-9._-]`.
pub fn validate_segment(s: &str) -> Result<(), ModelError> {
    let ok = !s.is_empty()
        && s.len() <= MAX_SEGMENT_LEN
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(ModelError::InvalidSegment(s.to_string()))
    }
}

/// Hierarchical `domain/gate[/oport]` name of a gate or one of its output ports.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GateAddress {
    domain: String,
    gate: String,
    oport: Option<String>,
}

impl GateAddress {
    pub fn new(domain: &str, gate: &str, oport: Option<&str>) -> Result<Self, ModelError> {
        validate_segment(domain)?;
        validate_segment(gate)?;
        if let Some(o) = oport {
            validate_segment(o)?;
        }
        Ok(Self {
            domain: domain.to_string(),
            gate: gate.to_string(),
            oport: oport.map(str::to_string),
        })
    }

    pub fn for_gate(domain: &str, gate: &str) -> Result<Self, ModelError> {
        Self::new(domain, gate, None)
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn gate(&self) -> &str {
        &self.gate
    }

    pub fn oport(&self) -> Option<&str> {
        self.oport.as_deref()
    }

    /// The `domain/gate` part, without any oport.
    pub fn gate_only(&self) -> GateAddress {
        GateAddress {
            domain: self.domain.clone(),
            gate: self.gate.clone(),
            oport: None,
        }
    }

    pub fn with_oport(&self, oport: &str) -> Result<GateAddress, ModelError> {
        validate_segment(oport)?;
        Ok(GateAddress {
            domain: self.domain.clone(),
            gate: self.gate.clone(),
            oport: Some(oport.to_string()),
        })
    }
}

pub fn parse_address(text: &str) -> Result<GateAddress, ModelError> {
    let malformed = |reason: &str| ModelError::MalformedAddress {
        text: text.to_string(),
        reason: reason.to_string(),
    };
    let parts: Vec<&str> = text.split('/').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(malformed("expected 2 or 3 segments"));
    }
    for p in &parts {
        if p.is_empty() {
            return Err(malformed("empty segment"));
        }
        if p.len() > MAX_SEGMENT_LEN {
            return Err(malformed("segment longer than 64 characters"));
        }
        validate_segment(p).map_err(|_| malformed("illegal character"))?;
    }
    Ok(GateAddress {
        domain: parts[0].to_string(),
        gate: parts[1].to_string(),
        oport: parts.get(2).map(|s| s.to_string()),
    })
}

pub fn format_address(a: &GateAddress) -> String {
    a.to_string()
}

impl fmt::Display for GateAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.oport {
            Some(o) => write!(f, "{}/{}/{}", self.domain, self.gate, o),
            None => write!(f, "{}/{}", self.domain, self.gate),
        }
    }
}

impl FromStr for GateAddress {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_address(s)
    }
}

impl Serialize for GateAddress {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GateAddress {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_address(&s).map_err(serde::de::Error::custom)
    }
}

/// 128-bit record identity, rendered as 32 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordId([u8; 16]);

impl RecordId {
    pub fn from_bytes(b: [u8; 16]) -> Self {
        Self(b)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn random() -> Self {
        Self::random_from(&mut rand::thread_rng())
    }

    pub fn random_from<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    /// Identity of a record produced by an operator: the first 16 bytes of
    /// `SHA-256("ioda/derived/v1" 0x00 kind 0x00 input-ids... payload-json)`.
    /// Re-running an operator over the same inputs yields the same id.
    pub fn derive(kind: &str, inputs: &[RecordId], payload: &Value) -> Self {
        let mut h = Sha256::new();
        h.update(b"ioda/derived/v1\0");
        h.update(kind.as_bytes());
        h.update(b"\0");
        for id in inputs {
            h.update(id.0);
        }
        h.update(canonical_json(payload).as_bytes());
        let digest = h.finalize();
        let mut b = [0u8; 16];
        b.copy_from_slice(&digest[..16]);
        Self(b)
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RecordId({})", self)
    }
}

impl FromStr for RecordId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::MalformedRecordId(s.to_string());
        if s.len() != 32 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(bad());
        }
        let v = hex::decode(s).map_err(|_| bad())?;
        let mut b = [0u8; 16];
        b.copy_from_slice(&v);
        Ok(Self(b))
    }
}

impl Serialize for RecordId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RecordId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Serializes a JSON value with object keys in sorted order.
pub fn canonical_json(v: &Value) -> String {
    // serde_json's default map is ordered by key, so plain serialization is canonical.
    serde_json::to_string(v).expect("json values always serialize")
}

pub fn payload_depth(v: &Value) -> usize {
    match v {
        Value::Array(items) => 1 + items.iter().map(payload_depth).max().unwrap_or(0),
        Value::Object(map) => 1 + map.values().map(payload_depth).max().unwrap_or(0),
        _ => 0,
    }
}

/// A timestamped, tree-structured data record with lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct DataRecord {
    id: RecordId,
    ts: u64,
    payload: Value,
    lineage: BTreeSet<RecordId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: RecordId,
    ts: u64,
    payload: Value,
    lineage: BTreeSet<RecordId>,
}

impl TryFrom<RawRecord> for DataRecord {
    type Error = ModelError;
    fn try_from(r: RawRecord) -> Result<Self, ModelError> {
        DataRecord::with_lineage(r.id, r.ts, r.payload, r.lineage)
    }
}

impl From<DataRecord> for RawRecord {
    fn from(r: DataRecord) -> Self {
        RawRecord {
            id: r.id,
            ts: r.ts,
            payload: r.payload,
            lineage: r.lineage,
        }
    }
}

impl DataRecord {
    /// A source record: no lineage.
    pub fn source(id: RecordId, ts: u64, payload: Value) -> Result<Self, ModelError> {
        Self::with_lineage(id, ts, payload, BTreeSet::new())
    }

    pub fn with_lineage(
        id: RecordId,
        ts: u64,
        payload: Value,
        lineage: BTreeSet<RecordId>,
    ) -> Result<Self, ModelError> {
        if lineage.contains(&id) {
            return Err(ModelError::InvalidRecord(format!(
                "record {id} lists itself in its lineage"
            )));
        }
        if payload_depth(&payload) > MAX_PAYLOAD_DEPTH {
            return Err(ModelError::InvalidRecord(format!(
                "payload of {id} nests deeper than {MAX_PAYLOAD_DEPTH}"
            )));
        }
        Ok(Self {
            id,
            ts,
            payload,
            lineage,
        })
    }

    /// Builds a record derived from `inputs`: the id is derived from the
    /// inputs and payload, and lineage is every input id plus its lineage.
    pub fn derived(kind: &str, inputs: &[&DataRecord], ts: u64, payload: Value) -> Result<Self, ModelError> {
        let ids: Vec<RecordId> = inputs.iter().map(|r| r.id).collect();
        let id = RecordId::derive(kind, &ids, &payload);
        let mut lineage = BTreeSet::new();
        for r in inputs {
            lineage.insert(r.id);
            lineage.extend(r.lineage.iter().copied());
        }
        Self::with_lineage(id, ts, payload, lineage)
    }

    pub fn id(&self) -> RecordId {
        self.id
    }

    pub fn ts(&self) -> u64 {
        self.ts
    }

    pub fn payload(&self) -> &Value {
        &self.payload
    }

    pub fn lineage(&self) -> &BTreeSet<RecordId> {
        &self.lineage
    }

    pub fn is_source(&self) -> bool {
        self.lineage.is_empty()
    }

    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }

    pub fn from_canonical(s: &str) -> Result<Self, ModelError> {
        serde_json::from_str(s).map_err(|e| ModelError::InvalidRecord(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    String,
    Int,
    Float,
    Bool,
    Timestamp,
    List,
    Map,
}

impl FieldType {
    /// Whether `v` is a value of this type. `float` accepts any number,
    /// `timestamp` accepts non-negative integers.
    pub fn accepts(self, v: &Value) -> bool {
        match self {
            FieldType::String => v.is_string(),
            FieldType::Int => v.is_i64() || v.is_u64(),
            FieldType::Float => v.is_number(),
            FieldType::Bool => v.is_boolean(),
            FieldType::Timestamp => v.is_u64(),
            FieldType::List => v.is_array(),
            FieldType::Map => v.is_object(),
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, FieldType::Int | FieldType::Float | FieldType::Timestamp)
    }

    pub fn is_scalar(self) -> bool {
        !matches!(self, FieldType::List | FieldType::Map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: FieldType,
    #[serde(default)]
    pub required: bool,
}

/// Ordered list of typed fields. Extra payload fields are permitted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct Schema {
    fields: Vec<FieldSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    fields: Vec<FieldSpec>,
}

impl TryFrom<RawSchema> for Schema {
    type Error = ModelError;
    fn try_from(r: RawSchema) -> Result<Self, ModelError> {
        Schema::new(r.fields)
    }
}

impl From<Schema> for RawSchema {
    fn from(s: Schema) -> Self {
        RawSchema { fields: s.fields }
    }
}

impl Schema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for f in &fields {
            if f.name.is_empty() {
                return Err(ModelError::InvalidSchema("empty field name".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(ModelError::InvalidSchema(format!("duplicate field {:?}", f.name)));
            }
        }
        Ok(Self { fields })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }
}

/// True iff every required field of `schema` is present (non-null) in the
/// record's top-level payload with the declared type.
pub fn conforms(record: &DataRecord, schema: &Schema) -> bool {
    let obj = record.payload.as_object();
    schema.fields.iter().filter(|f| f.required).all(|f| {
        obj.and_then(|o| o.get(&f.name))
            .filter(|v| !v.is_null())
            .is_some_and(|v| f.ty.accepts(v))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OPortMetadata {
    pub schema: Schema,
    #[serde(default)]
    pub exported: bool,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

/// Declarative description of a gate, published to its domain registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateMetadata {
    pub address: GateAddress,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    #[serde(default)]
    pub oports: BTreeMap<String, OPortMetadata>,
}

impl GateMetadata {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.address.oport().is_some() {
            return Err(ModelError::InvalidMetadata(format!(
                "metadata address {} must not name an oport",
                self.address
            )));
        }
        if self.tags.len() > MAX_TAGS {
            return Err(ModelError::InvalidMetadata(format!(
                "{} carries {} tags, limit is {MAX_TAGS}",
                self.address,
                self.tags.len()
            )));
        }
        for (name, o) in &self.oports {
            validate_segment(name)?;
            if o.tags.len() > MAX_TAGS {
                return Err(ModelError::InvalidMetadata(format!(
                    "oport {name} carries too many tags"
                )));
            }
        }
        Ok(())
    }

    /// Gate tags overlaid with the oport's own tags.
    pub fn effective_tags(&self, oport: &str) -> BTreeMap<String, String> {
        let mut tags = self.tags.clone();
        if let Some(o) = self.oports.get(oport) {
            tags.extend(o.tags.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        tags
    }

    /// Metadata carried as an ordinary record; the id is derived from the content.
    pub fn to_record(&self, ts: u64) -> DataRecord {
        let payload = serde_json::to_value(self).expect("metadata always serializes");
        let id = RecordId::derive("metadata", &[], &payload);
        DataRecord::source(id, ts, payload).expect("metadata payload is shallow")
    }

    pub fn from_record(record: &DataRecord) -> Result<Self, ModelError> {
        let meta: GateMetadata =
            serde_json::from_value(record.payload.clone()).map_err(|e| ModelError::InvalidMetadata(e.to_string()))?;
        meta.validate()?;
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Principal {
    pub id: String,
    #[serde(default)]
    pub roles: BTreeSet<String>,
}

impl Principal {
    pub fn new<I, S>(id: &str, roles: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if id.is_empty() {
            return Err(ModelError::InvalidPrincipal("principal id is empty".into()));
        }
        Ok(Self {
            id: id.to_string(),
            roles: roles.into_iter().map(Into::into).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permission {
    Query,
    Watch,
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Permission::Query => "query",
            Permission::Watch => "watch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEntry {
    pub role: String,
    pub oport: String,
    pub permissions: BTreeSet<Permission>,
}

/// RBAC grants for a gate's oports. Absence of an entry means deny.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<PolicyEntry>", into = "Vec<PolicyEntry>")]
pub struct Policy {
    entries: Vec<PolicyEntry>,
}

impl TryFrom<Vec<PolicyEntry>> for Policy {
    type Error = ModelError;
    fn try_from(entries: Vec<PolicyEntry>) -> Result<Self, ModelError> {
        Policy::new(entries)
    }
}

impl From<Policy> for Vec<PolicyEntry> {
    fn from(p: Policy) -> Self {
        p.entries
    }
}

impl Policy {
    pub fn new(entries: Vec<PolicyEntry>) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert((e.role.as_str(), e.oport.as_str())) {
                return Err(ModelError::InvalidPolicy(format!(
                    "duplicate entry for role {:?} on oport {:?}",
                    e.role, e.oport
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn grant<I>(mut self, role: &str, oport: &str, perms: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = Permission>,
    {
        self.entries.push(PolicyEntry {
            role: role.to_string(),
            oport: oport.to_string(),
            permissions: perms.into_iter().collect(),
        });
        Policy::new(self.entries)
    }

    pub fn entries(&self) -> &[PolicyEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
