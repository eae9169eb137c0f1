//! Deterministic record-batch operators and pipelines.
//!
//! Filter and Sort pass records through untouched. Project, Join and Window
//! mint new records whose ids are derived from their inputs and payload, and
//! whose lineage is the union of the contributing inputs' ids and lineage.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::{DataRecord, ModelError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataflowError {
    #[error("type mismatch in {op}: {detail}")]
    TypeMismatch { op: &'static str, detail: String },
    #[error("join source {0} could not be resolved")]
    UnresolvedJoinSource(BatchRef),
    #[error("invalid operator: {0}")]
    InvalidOperator(String),
    #[error(transparent)]
    Record(#[from] ModelError),
}

/// Path of keys addressing a nested payload field.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct FieldPath(Vec<String>);

impl TryFrom<Vec<String>> for FieldPath {
    type Error = DataflowError;
    fn try_from(segments: Vec<String>) -> Result<Self, DataflowError> {
        FieldPath::new(segments)
    }
}

impl From<FieldPath> for Vec<String> {
    fn from(p: FieldPath) -> Self {
        p.0
    }
}

impl FieldPath {
    pub fn new<I, S>(segments: I) -> Result<Self, DataflowError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        if segments.is_empty() || segments.iter().any(String::is_empty) {
            return Err(DataflowError::InvalidOperator(format!("bad field path {segments:?}")));
        }
        Ok(Self(segments))
    }

    /// Shorthand for a one-segment path.
    pub fn field(name: &str) -> Self {
        Self::new([name]).expect("non-empty field name")
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn head(&self) -> &str {
        &self.0[0]
    }

    /// The value at this path, including explicit nulls.
    pub fn lookup<'a>(&self, payload: &'a Value) -> Option<&'a Value> {
        self.0.iter().try_fold(payload, |v, key| v.as_object()?.get(key))
    }

    /// The value at this path; null counts as missing.
    pub fn present<'a>(&self, payload: &'a Value) -> Option<&'a Value> {
        self.lookup(payload).filter(|v| !v.is_null())
    }

    fn insert(&self, out: &mut Map<String, Value>, value: Value) {
        let (last, parents) = self.0.split_last().expect("paths are non-empty");
        let mut cur = out;
        for key in parents {
            let slot = cur.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
            if !slot.is_object() {
                *slot = Value::Object(Map::new());
            }
            cur = slot.as_object_mut().expect("just made an object");
        }
        cur.insert(last.clone(), value);
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("."))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Comparator {
    pub fn holds(self, ord: Ordering) -> bool {
        match self {
            Comparator::Eq => ord == Ordering::Equal,
            Comparator::Ne => ord != Ordering::Equal,
            Comparator::Lt => ord == Ordering::Less,
            Comparator::Le => ord != Ordering::Greater,
            Comparator::Gt => ord == Ordering::Greater,
            Comparator::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortOrder {
    Asc,
    Desc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Sum,
    Avg,
    Min,
    Max,
    Count,
}

/// Where a join reads its right-hand batch from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum BatchRef {
    /// A static reference table declared by the hosting gate.
    Table(String),
    /// The current view of one of the hosting gate's oports.
    OPort(String),
}

impl fmt::Display for BatchRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchRef::Table(t) => write!(f, "table:{t}"),
            BatchRef::OPort(o) => write!(f, "oport:{o}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Operator {
    Filter {
        path: FieldPath,
        cmp: Comparator,
        value: Value,
    },
    Project {
        paths: Vec<FieldPath>,
    },
    Sort {
        path: FieldPath,
        order: SortOrder,
    },
    Join {
        right: BatchRef,
        left_path: FieldPath,
        right_path: FieldPath,
    },
    Window {
        count: usize,
        #[serde(rename = "fn")]
        function: Aggregate,
        path: FieldPath,
        output: String,
    },
}

impl Operator {
    pub fn name(&self) -> &'static str {
        match self {
            Operator::Filter { .. } => "filter",
            Operator::Project { .. } => "project",
            Operator::Sort { .. } => "sort",
            Operator::Join { .. } => "join",
            Operator::Window { .. } => "window",
        }
    }

    pub fn validate(&self) -> Result<(), DataflowError> {
        match self {
            Operator::Filter { value, .. } => {
                if value.is_null() || value.is_array() || value.is_object() {
                    return Err(DataflowError::InvalidOperator(format!(
                        "filter literal must be a non-null scalar, got {value}"
                    )));
                }
            }
            Operator::Window { count, output, .. } => {
                if *count == 0 {
                    return Err(DataflowError::InvalidOperator("window count must be at least 1".into()));
                }
                if output.is_empty() {
                    return Err(DataflowError::InvalidOperator("window output field is empty".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Ordered pipeline of operators, evaluated left to right.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Operator>", into = "Vec<Operator>")]
pub struct Dataflow {
    stages: Vec<Operator>,
}

impl TryFrom<Vec<Operator>> for Dataflow {
    type Error = DataflowError;
    fn try_from(stages: Vec<Operator>) -> Result<Self, DataflowError> {
        Dataflow::new(stages)
    }
}

impl From<Dataflow> for Vec<Operator> {
    fn from(d: Dataflow) -> Self {
        d.stages
    }
}

impl Dataflow {
    pub fn new(stages: Vec<Operator>) -> Result<Self, DataflowError> {
        for s in &stages {
            s.validate()?;
        }
        Ok(Self { stages })
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn stages(&self) -> &[Operator] {
        &self.stages
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn join_sources(&self) -> impl Iterator<Item = &BatchRef> {
        self.stages.iter().filter_map(|s| match s {
            Operator::Join { right, .. } => Some(right),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarKind {
    Number,
    String,
    Bool,
}

fn scalar_kind(v: &Value) -> Option<ScalarKind> {
    match v {
        Value::Number(_) => Some(ScalarKind::Number),
        Value::String(_) => Some(ScalarKind::String),
        Value::Bool(_) => Some(ScalarKind::Bool),
        _ => None,
    }
}

fn as_i128(v: &Value) -> Option<i128> {
    v.as_i64().map(i128::from).or_else(|| v.as_u64().map(i128::from))
}

/// Orders two scalars of the same kind. Integers compare exactly; mixed
/// int/float numbers compare as f64.
pub fn compare_scalars(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Number(_), Value::Number(_)) => match (as_i128(a), as_i128(b)) {
            (Some(x), Some(y)) => Some(x.cmp(&y)),
            _ => a.as_f64()?.partial_cmp(&b.as_f64()?),
        },
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

fn mismatch(op: &'static str, detail: String) -> DataflowError {
    DataflowError::TypeMismatch { op, detail }
}

/// Applies one operator to a batch. `aux` carries the right-hand batch of a join.
pub fn apply_operator(
    op: &Operator,
    input: &[DataRecord],
    aux: Option<&[DataRecord]>,
) -> Result<Vec<DataRecord>, DataflowError> {
    op.validate()?;
    match op {
        Operator::Filter { path, cmp, value } => filter(path, *cmp, value, input),
        Operator::Project { paths } => project(paths, input),
        Operator::Sort { path, order } => sort(path, *order, input),
        Operator::Join {
            right,
            left_path,
            right_path,
        } => {
            let aux = aux.ok_or_else(|| DataflowError::UnresolvedJoinSource(right.clone()))?;
            join(left_path, right_path, input, aux)
        }
        Operator::Window {
            count,
            function,
            path,
            output,
        } => window(*count, *function, path, output, input),
    }
}

fn filter(
    path: &FieldPath,
    cmp: Comparator,
    literal: &Value,
    input: &[DataRecord],
) -> Result<Vec<DataRecord>, DataflowError> {
    let mut out = Vec::new();
    for r in input {
        let Some(v) = path.present(r.payload()) else {
            continue;
        };
        let ord = compare_scalars(v, literal)
            .ok_or_else(|| mismatch("filter", format!("cannot compare {v} at {path} with {literal}")))?;
        if cmp.holds(ord) {
            out.push(r.clone());
        }
    }
    Ok(out)
}

fn project(paths: &[FieldPath], input: &[DataRecord]) -> Result<Vec<DataRecord>, DataflowError> {
    input
        .iter()
        .map(|r| {
            let mut obj = Map::new();
            for p in paths {
                if let Some(v) = p.lookup(r.payload()) {
                    p.insert(&mut obj, v.clone());
                }
            }
            Ok(DataRecord::derived("project", &[r], r.ts(), Value::Object(obj))?)
        })
        .collect()
}

fn sort(path: &FieldPath, order: SortOrder, input: &[DataRecord]) -> Result<Vec<DataRecord>, DataflowError> {
    let mut first_kind = None;
    for r in input {
        if let Some(v) = path.present(r.payload()) {
            let kind = scalar_kind(v).ok_or_else(|| mismatch("sort", format!("non-scalar sort key {v} at {path}")))?;
            match first_kind {
                None => first_kind = Some(kind),
                Some(k) if k != kind => {
                    return Err(mismatch("sort", format!("mixed key types at {path}")));
                }
                _ => {}
            }
        }
    }
    let mut out = input.to_vec();
    out.sort_by(|a, b| match (path.present(a.payload()), path.present(b.payload())) {
        (Some(x), Some(y)) => {
            let ord = compare_scalars(x, y).unwrap_or(Ordering::Equal);
            match order {
                SortOrder::Asc => ord,
                SortOrder::Desc => ord.reverse(),
            }
        }
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    });
    Ok(out)
}

fn join_key<'a>(path: &FieldPath, r: &'a DataRecord) -> Result<Option<&'a Value>, DataflowError> {
    match path.present(r.payload()) {
        Some(v) if scalar_kind(v).is_none() => Err(mismatch("join", format!("non-scalar join key {v} at {path}"))),
        other => Ok(other),
    }
}

fn join(
    left_path: &FieldPath,
    right_path: &FieldPath,
    left: &[DataRecord],
    right: &[DataRecord],
) -> Result<Vec<DataRecord>, DataflowError> {
    let mut right_keys = Vec::with_capacity(right.len());
    for r in right {
        right_keys.push(join_key(right_path, r)?);
    }
    let mut out = Vec::new();
    for l in left {
        let Some(lk) = join_key(left_path, l)? else {
            continue;
        };
        for (r, rk) in right.iter().zip(&right_keys) {
            let Some(rk) = rk else { continue };
            if compare_scalars(lk, rk) != Some(Ordering::Equal) {
                continue;
            }
            let mut obj = l.payload().as_object().cloned().unwrap_or_default();
            if let Some(robj) = r.payload().as_object() {
                for (k, v) in robj {
                    obj.insert(format!("right.{k}"), v.clone());
                }
            }
            out.push(DataRecord::derived(
                "join",
                &[l, r],
                l.ts().max(r.ts()),
                Value::Object(obj),
            )?);
        }
    }
    Ok(out)
}

fn aggregate(function: Aggregate, path: &FieldPath, chunk: &[DataRecord]) -> Result<Value, DataflowError> {
    if function == Aggregate::Count {
        return Ok(Value::from(chunk.len() as u64));
    }
    let mut values = Vec::new();
    for r in chunk {
        if let Some(v) = path.present(r.payload()) {
            if !v.is_number() {
                return Err(mismatch("window", format!("non-numeric value {v} at {path}")));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Ok(Value::Null);
    }
    Ok(match function {
        Aggregate::Sum => {
            let ints: Option<Vec<i128>> = values.iter().map(|v| as_i128(v)).collect();
            match ints.map(|xs| xs.into_iter().sum::<i128>()) {
                Some(s) if i64::try_from(s).is_ok() => Value::from(s as i64),
                Some(s) => Value::from(s as f64),
                None => Value::from(values.iter().map(|v| v.as_f64().unwrap_or(0.0)).sum::<f64>()),
            }
        }
        Aggregate::Avg => {
            let sum: f64 = values.iter().map(|v| v.as_f64().unwrap_or(0.0)).sum();
            Value::from(sum / values.len() as f64)
        }
        Aggregate::Min | Aggregate::Max => {
            let mut best = values[0];
            for v in &values[1..] {
                let ord = compare_scalars(v, best).unwrap_or(Ordering::Equal);
                let better = if function == Aggregate::Min {
                    ord == Ordering::Less
                } else {
                    ord == Ordering::Greater
                };
                if better {
                    best = v;
                }
            }
            best.clone()
        }
        Aggregate::Count => unreachable!(),
    })
}

fn window(
    count: usize,
    function: Aggregate,
    path: &FieldPath,
    output: &str,
    input: &[DataRecord],
) -> Result<Vec<DataRecord>, DataflowError> {
    input
        .chunks(count)
        .map(|chunk| {
            let value = aggregate(function, path, chunk)?;
            let mut obj = Map::new();
            obj.insert(output.to_string(), value);
            let ts = chunk.iter().map(DataRecord::ts).max().unwrap_or(0);
            let members: Vec<&DataRecord> = chunk.iter().collect();
            Ok(DataRecord::derived("window", &members, ts, Value::Object(obj))?)
        })
        .collect()
}

/// Evaluates a pipeline stage by stage. `resolver` supplies the right-hand
/// batch for each join source.
pub fn apply_dataflow<F>(df: &Dataflow, input: &[DataRecord], resolver: F) -> Result<Vec<DataRecord>, DataflowError>
where
    F: Fn(&BatchRef) -> Option<Vec<DataRecord>>,
{
    apply_dataflow_observed(df, input, resolver, &mut |_| {})
}

/// Like [`apply_dataflow`], calling `observer` on every record minted by a
/// Project, Join or Window stage (including intermediate ones).
pub fn apply_dataflow_observed<F>(
    df: &Dataflow,
    input: &[DataRecord],
    resolver: F,
    observer: &mut dyn FnMut(&DataRecord),
) -> Result<Vec<DataRecord>, DataflowError>
where
    F: Fn(&BatchRef) -> Option<Vec<DataRecord>>,
{
    let mut aux_batches = Vec::with_capacity(df.stages.len());
    for stage in &df.stages {
        aux_batches.push(match stage {
            Operator::Join { right, .. } => {
                Some(resolver(right).ok_or_else(|| DataflowError::UnresolvedJoinSource(right.clone()))?)
            }
            _ => None,
        });
    }
    let mut batch = input.to_vec();
    for (stage, aux) in df.stages.iter().zip(&aux_batches) {
        batch = apply_operator(stage, &batch, aux.as_deref())?;
        if matches!(
            stage,
            Operator::Project { .. } | Operator::Join { .. } | Operator::Window { .. }
        ) {
            batch.iter().for_each(&mut *observer);
        }
    }
    Ok(batch)
}
