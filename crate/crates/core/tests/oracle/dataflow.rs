//! Brute-force evaluation of operator pipelines over plain JSON rows.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use ioda_core::dataflow::{Aggregate, BatchRef, Comparator, Operator, SortOrder};
use ioda_core::model::{canonical_json, DataRecord, RecordId};
use serde_json::{Map, Value};

/// A row as the oracle sees it: payload, contributing sources, and a
/// structural identity that is equal exactly when two rows were produced
/// by the same operator from the same inputs with the same payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub payload: Value,
    pub sources: BTreeSet<RecordId>,
    pub sig: String,
}

impl Row {
    pub fn source(r: &DataRecord) -> Self {
        Row {
            payload: r.payload().clone(),
            sources: BTreeSet::from([r.id()]),
            sig: format!("src:{}", r.id()),
        }
    }

    fn derived(kind: &str, inputs: &[&Row], payload: Value) -> Self {
        let sigs: Vec<&str> = inputs.iter().map(|r| r.sig.as_str()).collect();
        let sig = format!("{kind}[{}]{}", sigs.join("|"), canonical_json(&payload));
        let sources = inputs.iter().flat_map(|r| r.sources.iter().copied()).collect();
        Row { payload, sources, sig }
    }

    pub fn key(&self) -> String {
        super::keyed(&self.payload, &self.sources)
    }
}

/// Evaluation failed because an operator met a value of the wrong type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeError;

fn walk<'a>(payload: &'a Value, path: &[String]) -> Option<&'a Value> {
    let mut cur = payload;
    for key in path {
        cur = cur.as_object()?.get(key)?;
    }
    Some(cur)
}

fn present<'a>(payload: &'a Value, path: &[String]) -> Option<&'a Value> {
    match walk(payload, path) {
        Some(Value::Null) | None => None,
        some => some,
    }
}

fn integer(v: &Value) -> Option<i128> {
    if let Some(i) = v.as_i64() {
        return Some(i as i128);
    }
    v.as_u64().map(|u| u as i128)
}

fn is_scalar(v: &Value) -> bool {
    matches!(v, Value::Number(_) | Value::String(_) | Value::Bool(_))
}

fn same_kind(a: &Value, b: &Value) -> bool {
    matches!(
        (a, b),
        (Value::Number(_), Value::Number(_)) | (Value::String(_), Value::String(_)) | (Value::Bool(_), Value::Bool(_))
    )
}

pub fn order(a: &Value, b: &Value) -> Option<Ordering> {
    if !same_kind(a, b) {
        return None;
    }
    match (a, b) {
        (Value::Number(_), Value::Number(_)) => {
            if let (Some(x), Some(y)) = (integer(a), integer(b)) {
                Some(x.cmp(&y))
            } else {
                a.as_f64().unwrap().partial_cmp(&b.as_f64().unwrap())
            }
        }
        (Value::String(x), Value::String(y)) => Some(x.as_str().cmp(y.as_str())),
        (Value::Bool(x), Value::Bool(y)) => Some((*x as u8).cmp(&(*y as u8))),
        _ => None,
    }
}

fn satisfied(cmp: Comparator, o: Ordering) -> bool {
    let (lt, eq, gt) = (o == Ordering::Less, o == Ordering::Equal, o == Ordering::Greater);
    match cmp {
        Comparator::Eq => eq,
        Comparator::Ne => lt || gt,
        Comparator::Lt => lt,
        Comparator::Le => lt || eq,
        Comparator::Gt => gt,
        Comparator::Ge => gt || eq,
    }
}

fn set_nested(out: &mut Map<String, Value>, path: &[String], value: Value) {
    if path.len() == 1 {
        out.insert(path[0].clone(), value);
        return;
    }
    let child = out.entry(path[0].clone()).or_insert_with(|| Value::Object(Map::new()));
    if !child.is_object() {
        *child = Value::Object(Map::new());
    }
    set_nested(child.as_object_mut().unwrap(), &path[1..], value);
}

fn aggregate(function: Aggregate, path: &[String], chunk: &[Row]) -> Result<Value, TypeError> {
    if function == Aggregate::Count {
        return Ok(Value::from(chunk.len() as u64));
    }
    let mut values = Vec::new();
    for r in chunk {
        match present(&r.payload, path) {
            None => {}
            Some(v) if v.is_number() => values.push(v.clone()),
            Some(_) => return Err(TypeError),
        }
    }
    if values.is_empty() {
        return Ok(Value::Null);
    }
    let floats: Vec<f64> = values.iter().map(|v| v.as_f64().unwrap()).collect();
    let float_sum = floats[1..].iter().fold(floats[0], |acc, x| acc + x);
    Ok(match function {
        Aggregate::Sum => {
            let ints: Vec<i128> = values.iter().filter_map(integer).collect();
            if ints.len() == values.len() {
                let total: i128 = ints.iter().sum();
                if total >= i64::MIN as i128 && total <= i64::MAX as i128 {
                    Value::from(total as i64)
                } else {
                    Value::from(total as f64)
                }
            } else {
                Value::from(float_sum)
            }
        }
        Aggregate::Avg => Value::from(float_sum / values.len() as f64),
        Aggregate::Min | Aggregate::Max => {
            let want = if function == Aggregate::Min {
                Ordering::Less
            } else {
                Ordering::Greater
            };
            let mut best = &values[0];
            for v in &values[1..] {
                if order(v, best) == Some(want) {
                    best = v;
                }
            }
            best.clone()
        }
        Aggregate::Count => unreachable!(),
    })
}

/// Applies one operator. `right` is the join's right-hand batch.
pub fn apply_one(op: &Operator, input: &[Row], right: Option<&[Row]>) -> Result<Vec<Row>, TypeError> {
    match op {
        Operator::Filter { path, cmp, value } => {
            let mut out = Vec::new();
            for r in input {
                if let Some(v) = present(&r.payload, path.segments()) {
                    let o = order(v, value).ok_or(TypeError)?;
                    if satisfied(*cmp, o) {
                        out.push(r.clone());
                    }
                }
            }
            Ok(out)
        }
        Operator::Project { paths } => Ok(input
            .iter()
            .map(|r| {
                let mut obj = Map::new();
                for p in paths {
                    if let Some(v) = walk(&r.payload, p.segments()) {
                        set_nested(&mut obj, p.segments(), v.clone());
                    }
                }
                Row::derived("project", &[r], Value::Object(obj))
            })
            .collect()),
        Operator::Sort { path, order: dir } => {
            let mut keyed = Vec::new();
            let mut missing = Vec::new();
            for r in input {
                match present(&r.payload, path.segments()) {
                    Some(v) => {
                        if !is_scalar(v) {
                            return Err(TypeError);
                        }
                        keyed.push((v.clone(), r.clone()));
                    }
                    None => missing.push(r.clone()),
                }
            }
            if keyed.windows(2).any(|w| !same_kind(&w[0].0, &w[1].0)) {
                return Err(TypeError);
            }
            // Insertion sort keeps equal keys in input order.
            let mut sorted: Vec<(Value, Row)> = Vec::with_capacity(keyed.len());
            for item in keyed {
                let mut at = sorted.len();
                while at > 0 {
                    let o = order(&sorted[at - 1].0, &item.0).unwrap();
                    let before = match dir {
                        SortOrder::Asc => o == Ordering::Greater,
                        SortOrder::Desc => o == Ordering::Less,
                    };
                    if !before {
                        break;
                    }
                    at -= 1;
                }
                sorted.insert(at, item);
            }
            Ok(sorted.into_iter().map(|(_, r)| r).chain(missing).collect())
        }
        Operator::Join {
            left_path, right_path, ..
        } => {
            let right = right.expect("joins need a right batch");
            for r in right {
                if present(&r.payload, right_path.segments()).is_some_and(|v| !is_scalar(v)) {
                    return Err(TypeError);
                }
            }
            for l in input {
                if present(&l.payload, left_path.segments()).is_some_and(|v| !is_scalar(v)) {
                    return Err(TypeError);
                }
            }
            let mut out = Vec::new();
            for l in input {
                let Some(lk) = present(&l.payload, left_path.segments()) else {
                    continue;
                };
                for r in right {
                    let Some(rk) = present(&r.payload, right_path.segments()) else {
                        continue;
                    };
                    if order(lk, rk) != Some(Ordering::Equal) {
                        continue;
                    }
                    let mut obj = l.payload.as_object().cloned().unwrap_or_default();
                    for (k, v) in r.payload.as_object().into_iter().flatten() {
                        obj.insert(format!("right.{k}"), v.clone());
                    }
                    out.push(Row::derived("join", &[l, r], Value::Object(obj)));
                }
            }
            Ok(out)
        }
        Operator::Window {
            count,
            function,
            path,
            output,
        } => {
            let mut out = Vec::new();
            let mut start = 0;
            while start < input.len() {
                let end = (start + count).min(input.len());
                let chunk = &input[start..end];
                let value = aggregate(*function, path.segments(), chunk)?;
                let mut obj = Map::new();
                obj.insert(output.clone(), value);
                let members: Vec<&Row> = chunk.iter().collect();
                out.push(Row::derived("window", &members, Value::Object(obj)));
                start = end;
            }
            Ok(out)
        }
    }
}

/// Applies a pipeline stage by stage; `right` supplies each join's batch.
pub fn apply(ops: &[Operator], input: &[Row], right: &dyn Fn(&BatchRef) -> Vec<Row>) -> Result<Vec<Row>, TypeError> {
    let mut rows = input.to_vec();
    for op in ops {
        let aux = match op {
            Operator::Join { right: src, .. } => Some(right(src)),
            _ => None,
        };
        rows = apply_one(op, &rows, aux.as_deref())?;
    }
    Ok(rows)
}
