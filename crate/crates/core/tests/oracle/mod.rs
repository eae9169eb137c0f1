//! Reference models used as test oracles. They are written against the
//! documented behavior, not against the engine's internals.

#![allow(dead_code)]

pub mod circuit;
pub mod dataflow;
pub mod resolve;

use std::collections::BTreeSet;

use ioda_core::model::{canonical_json, DataRecord, RecordId};

/// Source records (no lineage) among `known` that contributed to `r`.
pub fn engine_sources(r: &DataRecord, known: &BTreeSet<RecordId>) -> BTreeSet<RecordId> {
    if r.is_source() {
        return BTreeSet::from([r.id()]);
    }
    r.lineage().iter().filter(|id| known.contains(id)).copied().collect()
}

/// Canonical text of a payload paired with its contributing sources.
pub fn keyed(payload: &serde_json::Value, sources: &BTreeSet<RecordId>) -> String {
    let ids: Vec<String> = sources.iter().map(ToString::to_string).collect();
    format!("{} <- [{}]", canonical_json(payload), ids.join(","))
}

pub fn sorted<T: Ord>(mut v: Vec<T>) -> Vec<T> {
    v.sort();
    v
}
