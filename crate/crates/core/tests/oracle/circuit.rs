//! Composed-dataflow model of a running circuit at quiescence.
//!
//! Valid for record-wise iport dataflows (filter, project, sort, and joins
//! against static tables), where the result does not depend on how the
//! source events were grouped in transit. Results are multisets.

use std::collections::{BTreeMap, BTreeSet};

use ioda_core::dataflow::BatchRef;
use ioda_core::gate::GateSpec;
use ioda_core::model::{DataRecord, FieldType, GateAddress, Schema};
use serde_json::Value;

use super::dataflow::{apply, Row};

#[derive(Debug, Clone)]
pub struct Edge {
    /// Source oport address.
    pub from: GateAddress,
    pub to: GateAddress,
    pub iport: String,
}

#[derive(Debug, Default, Clone)]
pub struct GateState {
    pub store: Vec<Row>,
    pub views: BTreeMap<String, Vec<Row>>,
}

fn accepts(ty: FieldType, v: &Value) -> bool {
    match ty {
        FieldType::String => v.is_string(),
        FieldType::Int => v.is_i64() || v.is_u64(),
        FieldType::Float => v.is_number(),
        FieldType::Bool => v.is_boolean(),
        FieldType::Timestamp => v.is_u64(),
        FieldType::List => v.is_array(),
        FieldType::Map => v.is_object(),
    }
}

fn fits(schema: &Schema, payload: &Value) -> bool {
    schema
        .fields()
        .iter()
        .filter(|f| f.required)
        .all(|f| payload.get(&f.name).is_some_and(|v| !v.is_null() && accepts(f.ty, v)))
}

fn dedup(rows: &[Row]) -> Vec<Row> {
    let mut seen = BTreeSet::new();
    rows.iter().filter(|r| seen.insert(r.sig.clone())).cloned().collect()
}

fn topological(gates: &BTreeSet<GateAddress>, edges: &[Edge]) -> Vec<GateAddress> {
    let mut order = Vec::new();
    let mut left: BTreeSet<GateAddress> = gates.clone();
    while !left.is_empty() {
        let next = left
            .iter()
            .find(|g| !edges.iter().any(|e| &e.to == *g && left.contains(&e.from.gate_only())))
            .expect("the oracle only models acyclic circuits")
            .clone();
        left.remove(&next);
        order.push(next);
    }
    order
}

/// Expected store and oport views of every gate once all events have been
/// delivered. `local` lists batches ingested directly, per gate and iport.
pub fn quiescent(
    specs: &BTreeMap<GateAddress, GateSpec>,
    edges: &[Edge],
    local: &BTreeMap<GateAddress, Vec<(String, Vec<DataRecord>)>>,
) -> BTreeMap<GateAddress, GateState> {
    let names: BTreeSet<GateAddress> = specs.keys().cloned().collect();
    let mut states: BTreeMap<GateAddress, GateState> = BTreeMap::new();
    for addr in topological(&names, edges) {
        let spec = &specs[&addr];
        let tables = |r: &BatchRef| match r {
            BatchRef::Table(t) => spec
                .table_records(t)
                .expect("joined tables exist")
                .iter()
                .map(Row::source)
                .collect(),
            BatchRef::OPort(_) => panic!("oport joins are not record-wise"),
        };
        let mut store = Vec::new();
        for (iport, batch) in local.get(&addr).into_iter().flatten() {
            let rows: Vec<Row> = batch.iter().map(Row::source).collect();
            let df = &spec.iport(iport).expect("ingest iports exist").dataflow;
            store.extend(apply(df.stages(), &rows, &tables).expect("generated data is well typed"));
        }
        for e in edges.iter().filter(|e| e.to == addr) {
            let src = &states[&e.from.gate_only()];
            let published = dedup(&src.views[e.from.oport().expect("edges start at oports")]);
            let df = &spec.iport(&e.iport).expect("edge iports exist").dataflow;
            store.extend(apply(df.stages(), &published, &tables).expect("generated data is well typed"));
        }
        let mut views = BTreeMap::new();
        for o in spec.oports() {
            let rows = apply(o.view.stages(), &store, &tables).expect("generated data is well typed");
            views.insert(
                o.name.clone(),
                rows.into_iter().filter(|r| fits(&o.schema, &r.payload)).collect(),
            );
        }
        states.insert(addr, GateState { store, views });
    }
    states
}
