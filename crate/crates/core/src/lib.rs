//! Federated data gateways.
//!
//! Gates ingest records through iports, curate them with dataflows, keep them
//! in a store and expose schema'd, policy-guarded views through oports.
//! Registries resolve selectors to oport addresses within and across domains,
//! authenticated wires move data between gates, and circuits verify and run
//! multi-gate topologies.

pub mod circuit;
pub mod dataflow;
pub mod gate;
pub mod governance;
pub mod harness;
pub mod model;
pub mod resolution;
pub mod store;
pub mod wire;

pub use dataflow::{apply_dataflow, apply_operator, Dataflow, Operator};
pub use gate::{create_gate, Gate, GateHandle, GateSpec};
pub use model::{conforms, format_address, parse_address, DataRecord, GateAddress, GateMetadata, Principal, RecordId};
