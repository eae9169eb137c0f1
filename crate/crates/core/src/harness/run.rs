//! Executes a scenario's circuits and workload and summarizes the outcome.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{Action, ScenarioConfig, Step};
use super::deploy::{Deployment, RunOptions, Transport};
use super::HarnessError;
use crate::circuit::{CircuitError, EdgeStatus, VerificationReport};
use crate::governance::{trace, AuditReport};
use crate::model::{DataRecord, GateAddress};
use crate::resolution::ResolveError;

/// Upper bound on waiting for a circuit to deliver everything in flight.
pub const SETTLE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitOutcome {
    pub name: String,
    pub verification: VerificationReport,
    pub activated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_edge: Option<usize>,
    /// Edges whose handshake fails, probed after a failed activation.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub auth_failures: BTreeMap<usize, String>,
    /// Final edge states of an activated circuit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeStatus>,
}

impl CircuitOutcome {
    pub fn passed(&self) -> bool {
        self.verification.passed && self.activated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub index: usize,
    pub at: u64,
    pub action: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewDigest {
    pub records: usize,
    /// Events published on the oport.
    pub events: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub transport: Transport,
    pub passed: bool,
    pub circuits: Vec<CircuitOutcome>,
    pub steps: Vec<StepOutcome>,
    pub views: BTreeMap<String, ViewDigest>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub audit: BTreeMap<String, AuditReport>,
}

impl RunReport {
    /// View digests only, for comparing runs.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.views.iter().map(|(k, v)| (k.clone(), v.digest.clone())).collect()
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.circuits {
            if !c.verification.passed {
                let checks: Vec<_> = c.verification.failed_checks().iter().map(|k| k.label()).collect();
                out.push(format!("circuit {} failed verification: {}", c.name, checks.join(", ")));
            } else if !c.activated {
                out.push(format!(
                    "circuit {} failed to activate: {}",
                    c.name,
                    c.error.as_deref().unwrap_or("unknown")
                ));
            }
        }
        for s in self.steps.iter().filter(|s| !s.passed) {
            out.push(format!(
                "step {} ({}) at {}: {}",
                s.index,
                s.action,
                s.at,
                s.error.as_deref().unwrap_or("failed")
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "scenario {} over {}: {}\n",
            self.scenario,
            self.transport,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for c in &self.circuits {
            let state = if c.passed() {
                "running"
            } else if c.verification.passed {
                "activation failed"
            } else {
                "unverified"
            };
            out.push_str(&format!("  circuit {}: {state}\n", c.name));
            for (e, why) in &c.auth_failures {
                out.push_str(&format!("    edge {e}: {why}\n"));
            }
        }
        for s in &self.steps {
            out.push_str(&format!(
                "  [{}] step {} {} at {}",
                if s.passed { "ok" } else { "FAIL" },
                s.index,
                s.action,
                s.at
            ));
            if let Some(e) = &s.error {
                out.push_str(&format!(": {e}"));
            }
            out.push('\n');
        }
        for (oport, v) in &self.views {
            out.push_str(&format!(
                "  view {oport}: {} records, {} events, {}\n",
                v.records,
                v.events,
                &v.digest[..16]
            ));
        }
        out
    }
}

/// Digest of a view: SHA-256 over the canonical form of each record, in view order.
pub fn view_digest(records: &[DataRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.to_canonical().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Structural JSON equality with numbers compared by value.
pub fn json_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_i64(), y.as_i64()) {
            (Some(i), Some(j)) => i == j,
            _ => {
                let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
                (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0)
            }
        },
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| json_eq(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| json_eq(v, w)))
        }
        _ => a == b,
    }
}

fn payloads_match(actual: &[Value], expected: &[Value], unordered: bool) -> bool {
    if actual.len() != expected.len() {
        return false;
    }
    if !unordered {
        return actual.iter().zip(expected).all(|(a, e)| json_eq(a, e));
    }
    let mut used = vec![false; actual.len()];
    expected.iter().all(
        |e| match actual.iter().enumerate().position(|(i, a)| !used[i] && json_eq(a, e)) {
            Some(i) => {
                used[i] = true;
                true
            }
            None => false,
        },
    )
}

pub fn resolve_error_kind(e: &ResolveError) -> &'static str {
    match e {
        ResolveError::NotFound => "NotFound",
        ResolveError::UnknownPeer(_) => "UnknownPeer",
        ResolveError::WrongDomain { .. } => "WrongDomain",
        ResolveError::InvalidSelector(_) => "InvalidSelector",
        ResolveError::InvalidRegistry(_) => "InvalidRegistry",
        ResolveError::Remote(_) => "Remote",
    }
}

fn circuit_error(e: CircuitError) -> String {
    e.to_string()
}

struct Outcome {
    passed: bool,
    detail: Value,
    error: Option<String>,
}

impl Outcome {
    fn ok(detail: Value) -> Self {
        Self {
            passed: true,
            detail,
            error: None,
        }
    }

    fn fail(detail: Value, error: String) -> Self {
        Self {
            passed: false,
            detail,
            error: Some(error),
        }
    }

    fn check(detail: Value, failure: Option<String>) -> Self {
        match failure {
            None => Self::ok(detail),
            Some(e) => Self::fail(detail, e),
        }
    }
}

fn oport_name(addr: &GateAddress) -> &str {
    addr.oport().expect("validated oport addresses")
}

fn execute(dep: &mut Deployment, step: &Step) -> Outcome {
    match &step.action {
        Action::Ingest { gate, iport, records } => {
            let batch: Result<Vec<DataRecord>, _> = records
                .iter()
                .map(|p| DataRecord::source(dep.next_record_id(), step.at, p.clone()))
                .collect();
            let batch = match batch {
                Ok(b) => b,
                Err(e) => return Outcome::fail(Value::Null, e.to_string()),
            };
            let ids: Vec<String> = batch.iter().map(|r| r.id().to_string()).collect();
            let report = match dep
                .gate(gate)
                .map_err(|e| e.to_string())
                .and_then(|g| g.ingest(iport, &batch).map_err(|e| e.to_string()))
            {
                Ok(r) => r,
                Err(e) => return Outcome::fail(json!({"ids": ids}), e),
            };
            let detail = json!({"ids": ids, "accepted": report.accepted, "derived": report.derived});
            match dep.settle(SETTLE_TIMEOUT) {
                Ok(()) => Outcome::ok(detail),
                Err(e) => Outcome::fail(detail, circuit_error(e)),
            }
        }
        Action::Expect {
            oport,
            count,
            records,
            unordered,
        } => {
            let view = match dep
                .gate(oport)
                .map_err(|e| e.to_string())
                .and_then(|g| g.materialize(oport_name(oport)).map_err(|e| e.to_string()))
            {
                Ok(v) => v,
                Err(e) => return Outcome::fail(Value::Null, e),
            };
            let actual: Vec<Value> = view.entries.iter().map(|e| e.record.payload().clone()).collect();
            let detail = json!({"count": actual.len(), "seq": view.seq});
            let mut failure = None;
            if let Some(n) = count {
                if *n != actual.len() {
                    failure = Some(format!("{oport} holds {} records, expected {n}", actual.len()));
                }
            }
            if let Some(expected) = records {
                if failure.is_none() && !payloads_match(&actual, expected, *unordered) {
                    failure = Some(format!(
                        "{oport} holds {}, expected {}",
                        Value::Array(actual.clone()),
                        Value::Array(expected.clone())
                    ));
                }
            }
            Outcome::check(detail, failure)
        }
        Action::Fault { circuit, edge } => match dep.circuit(circuit) {
            None => Outcome::fail(Value::Null, format!("circuit {circuit} is not running")),
            Some(c) => match c.inject_fault(*edge) {
                Ok(()) => Outcome::ok(json!({"degraded": c.status().degraded_edges()})),
                Err(e) => Outcome::fail(Value::Null, circuit_error(e)),
            },
        },
        Action::Reconnect { circuit, edge } => {
            let Some(c) = dep.circuit(circuit) else {
                return Outcome::fail(Value::Null, format!("circuit {circuit} is not running"));
            };
            if let Err(e) = c.reconnect(*edge) {
                return Outcome::fail(Value::Null, circuit_error(e));
            }
            let detail = json!({"degraded": c.status().degraded_edges()});
            match dep.settle(SETTLE_TIMEOUT) {
                Ok(()) => Outcome::ok(detail),
                Err(e) => Outcome::fail(detail, circuit_error(e)),
            }
        }
        Action::Query {
            oport,
            principal,
            via,
            filter,
            expect_count,
            expect_error,
        } => match (dep.query(oport, principal, via.as_ref(), filter.as_ref()), expect_error) {
            (Ok(records), None) => {
                let detail = json!({"count": records.len()});
                let failure = expect_count
                    .filter(|n| *n != records.len())
                    .map(|n| format!("query returned {} records, expected {n}", records.len()));
                Outcome::check(detail, failure)
            }
            (Ok(records), Some(kind)) => Outcome::fail(
                json!({"count": records.len()}),
                format!("query succeeded, expected {kind}"),
            ),
            (Err(e), Some(kind)) if e.kind() == kind => Outcome::ok(json!({"error": e.kind()})),
            (Err(e), _) => Outcome::fail(json!({"error": e.kind()}), e.to_string()),
        },
        Action::Resolve {
            from,
            selector,
            expect,
            expect_error,
        } => match (dep.resolve(from, selector), expect_error) {
            (Ok(addr), None) => {
                let failure = expect
                    .as_ref()
                    .filter(|e| **e != addr)
                    .map(|e| format!("resolved {addr}, expected {e}"));
                Outcome::check(json!({"address": addr.to_string()}), failure)
            }
            (Ok(addr), Some(kind)) => Outcome::fail(
                json!({"address": addr.to_string()}),
                format!("resolved {addr}, expected {kind}"),
            ),
            (Err(e), Some(kind)) if resolve_error_kind(&e) == kind => Outcome::ok(json!({"error": kind})),
            (Err(e), _) => Outcome::fail(json!({"error": resolve_error_kind(&e)}), e.to_string()),
        },
        Action::Trace { oport, expect_leaves } => {
            let view = match dep
                .gate(oport)
                .map_err(|e| e.to_string())
                .and_then(|g| g.materialize(oport_name(oport)).map_err(|e| e.to_string()))
            {
                Ok(v) => v,
                Err(e) => return Outcome::fail(Value::Null, e),
            };
            let ledger = dep.merged_ledger();
            let mut traces = Vec::new();
            let mut counts = Vec::new();
            for e in &view.entries {
                match trace(&ledger, e.record.id()) {
                    Ok(dag) => {
                        let leaves: Vec<String> = dag.leaves().iter().map(ToString::to_string).collect();
                        counts.push(leaves.len());
                        traces.push(
                            json!({"record": e.record.id().to_string(), "nodes": dag.nodes.len(), "leaves": leaves}),
                        );
                    }
                    Err(err) => return Outcome::fail(Value::Array(traces), err.to_string()),
                }
            }
            let failure = expect_leaves
                .as_ref()
                .filter(|want| **want != counts)
                .map(|want| format!("leaf counts {counts:?}, expected {want:?}"));
            Outcome::check(Value::Array(traces), failure)
        }
        Action::Audit { expect_violations } => match dep.audit() {
            Ok(reports) => {
                let total: usize = reports.values().map(|r| r.violations.len()).sum();
                let detail = serde_json::to_value(&reports).expect("audit reports serialize");
                let failure = expect_violations
                    .filter(|n| *n != total)
                    .map(|n| format!("{total} violations, expected {n}"));
                Outcome::check(detail, failure)
            }
            Err(e) => Outcome::fail(Value::Null, e.to_string()),
        },
    }
}

/// Verifies and activates every circuit, then runs the workload against a
/// live deployment. The deployment is returned for further inspection.
pub fn run_deployment(config: &ScenarioConfig, opts: &RunOptions) -> Result<(RunReport, Deployment), HarnessError> {
    let mut dep = Deployment::build(config, opts)?;
    let mut circuits = Vec::new();
    for spec in &config.circuits {
        let name = spec.name().to_string();
        let verification = dep.verify(&name)?;
        let mut outcome = CircuitOutcome {
            name: name.clone(),
            verification,
            activated: false,
            error: None,
            failed_edge: None,
            auth_failures: BTreeMap::new(),
            edges: Vec::new(),
        };
        if outcome.verification.passed {
            match dep.activate(&name) {
                Ok(()) => outcome.activated = true,
                Err(e) => {
                    if let CircuitError::ActivationFailed { edge, .. } = &e {
                        outcome.failed_edge = Some(*edge);
                    }
                    outcome.error = Some(e.to_string());
                    outcome.auth_failures = dep
                        .probe(&name)
                        .into_iter()
                        .filter(|(_, err)| err.kind() == "AuthFailed")
                        .map(|(i, err)| (i, err.to_string()))
                        .collect();
                }
            }
        } else {
            outcome.error = Some(format!(
                "verification failed: {}",
                outcome
                    .verification
                    .failed_checks()
                    .iter()
                    .map(|k| k.label())
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
        circuits.push(outcome);
    }

    let mut steps = Vec::new();
    for (index, step) in config.workload.iter().enumerate() {
        let o = execute(&mut dep, step);
        if !o.passed {
            log::warn!(
                "step {index} ({}) failed: {}",
                step.action.name(),
                o.error.as_deref().unwrap_or("")
            );
        }
        steps.push(StepOutcome {
            index,
            at: step.at,
            action: step.action.name().to_string(),
            passed: o.passed,
            detail: o.detail,
            error: o.error,
        });
    }

    if let Err(e) = dep.settle(SETTLE_TIMEOUT) {
        log::warn!("deployment did not settle: {e}");
    }
    for c in &mut circuits {
        if let Some(running) = dep.circuit(&c.name) {
            c.edges = running.status().edges;
        }
    }
    let mut views = BTreeMap::new();
    for g in &config.gates {
        let gate = dep.gate(g.address())?;
        for o in g.oports() {
            let view = gate
                .materialize(&o.name)
                .map_err(|e| HarnessError::Deploy(e.to_string()))?;
            let records = view.records();
            views.insert(
                format!("{}/{}", g.address(), o.name),
                ViewDigest {
                    records: records.len(),
                    events: view.seq,
                    digest: view_digest(&records),
                },
            );
        }
    }
    let audit = dep.audit()?;
    let passed = circuits.iter().all(CircuitOutcome::passed) && steps.iter().all(|s| s.passed);
    Ok((
        RunReport {
            scenario: config.name.clone(),
            transport: opts.transport,
            passed,
            circuits,
            steps,
            views,
            audit,
        },
        dep,
    ))
}

/// Runs a scenario end to end and tears the deployment down.
pub fn run(config: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    let (report, mut dep) = run_deployment(config, opts)?;
    dep.shutdown();
    Ok(report)
}
