//! Scenario configuration: domains, gates, identities, circuits and a workload.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::circuit::CircuitSpec;
use crate::dataflow::Operator;
use crate::gate::{GateSpec, SourceSpec};
use crate::governance::GovernanceRule;
use crate::model::{validate_segment, GateAddress, Principal};
use crate::resolution::Selector;
use crate::wire::REGISTRY_GATE;

fn default_seed() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub domains: Vec<DomainConfig>,
    #[serde(default)]
    pub gates: Vec<GateSpec>,
    #[serde(default)]
    pub identities: IdentityConfig,
    #[serde(default)]
    pub circuits: Vec<CircuitSpec>,
    #[serde(default)]
    pub workload: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    /// Domains whose registries this domain may resolve against.
    #[serde(default)]
    pub peers: Vec<String>,
    #[serde(default)]
    pub rules: Vec<GovernanceRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityConfig {
    /// Generate keys for gates without explicit key material.
    #[serde(default = "default_true")]
    pub generate: bool,
    /// Seed for generated keys and source record ids.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Secret keys (hex) by gate address.
    #[serde(default)]
    pub keys: BTreeMap<GateAddress, String>,
    /// Gates whose registered verification key does not match their secret.
    #[serde(default)]
    pub tampered: BTreeSet<GateAddress>,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self {
            generate: true,
            seed: default_seed(),
            keys: BTreeMap::new(),
            tampered: BTreeSet::new(),
        }
    }
}

/// One workload step. `at` is logical time and becomes the timestamp of
/// ingested records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// Ingests source records built from the given payloads.
    Ingest {
        gate: GateAddress,
        iport: String,
        records: Vec<Value>,
    },
    /// Checks an oport's materialized view.
    Expect {
        oport: GateAddress,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        count: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        records: Option<Vec<Value>>,
        #[serde(default)]
        unordered: bool,
    },
    Fault {
        circuit: String,
        edge: usize,
    },
    Reconnect {
        circuit: String,
        edge: usize,
    },
    /// Queries an oport, over a wire when `via` names the calling gate.
    Query {
        oport: GateAddress,
        #[serde(rename = "as")]
        principal: Principal,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        via: Option<GateAddress>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        filter: Option<Operator>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect_count: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect_error: Option<String>,
    },
    Resolve {
        from: GateAddress,
        selector: Selector,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect: Option<GateAddress>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect_error: Option<String>,
    },
    /// Traces every record of an oport view back to its sources.
    Trace {
        oport: GateAddress,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect_leaves: Option<Vec<usize>>,
    },
    Audit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect_violations: Option<usize>,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Ingest { .. } => "ingest",
            Action::Expect { .. } => "expect",
            Action::Fault { .. } => "fault",
            Action::Reconnect { .. } => "reconnect",
            Action::Query { .. } => "query",
            Action::Resolve { .. } => "resolve",
            Action::Trace { .. } => "trace",
            Action::Audit { .. } => "audit",
        }
    }
}

/// Parses and cross-validates a scenario.
pub fn parse(text: &str) -> Result<ScenarioConfig, HarnessError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: ScenarioConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        HarnessError::Parse {
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| HarnessError::Parse {
        line: e.line(),
        column: e.column(),
        field: ".".into(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<ScenarioConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    parse(&text)
}

fn invalid(msg: String) -> HarnessError {
    HarnessError::Validation(msg)
}

impl ScenarioConfig {
    pub fn gate(&self, addr: &GateAddress) -> Option<&GateSpec> {
        let addr = addr.gate_only();
        self.gates.iter().find(|g| *g.address() == addr)
    }

    pub fn circuit(&self, name: &str) -> Option<&CircuitSpec> {
        self.circuits.iter().find(|c| c.name() == name)
    }

    fn require_gate(&self, addr: &GateAddress, what: &str) -> Result<&GateSpec, HarnessError> {
        self.gate(addr)
            .ok_or_else(|| invalid(format!("{what} references undefined gate {}", addr.gate_only())))
    }

    fn require_oport(&self, addr: &GateAddress, what: &str) -> Result<(), HarnessError> {
        let gate = self.require_gate(addr, what)?;
        let oport = addr
            .oport()
            .ok_or_else(|| invalid(format!("{what} needs an oport address, got {addr}")))?;
        if gate.oport(oport).is_none() {
            return Err(invalid(format!("{what} references undefined oport {addr}")));
        }
        Ok(())
    }

    fn require_iport(&self, gate: &GateAddress, iport: &str, what: &str) -> Result<(), HarnessError> {
        if self.require_gate(gate, what)?.iport(iport).is_none() {
            return Err(invalid(format!("{what} references undefined iport {gate}/{iport}")));
        }
        Ok(())
    }

    /// Checks every cross reference and the workload ordering.
    pub fn validate(&self) -> Result<(), HarnessError> {
        validate_segment(&self.name).map_err(|e| invalid(format!("scenario name: {e}")))?;
        if self.domains.is_empty() {
            return Err(invalid("scenario defines no domains".into()));
        }
        let mut domains = BTreeSet::new();
        for d in &self.domains {
            validate_segment(&d.name).map_err(|e| invalid(format!("domain name: {e}")))?;
            if !domains.insert(d.name.as_str()) {
                return Err(invalid(format!("domain {} defined twice", d.name)));
            }
        }
        for d in &self.domains {
            for p in &d.peers {
                if !domains.contains(p.as_str()) {
                    return Err(invalid(format!("domain {} peers with undefined domain {p}", d.name)));
                }
                if *p == d.name {
                    return Err(invalid(format!("domain {} peers with itself", d.name)));
                }
            }
        }
        let mut gates = BTreeSet::new();
        for g in &self.gates {
            let a = g.address();
            if !domains.contains(a.domain()) {
                return Err(invalid(format!("gate {a} belongs to undefined domain {}", a.domain())));
            }
            if a.gate() == REGISTRY_GATE {
                return Err(invalid(format!(
                    "gate name {REGISTRY_GATE} is reserved for the registry service ({a})"
                )));
            }
            if !gates.insert(a.clone()) {
                return Err(invalid(format!("gate {a} defined twice")));
            }
        }
        for g in &self.gates {
            for ip in g.iports() {
                if let Some(SourceSpec::Address(src)) = &ip.source {
                    self.require_oport(src, &format!("source of {}/{}", g.address(), ip.name))?;
                }
                if let Some(SourceSpec::Selector(sel)) = &ip.source {
                    if let Some(h) = &sel.domain_hint {
                        if !domains.contains(h.as_str()) {
                            return Err(invalid(format!(
                                "selector of {}/{} hints undefined domain {h}",
                                g.address(),
                                ip.name
                            )));
                        }
                    }
                }
            }
        }
        for d in &self.domains {
            for r in &d.rules {
                r.validate()
                    .map_err(|e| invalid(format!("rule in domain {}: {e}", d.name)))?;
                if let GovernanceRule::RequireField { oport, .. } = r {
                    self.require_oport(oport, &format!("rule in domain {}", d.name))?;
                }
            }
        }
        for a in self.identities.keys.keys() {
            self.require_gate(a, "key material")?;
        }
        for a in &self.identities.tampered {
            self.require_gate(a, "tampered key")?;
        }
        if !self.identities.generate {
            for g in &self.gates {
                if !self.identities.keys.contains_key(g.address()) {
                    return Err(invalid(format!(
                        "no key material for {} and generation is off",
                        g.address()
                    )));
                }
            }
        }
        let mut circuits = BTreeSet::new();
        for c in &self.circuits {
            if !circuits.insert(c.name()) {
                return Err(invalid(format!("circuit {} defined twice", c.name())));
            }
            for (i, e) in c.edges().iter().enumerate() {
                let what = format!("edge {i} of circuit {}", c.name());
                self.require_iport(&e.to, &e.iport, &what)?;
                if let Some(from) = &e.from {
                    self.require_oport(from, &what)?;
                }
            }
        }
        let mut last = 0;
        for (i, s) in self.workload.iter().enumerate() {
            if s.at < last {
                return Err(invalid(format!(
                    "step {i} at {} precedes the previous step at {last}",
                    s.at
                )));
            }
            last = s.at;
            let what = format!("step {i}");
            match &s.action {
                Action::Ingest { gate, iport, records } => {
                    self.require_iport(gate, iport, &what)?;
                    if records.is_empty() {
                        return Err(invalid(format!("step {i} ingests no records")));
                    }
                }
                Action::Expect { oport, .. } | Action::Trace { oport, .. } => self.require_oport(oport, &what)?,
                Action::Fault { circuit, edge } | Action::Reconnect { circuit, edge } => {
                    let c = self
                        .circuit(circuit)
                        .ok_or_else(|| invalid(format!("step {i} references undefined circuit {circuit}")))?;
                    if *edge >= c.edges().len() {
                        return Err(invalid(format!(
                            "step {i} references edge {edge} of circuit {circuit}, which has {}",
                            c.edges().len()
                        )));
                    }
                }
                Action::Query { oport, via, .. } => {
                    self.require_oport(oport, &what)?;
                    if let Some(v) = via {
                        self.require_gate(v, &what)?;
                    }
                }
                Action::Resolve { from, .. } => {
                    self.require_gate(from, &what)?;
                }
                Action::Audit { .. } => {}
            }
        }
        Ok(())
    }
}
