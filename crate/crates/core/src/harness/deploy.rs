//! Instantiates a scenario: one registry, ledger and registry service per
//! domain, one listener per gate, and peering between registries.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::HarnessError;
use crate::circuit::{self, CircuitEnv, CircuitError, RunningCircuit, VerificationReport};
use crate::dataflow::Operator;
use crate::gate::{Gate, GateHandle};
use crate::governance::{audit, AuditReport, LedgerEntry, Origin, ProvenanceLedger, ProvenanceSource};
use crate::model::{DataRecord, GateAddress, Principal, RecordId};
use crate::resolution::{resolve_cross, DomainRegistry, PeeringTable, ResolveError, Selector, SharedRegistry};
use crate::store::StoreBackend;
use crate::wire::{
    serve, GateIdentity, InprocNetwork, KeyLookup, Network, RegistryKeyring, RegistryService, RemoteRegistry,
    ServerHandle, SessionConfig, TcpNetwork, WireClient, WireError, WireService, REGISTRY_GATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    #[default]
    Inproc,
    Tcp,
}

impl std::str::FromStr for Transport {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inproc" => Ok(Transport::Inproc),
            "tcp" => Ok(Transport::Tcp),
            other => Err(format!("unknown transport {other:?}, expected inproc or tcp")),
        }
    }
}

impl std::fmt::Display for Transport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Transport::Inproc => "inproc",
            Transport::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub transport: Transport,
    /// Put every gate's store in a file under this directory.
    pub store_dir: Option<PathBuf>,
    pub session: SessionConfig,
}

/// Union of every domain's ledger. Entries minted on a gate win over
/// imported copies of the same record.
#[derive(Debug, Default)]
pub struct MergedLedger {
    entries: HashMap<RecordId, LedgerEntry>,
}

impl MergedLedger {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ProvenanceSource for MergedLedger {
    fn lookup(&self, id: &RecordId) -> Option<&LedgerEntry> {
        self.entries.get(id)
    }
}

pub struct Deployment {
    config: ScenarioConfig,
    transport: Transport,
    env: Arc<CircuitEnv>,
    ledgers: BTreeMap<String, Arc<Mutex<ProvenanceLedger>>>,
    registry_identities: BTreeMap<String, GateIdentity>,
    circuits: BTreeMap<String, RunningCircuit>,
    servers: Vec<ServerHandle>,
    rng: ChaCha20Rng,
}

impl std::fmt::Debug for Deployment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Deployment")
            .field("scenario", &self.config.name)
            .field("transport", &self.transport)
            .finish()
    }
}

fn registry_address(domain: &str) -> GateAddress {
    GateAddress::for_gate(domain, REGISTRY_GATE).expect("domain names are valid segments")
}

impl Deployment {
    pub fn build(config: &ScenarioConfig, opts: &RunOptions) -> Result<Self, HarnessError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.identities.seed);
        let network: Arc<dyn Network> = match opts.transport {
            Transport::Inproc => Arc::new(InprocNetwork::new()),
            Transport::Tcp => Arc::new(TcpNetwork::new()),
        };

        let mut identities = BTreeMap::new();
        for g in &config.gates {
            let addr = g.address().clone();
            let id = match config.identities.keys.get(&addr) {
                Some(secret) => GateIdentity::from_secret_hex(addr.clone(), secret)
                    .map_err(|e| HarnessError::Validation(format!("key material for {addr}: {e}")))?,
                None => GateIdentity::generate_from(addr.clone(), &mut rng),
            };
            identities.insert(addr, id);
        }
        let mut registry_identities = BTreeMap::new();
        for d in &config.domains {
            registry_identities.insert(
                d.name.clone(),
                GateIdentity::generate_from(registry_address(&d.name), &mut rng),
            );
        }

        let mut registries = BTreeMap::new();
        let mut ledgers = BTreeMap::new();
        for d in &config.domains {
            let reg = DomainRegistry::new(&d.name).map_err(|e| HarnessError::Validation(e.to_string()))?;
            registries.insert(d.name.clone(), SharedRegistry::new(reg));
            ledgers.insert(d.name.clone(), Arc::new(Mutex::new(ProvenanceLedger::new())));
        }
        for g in &config.gates {
            let addr = g.address();
            let registry = &registries[addr.domain()];
            let mut reg = registry.write();
            reg.register(g.metadata().clone())
                .map_err(|e| HarnessError::Deploy(format!("registering {addr}: {e}")))?;
            let key = if config.identities.tampered.contains(addr) {
                GateIdentity::generate_from(addr.clone(), &mut rng).verification_key_hex()
            } else {
                identities[addr].verification_key_hex()
            };
            reg.register_key(addr, &key)
                .map_err(|e| HarnessError::Deploy(format!("registering key of {addr}: {e}")))?;
        }
        let keyring = RegistryKeyring::new(registries.values().cloned());
        for id in registry_identities.values() {
            keyring.extra().insert(id.address(), id.verifying_key());
        }
        let keys: Arc<dyn KeyLookup> = Arc::new(keyring);

        let mut gates = BTreeMap::new();
        for g in &config.gates {
            let addr = g.address();
            let mut spec = g.clone();
            if let Some(dir) = &opts.store_dir {
                spec = spec.with_store(StoreBackend::File(dir.join(format!(
                    "{}.{}.jsonl",
                    addr.domain(),
                    addr.gate()
                ))));
            }
            let gate = Gate::create(spec, Some(ledgers[addr.domain()].clone()))
                .map_err(|e| HarnessError::Deploy(format!("creating {addr}: {e}")))?;
            gates.insert(addr.clone(), gate);
        }

        let mut servers = Vec::new();
        for (addr, gate) in &gates {
            let service: Arc<dyn WireService> = Arc::new(gate.clone());
            servers.push(
                serve(
                    network.clone(),
                    identities[addr].clone(),
                    keys.clone(),
                    service,
                    opts.session,
                )
                .map_err(|e| HarnessError::Deploy(format!("listening for {addr}: {e}")))?,
            );
        }
        for (domain, id) in &registry_identities {
            let service: Arc<dyn WireService> = Arc::new(RegistryService::new(Arc::new(registries[domain].clone())));
            servers.push(
                serve(network.clone(), id.clone(), keys.clone(), service, opts.session)
                    .map_err(|e| HarnessError::Deploy(format!("listening for {}: {e}", id.address())))?,
            );
        }

        let mut peers = BTreeMap::new();
        for d in &config.domains {
            let mut table = PeeringTable::new(&d.name);
            for p in &d.peers {
                let remote =
                    RemoteRegistry::new(p, registry_identities[&d.name].clone(), keys.clone(), network.clone())
                        .map_err(|e| HarnessError::Deploy(e.to_string()))?;
                table
                    .add_peer(p, Arc::new(remote))
                    .map_err(|e| HarnessError::Deploy(format!("peering {} with {p}: {e}", d.name)))?;
            }
            peers.insert(d.name.clone(), table);
        }

        log::info!(
            "deployed {} with {} domains and {} gates over {}",
            config.name,
            config.domains.len(),
            gates.len(),
            opts.transport
        );
        Ok(Self {
            config: config.clone(),
            transport: opts.transport,
            env: Arc::new(CircuitEnv {
                registries,
                peers,
                gates,
                identities,
                keys,
                network,
                session: opts.session,
            }),
            ledgers,
            registry_identities,
            circuits: BTreeMap::new(),
            servers,
            rng,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn env(&self) -> &Arc<CircuitEnv> {
        &self.env
    }

    pub fn gate(&self, addr: &GateAddress) -> Result<&GateHandle, HarnessError> {
        self.env
            .gate(addr)
            .ok_or_else(|| HarnessError::Validation(format!("undefined gate {}", addr.gate_only())))
    }

    /// Identity of a domain's registry service.
    pub fn registry_identity(&self, domain: &str) -> Option<&GateIdentity> {
        self.registry_identities.get(domain)
    }

    pub fn verify(&self, circuit: &str) -> Result<VerificationReport, HarnessError> {
        let spec = self
            .config
            .circuit(circuit)
            .ok_or_else(|| HarnessError::Validation(format!("undefined circuit {circuit}")))?;
        Ok(circuit::verify(spec, &self.env))
    }

    pub fn activate(&mut self, circuit: &str) -> Result<(), CircuitError> {
        let spec = self
            .config
            .circuit(circuit)
            .ok_or_else(|| CircuitError::InvalidSpec(format!("undefined circuit {circuit}")))?;
        let running = circuit::activate(spec, self.env.clone())?;
        self.circuits.insert(circuit.to_string(), running);
        Ok(())
    }

    /// Handshake failures per edge of a circuit.
    pub fn probe(&self, circuit: &str) -> BTreeMap<usize, WireError> {
        self.config
            .circuit(circuit)
            .map(|spec| circuit::probe(spec, &self.env))
            .unwrap_or_default()
    }

    pub fn circuit(&self, name: &str) -> Option<&RunningCircuit> {
        self.circuits.get(name)
    }

    pub fn running_circuits(&self) -> impl Iterator<Item = &RunningCircuit> {
        self.circuits.values()
    }

    /// A fresh source record id from the scenario's seeded generator.
    pub fn next_record_id(&mut self) -> RecordId {
        RecordId::random_from(&mut self.rng)
    }

    fn published_total(&self) -> u64 {
        self.env
            .gates
            .values()
            .flat_map(|g| g.spec().oports().iter().map(move |o| g.last_seq(&o.name).unwrap_or(0)))
            .sum()
    }

    /// Waits until every open edge of every running circuit has caught up
    /// and no oport publishes anything further.
    pub fn settle(&self, timeout: Duration) -> Result<(), CircuitError> {
        let deadline = Instant::now() + timeout;
        loop {
            let before = self.published_total();
            for c in self.circuits.values() {
                c.wait_quiescent(deadline.saturating_duration_since(Instant::now()))?;
            }
            if self.published_total() == before {
                return Ok(());
            }
        }
    }

    /// Queries an oport directly, or over a wire authenticated as `via`.
    pub fn query(
        &self,
        oport: &GateAddress,
        principal: &Principal,
        via: Option<&GateAddress>,
        filter: Option<&Operator>,
    ) -> Result<Vec<DataRecord>, WireError> {
        let name = oport
            .oport()
            .ok_or_else(|| WireError::UnknownOPort(format!("{oport} names no oport")))?;
        match via {
            None => {
                let gate = self
                    .env
                    .gate(oport)
                    .ok_or_else(|| WireError::Unreachable(oport.to_string()))?;
                Ok(gate.query(name, principal, filter)?)
            }
            Some(v) => {
                let id = self
                    .env
                    .identities
                    .get(&v.gate_only())
                    .ok_or_else(|| WireError::AuthFailed(format!("no identity for {v}")))?;
                let mut client = WireClient::connect(
                    self.env.network.as_ref(),
                    id,
                    self.env.keys.as_ref(),
                    oport,
                    self.env.session,
                )?;
                let out = client.query(name, principal, filter);
                client.close();
                out
            }
        }
    }

    /// Resolves a selector on behalf of `from`, locally first and then
    /// through the registries its domain peers with.
    pub fn resolve(&self, from: &GateAddress, selector: &Selector) -> Result<GateAddress, ResolveError> {
        let gate = self
            .env
            .gate(from)
            .ok_or_else(|| ResolveError::InvalidSelector(format!("undefined gate {from}")))?;
        let domain = from.domain();
        let reg = self.env.registries[domain].read();
        resolve_cross(&reg, &self.env.peers[domain], gate.metadata(), selector)
    }

    pub fn merged_ledger(&self) -> MergedLedger {
        let mut merged = MergedLedger::default();
        for ledger in self.ledgers.values() {
            for e in ledger.lock().entries() {
                match merged.entries.get(&e.record) {
                    Some(existing) if existing.origin != Origin::Imported => {}
                    _ => {
                        merged.entries.insert(e.record, e.clone());
                    }
                }
            }
        }
        merged
    }

    /// Audits each domain's rules against its gates and the records its
    /// ledger holds.
    pub fn audit(&self) -> Result<BTreeMap<String, AuditReport>, HarnessError> {
        let merged = self.merged_ledger();
        let mut out = BTreeMap::new();
        for d in &self.config.domains {
            if d.rules.is_empty() {
                continue;
            }
            let gates: Vec<_> = self
                .config
                .gates
                .iter()
                .filter(|g| g.address().domain() == d.name)
                .map(|g| g.metadata().clone())
                .collect();
            let records: Vec<RecordId> = self.ledgers[&d.name]
                .lock()
                .entries()
                .filter(|e| e.origin != Origin::Imported)
                .map(|e| e.record)
                .collect();
            let report = audit(&d.rules, &gates, &records, &merged).map_err(|e| HarnessError::Deploy(e.to_string()))?;
            out.insert(d.name.clone(), report);
        }
        Ok(out)
    }

    /// Stops circuits, listeners and gates.
    pub fn shutdown(&mut self) {
        for c in self.circuits.values_mut() {
            c.stop();
        }
        self.circuits.clear();
        for s in &mut self.servers {
            s.shutdown();
        }
        self.servers.clear();
        for g in self.env.gates.values() {
            g.shutdown();
        }
    }
}

impl Drop for Deployment {
    fn drop(&mut self) {
        self.shutdown();
    }
}
