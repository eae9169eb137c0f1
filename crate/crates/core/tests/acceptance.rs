//! Acceptance suite. Every criterion runs inside one test so that the frame
//! trace validated by criterion 5 covers all wire traffic of the suite.
//!
//! Run with `cargo test -p ioda-core --test acceptance -- --nocapture` to see
//! the per-criterion lines.

mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use ioda_core::circuit::CheckKind;
use ioda_core::dataflow::{apply_dataflow, BatchRef, Dataflow, Operator};
use ioda_core::gate::{Gate, GateError, GateHandle, GateSpec, ViewEvent};
use ioda_core::governance::{check, trace};
use ioda_core::harness::{self, Deployment, RunOptions, ScenarioConfig, Transport};
use ioda_core::model::{
    DataRecord, FieldSpec, FieldType, GateAddress, GateMetadata, OPortMetadata, Permission, Policy, PolicyEntry,
    Principal, RecordId, Schema,
};
use ioda_core::resolution::{
    resolve, resolve_cross, resolve_exported, DomainRegistry, PeeringTable, RegistryEndpoint, ResolveError,
    SchemaRequirement, Selector, SharedRegistry,
};
use ioda_core::wire::frame::{read_frame, write_frame};
use ioda_core::wire::session::transcript;
use ioda_core::wire::trace::Side;
use ioda_core::wire::{
    self, pipe, serve, Frame, FrameType, GateIdentity, InprocNetwork, KeyDirectory, Network, SessionConfig, TcpNetwork,
    WireClient, WireError, WireSession,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use oracle::dataflow::Row;
use oracle::{engine_sources, keyed, sorted};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn addr(s: &str) -> GateAddress {
    s.parse().unwrap()
}

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn source_id(space: u64, n: u64) -> RecordId {
    let mut b = [0u8; 16];
    b[..8].copy_from_slice(&space.to_be_bytes());
    b[8..].copy_from_slice(&n.to_be_bytes());
    RecordId::from_bytes(b)
}

const WORDS: [&str; 4] = ["x", "y", "z", "w"];

fn half(rng: &mut ChaCha8Rng) -> Value {
    json!(rng.gen_range(-8..8) as f64 * 0.5 + 0.25)
}

// ---------------------------------------------------------------------------
// 1. Operator oracle equivalence

fn random_payload(rng: &mut ChaCha8Rng) -> Value {
    let mut o = Map::new();
    match rng.gen_range(0..100) {
        0..=79 => {
            o.insert("a".into(), json!(rng.gen_range(-5..=5)));
        }
        80..=84 => {
            o.insert("a".into(), Value::Null);
        }
        85..=86 => {
            o.insert("a".into(), json!("bad"));
        }
        _ => {}
    }
    match rng.gen_range(0..100) {
        0..=69 => {
            o.insert("b".into(), half(rng));
        }
        70..=79 => {
            o.insert("b".into(), json!(rng.gen_range(-3..=3)));
        }
        _ => {}
    }
    if rng.gen_bool(0.85) {
        o.insert("s".into(), json!(WORDS.choose(rng).unwrap()));
    }
    if rng.gen_bool(0.7) {
        o.insert("flag".into(), json!(rng.gen_bool(0.5)));
    }
    if rng.gen_bool(0.5) {
        o.insert(
            "m".into(),
            json!({"x": rng.gen_range(-3..=3), "y": WORDS.choose(rng).unwrap()}),
        );
    }
    if rng.gen_bool(0.2) {
        o.insert("big".into(), json!(i64::MAX / 3 + rng.gen_range(0..1000)));
    }
    Value::Object(o)
}

#[derive(Clone, Copy)]
enum Kind {
    Int,
    Float,
    Str,
    Bool,
}

const FIELDS: [(&[&str], Kind); 6] = [
    (&["a"], Kind::Int),
    (&["b"], Kind::Float),
    (&["s"], Kind::Str),
    (&["flag"], Kind::Bool),
    (&["m", "x"], Kind::Int),
    (&["big"], Kind::Int),
];

fn literal(rng: &mut ChaCha8Rng, kind: Kind) -> Value {
    match kind {
        Kind::Int => json!(rng.gen_range(-5..=5)),
        Kind::Float if rng.gen_bool(0.5) => json!(rng.gen_range(-3..=3)),
        Kind::Float => half(rng),
        Kind::Str => json!(WORDS.choose(rng).unwrap()),
        Kind::Bool => json!(rng.gen_bool(0.5)),
    }
}

fn random_filter(rng: &mut ChaCha8Rng, mismatch_rate: f64) -> Value {
    let (path, kind) = *FIELDS[..5].choose(rng).unwrap();
    let kind = if rng.gen_bool(mismatch_rate) {
        *[Kind::Int, Kind::Str, Kind::Bool].choose(rng).unwrap()
    } else {
        kind
    };
    let cmp = *["==", "!=", "<", "<=", ">", ">="].choose(rng).unwrap();
    json!({"op": "filter", "path": path, "cmp": cmp, "value": literal(rng, kind)})
}

fn random_project(rng: &mut ChaCha8Rng, with_big: bool) -> Value {
    let all: [&[&str]; 7] = [&["a"], &["b"], &["s"], &["flag"], &["m", "x"], &["m", "y"], &["big"]];
    let all = if with_big { &all[..] } else { &all[..6] };
    let n = rng.gen_range(1..=4);
    let paths: Vec<&[&str]> = all.choose_multiple(rng, n).copied().collect();
    json!({"op": "project", "paths": paths})
}

fn random_sort(rng: &mut ChaCha8Rng) -> Value {
    let (path, _) = *FIELDS[..5].choose(rng).unwrap();
    json!({"op": "sort", "path": path, "order": if rng.gen_bool(0.5) { "asc" } else { "desc" }})
}

fn random_operator(rng: &mut ChaCha8Rng) -> Value {
    match rng.gen_range(0..5) {
        0 => random_filter(rng, 0.1),
        1 => random_project(rng, true),
        2 => random_sort(rng),
        3 => {
            let (l, r) = if rng.gen_bool(0.7) { ("s", "s") } else { ("a", "v") };
            json!({"op": "join", "right": {"table": "t"}, "left_path": [l], "right_path": [r]})
        }
        _ => {
            let paths: [&[&str]; 5] = [&["a"], &["b"], &["big"], &["m", "x"], &["s"]];
            let path = if rng.gen_bool(0.1) {
                paths[4]
            } else {
                *paths[..4].choose(rng).unwrap()
            };
            let f = *["sum", "avg", "min", "max", "count"].choose(rng).unwrap();
            json!({"op": "window", "count": rng.gen_range(1..=5), "fn": f, "path": path, "output": "out"})
        }
    }
}

fn random_table(rng: &mut ChaCha8Rng, space: u64) -> Vec<DataRecord> {
    (0..rng.gen_range(0..=6))
        .map(|i| {
            let key = match rng.gen_range(0..100) {
                0..=84 => json!(WORDS.choose(rng).unwrap()),
                85..=96 => json!(rng.gen_range(-2..=2)),
                _ => json!([1]),
            };
            let payload = json!({"s": key, "v": rng.gen_range(-5..=5)});
            DataRecord::source(source_id(space, 1000 + i), 0, payload).unwrap()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    const CASES: u64 = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut errors, mut rows) = (0, 0);
    for case in 0..CASES {
        let input: Vec<DataRecord> = (0..rng.gen_range(0..=30))
            .map(|i| DataRecord::source(source_id(case, i), i, random_payload(&mut rng)).unwrap())
            .collect();
        let table = random_table(&mut rng, case);
        let ops: Vec<Operator> = (0..rng.gen_range(1..=3))
            .map(|_| serde_json::from_value(random_operator(&mut rng)).unwrap())
            .collect();
        let df = Dataflow::new(ops.clone()).map_err(|e| format!("case {case}: generated pipeline rejected: {e}"))?;

        let engine = apply_dataflow(&df, &input, |r| {
            (r == &BatchRef::Table("t".into())).then(|| table.clone())
        });
        let table_rows: Vec<Row> = table.iter().map(Row::source).collect();
        let input_rows: Vec<Row> = input.iter().map(Row::source).collect();
        let expected = oracle::dataflow::apply(&ops, &input_rows, &|_| table_rows.clone());

        match (engine, expected) {
            (Err(_), Err(_)) => errors += 1,
            (Ok(out), Ok(want)) => {
                let known: BTreeSet<RecordId> = input.iter().chain(&table).map(DataRecord::id).collect();
                let got: Vec<String> = out
                    .iter()
                    .map(|r| keyed(r.payload(), &engine_sources(r, &known)))
                    .collect();
                let want_keys: Vec<String> = want.iter().map(Row::key).collect();
                ensure!(
                    got == want_keys,
                    "case {case}: {}\n engine {got:#?}\n oracle {want_keys:#?}",
                    serde_json::to_string(&ops).unwrap()
                );
                for i in 0..out.len() {
                    for j in i + 1..out.len() {
                        ensure!(
                            (out[i].id() == out[j].id()) == (want[i].sig == want[j].sig),
                            "case {case}: record identity of outputs {i} and {j} disagrees"
                        );
                    }
                }
                rows += out.len();
            }
            (engine, want) => {
                return Err(format!(
                    "case {case}: engine {:?} but oracle {:?} for {}",
                    engine.map(|v| v.len()),
                    want.map(|v| v.len()),
                    serde_json::to_string(&ops).unwrap()
                ))
            }
        }
    }
    Ok(format!(
        "{CASES} pipelines, {rows} output records equal, {errors} type errors raised by both"
    ))
}

// ---------------------------------------------------------------------------
// 2. Resolution determinism and export isolation

fn random_tags(rng: &mut ChaCha8Rng, p: f64) -> BTreeMap<String, String> {
    let vocab: [(&str, &[&str]); 4] = [
        ("kind", &["temp", "light", "air"]),
        ("floor", &["1", "2"]),
        ("vendor", &["acme", "zen"]),
        ("zone", &["north", "south"]),
    ];
    let mut tags = BTreeMap::new();
    for (k, vs) in vocab {
        if rng.gen_bool(p) {
            tags.insert(k.to_string(), vs.choose(rng).unwrap().to_string());
        }
    }
    tags
}

const TYPED: [(&str, FieldType); 3] = [
    ("temp", FieldType::Float),
    ("lux", FieldType::Int),
    ("ok", FieldType::Bool),
];

fn random_meta(rng: &mut ChaCha8Rng, domain: &str, gate: &str) -> GateMetadata {
    let oports = (0..rng.gen_range(1..=3))
        .map(|i| {
            let mut fields = Vec::new();
            for (n, ty) in TYPED {
                if rng.gen_bool(0.5) {
                    fields.push(FieldSpec {
                        name: n.to_string(),
                        ty: if rng.gen_bool(0.2) { FieldType::String } else { ty },
                        required: rng.gen_bool(0.5),
                    });
                }
            }
            let meta = OPortMetadata {
                schema: Schema::new(fields).unwrap(),
                exported: rng.gen_bool(0.5),
                tags: random_tags(rng, 0.2),
            };
            (format!("o{i}"), meta)
        })
        .collect();
    GateMetadata {
        address: GateAddress::for_gate(domain, gate).unwrap(),
        description: String::new(),
        tags: random_tags(rng, 0.6),
        oports,
    }
}

fn random_selector(rng: &mut ChaCha8Rng, hints: &[&str]) -> Selector {
    let mut constraints = random_tags(rng, 0.35);
    let schema_requires: Vec<SchemaRequirement> = if rng.gen_bool(0.3) || constraints.is_empty() {
        let (n, ty) = TYPED.choose(rng).unwrap();
        vec![SchemaRequirement {
            name: n.to_string(),
            ty: *ty,
        }]
    } else {
        Vec::new()
    };
    if constraints.is_empty() && schema_requires.is_empty() {
        constraints.insert("kind".into(), "temp".into());
    }
    Selector {
        constraints,
        schema_requires,
        domain_hint: hints.choose(rng).map(|h| h.to_string()).filter(|_| rng.gen_bool(0.4)),
    }
}

fn as_option(r: Result<GateAddress, ResolveError>) -> Result<Option<GateAddress>, String> {
    match r {
        Ok(a) => Ok(Some(a)),
        Err(ResolveError::NotFound) => Ok(None),
        Err(e) => Err(e.to_string()),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut found = 0;
    for case in 0..500 {
        let metas: Vec<GateMetadata> = (0..rng.gen_range(3..=12))
            .map(|i| random_meta(&mut rng, "d", &format!("g{i}")))
            .collect();
        let mut registries = Vec::new();
        for attempt in 0..3 {
            let mut order = metas.clone();
            match attempt {
                0 => {}
                1 => order.reverse(),
                _ => order.shuffle(&mut rng),
            }
            let mut reg = DomainRegistry::new("d").unwrap();
            for m in order {
                reg.register(m).unwrap();
            }
            registries.push(reg);
        }
        for _ in 0..5 {
            let requester = if rng.gen_bool(0.5) {
                metas.choose(&mut rng).unwrap().clone()
            } else {
                random_meta(&mut rng, "d", "requester")
            };
            let sel = random_selector(&mut rng, &[]);
            let want = oracle::resolve::best(&metas, &requester, &sel, false);
            let want_exported = oracle::resolve::best(&metas, &requester, &sel, true);
            for reg in &registries {
                let got = as_option(resolve(reg, &requester, &sel))?;
                ensure!(
                    got == want,
                    "case {case}: resolved {got:?}, oracle {want:?} for {sel:?}"
                );
                let got = as_option(resolve_exported(reg, &requester, &sel))?;
                ensure!(
                    got == want_exported,
                    "case {case}: exported-only resolved {got:?}, oracle {want_exported:?}"
                );
            }
            found += usize::from(want.is_some());
        }
    }

    let domains = ["d0", "d1", "d2", "d3"];
    let (mut cross, mut isolated) = (0, 0);
    for case in 0..300 {
        let mut metas: BTreeMap<String, Vec<GateMetadata>> = BTreeMap::new();
        let mut shared: BTreeMap<String, SharedRegistry> = BTreeMap::new();
        for d in domains {
            let list: Vec<GateMetadata> = (0..rng.gen_range(2..=5))
                .map(|i| random_meta(&mut rng, d, &format!("g{i}")))
                .collect();
            let mut reg = DomainRegistry::new(d).unwrap();
            for m in &list {
                reg.register(m.clone()).unwrap();
            }
            shared.insert(d.to_string(), SharedRegistry::new(reg));
            metas.insert(d.to_string(), list);
        }
        let mut tables = BTreeMap::new();
        let mut peer_sets = BTreeMap::new();
        for d in domains {
            let mut table = PeeringTable::new(d);
            let mut set = BTreeSet::new();
            for p in domains.iter().filter(|p| **p != d) {
                if rng.gen_bool(0.6) {
                    table
                        .add_peer(p, Arc::new(shared[*p].clone()) as Arc<dyn RegistryEndpoint>)
                        .unwrap();
                    set.insert(p.to_string());
                }
            }
            tables.insert(d, table);
            peer_sets.insert(d, set);
        }
        for _ in 0..10 {
            let home = *domains.choose(&mut rng).unwrap();
            let requester = metas[home].choose(&mut rng).unwrap().clone();
            let sel = random_selector(&mut rng, &domains);
            let got = resolve_cross(&shared[home].read(), &tables[home], &requester, &sel);
            let want = oracle::resolve::cross(&metas, home, &peer_sets[home], &requester, &sel);
            let same = match (&got, &want) {
                (Ok(a), oracle::resolve::Outcome::Found(b)) => a == b,
                (Err(ResolveError::NotFound), oracle::resolve::Outcome::NotFound) => true,
                (Err(ResolveError::UnknownPeer(_)), oracle::resolve::Outcome::UnknownPeer) => true,
                _ => false,
            };
            ensure!(same, "topology {case}: resolve_cross gave {got:?}, oracle {want:?}");
            if let Ok(a) = got {
                if a.domain() != home {
                    cross += 1;
                    let owner = metas[a.domain()].iter().find(|m| m.address == a.gate_only()).unwrap();
                    ensure!(
                        owner.oports[a.oport().unwrap()].exported,
                        "topology {case}: non-exported {a} resolved for {}",
                        requester.address
                    );
                }
            } else {
                isolated += 1;
            }
        }
    }
    Ok(format!(
        "500 registries x 3 registration orders agree with the oracle ({found} hits); \
         300 topologies: {cross} cross-domain hits all exported, {isolated} misses"
    ))
}

// ---------------------------------------------------------------------------
// 3. RBAC lattice

fn rbac_policy(grant: &BTreeSet<Permission>, on: &str) -> Policy {
    Policy::new(vec![PolicyEntry {
        role: "granted".into(),
        oport: on.into(),
        permissions: grant.clone(),
    }])
    .unwrap()
}

fn rbac_gate(address: &str, grant: &BTreeSet<Permission>, on: &str) -> GateHandle {
    let (out, other) = match on {
        "out" => (rbac_policy(grant, on), Policy::default()),
        _ => (Policy::default(), rbac_policy(grant, on)),
    };
    let schema = json!({"fields": [{"name": "v", "type": "int"}]});
    let spec: GateSpec = serde_json::from_value(json!({
        "address": address,
        "iports": [{"name": "in"}],
        "oports": [
            {"name": "out", "schema": schema, "policy": out},
            {"name": "other", "schema": schema, "policy": other}
        ]
    }))
    .unwrap();
    Gate::create(spec, None).unwrap()
}

fn criterion_3() -> Outcome {
    use Permission::{Query, Watch};
    let grants: [BTreeSet<Permission>; 4] = [
        BTreeSet::new(),
        BTreeSet::from([Query]),
        BTreeSet::from([Watch]),
        BTreeSet::from([Query, Watch]),
    ];
    let holdings: [&[&str]; 4] = [&[], &["granted"], &["stranger"], &["granted", "stranger"]];
    let network: Arc<dyn Network> = Arc::new(InprocNetwork::new());
    let client = GateIdentity::generate(addr("rbac/client"));
    let keys = Arc::new(KeyDirectory::new());
    keys.insert(client.address(), client.verifying_key());
    let mut servers = Vec::new();
    let mut cases = 0;
    for (gi, grant) in grants.iter().enumerate() {
        for on in ["out", "other"] {
            let name = format!("rbac/g{gi}{on}");
            let gate = rbac_gate(&name, grant, on);
            let identity = GateIdentity::generate(addr(&name));
            keys.insert(identity.address(), identity.verifying_key());
            servers.push(
                serve(
                    network.clone(),
                    identity,
                    keys.clone(),
                    Arc::new(gate.clone()),
                    SessionConfig::default(),
                )
                .unwrap(),
            );
            let connect = || {
                WireClient::connect(
                    network.as_ref(),
                    &client,
                    keys.as_ref(),
                    &addr(&name),
                    SessionConfig::default(),
                )
                .unwrap()
            };
            let mut querying = connect();
            for held in holdings {
                let who = Principal::new("someone", held.iter().copied()).unwrap();
                for request in [Query, Watch] {
                    let want = held.contains(&"granted") && on == "out" && grant.contains(&request);
                    let label = format!("grant {grant:?} on {on}, roles {held:?}, request {request}");
                    ensure!(
                        check(&rbac_policy(grant, on), &who, "out", request).is_allow() == want,
                        "policy check: {label}"
                    );
                    let (local, remote) = match request {
                        Query => (
                            gate.query("out", &who, None).map(|_| ()),
                            querying.query("out", &who, None).map(|_| ()),
                        ),
                        Watch => (
                            gate.watch("out", &who, 0).map(|_| ()),
                            connect().subscribe("out", &who, 0).map(|s| s.close()),
                        ),
                    };
                    match local {
                        Ok(()) => ensure!(want, "gate allowed {label}"),
                        Err(GateError::AccessDenied { .. }) => ensure!(!want, "gate denied {label}"),
                        Err(e) => return Err(format!("gate failed {label}: {e}")),
                    }
                    match remote {
                        Ok(()) => ensure!(want, "wire allowed {label}"),
                        Err(WireError::AccessDenied(_)) => ensure!(!want, "wire denied {label}"),
                        Err(e) => return Err(format!("wire failed {label}: {e}")),
                    }
                    cases += 1;
                }
            }
            querying.close();
        }
    }
    let nobody = Policy::default();
    for request in [Query, Watch] {
        ensure!(
            !check(
                &nobody,
                &Principal::new("root", ["granted", "admin"]).unwrap(),
                "out",
                request
            )
            .is_allow(),
            "an empty policy allowed {request}"
        );
    }
    Ok(format!(
        "8 grant/request combinations x 4 role sets x 2 oports = {cases} cases, each checked by policy, gate and wire"
    ))
}

// ---------------------------------------------------------------------------
// 4. Watch and wire delivery

fn feed_gate() -> GateHandle {
    let spec: GateSpec = serde_json::from_value(json!({
        "address": "feed/src",
        "iports": [{"name": "in"}],
        "oports": [{
            "name": "out",
            "schema": {"fields": [{"name": "a", "type": "int", "required": true}]},
            "view": [{"op": "filter", "path": ["a"], "cmp": ">=", "value": 0}],
            "policy": [{"role": "reader", "oport": "out", "permissions": ["query", "watch"]}]
        }]
    }))
    .unwrap();
    Gate::create(spec, None).unwrap()
}

enum Via {
    Local,
    Net(Arc<dyn Network>),
}

struct Received {
    from: u64,
    groups: Vec<Vec<ViewEvent>>,
    reconnects: usize,
}

#[derive(Clone)]
struct Feed {
    gate: GateHandle,
    client: GateIdentity,
    keys: Arc<KeyDirectory>,
    total: u64,
    deadline: Instant,
}

fn subscribe_until(feed: Feed, via: Via, from: u64, seed: u64) -> Received {
    let Feed {
        gate,
        client,
        keys,
        total,
        deadline,
    } = feed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let who = Principal::new("feed/sub", ["reader"]).unwrap();
    let mut out = Received {
        from,
        groups: Vec::new(),
        reconnects: 0,
    };
    let mut cursor = from;
    thread::sleep(Duration::from_millis(rng.gen_range(0..20)));
    match via {
        Via::Local => {
            let mut sub = gate.watch("out", &who, cursor).unwrap();
            while cursor < total && Instant::now() < deadline {
                match sub.recv_timeout(Duration::from_millis(20)) {
                    Ok(Some(g)) => {
                        cursor = g.last().unwrap().seq;
                        sub.ack(cursor);
                        out.groups.push(g);
                        if rng.gen_bool(0.1) {
                            sub = gate.watch("out", &who, cursor).unwrap();
                            out.reconnects += 1;
                        }
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        }
        Via::Net(network) => {
            let mut sessions = 0;
            'outer: while cursor < total && Instant::now() < deadline {
                let sub = WireClient::connect(
                    network.as_ref(),
                    &client,
                    keys.as_ref(),
                    &addr("feed/src/out"),
                    SessionConfig::default(),
                )
                .and_then(|c| c.subscribe("out", &who, cursor));
                let mut sub = match sub {
                    Ok(s) => s,
                    Err(_) => {
                        thread::sleep(Duration::from_millis(2));
                        continue;
                    }
                };
                sessions += 1;
                loop {
                    if cursor >= total {
                        sub.close();
                        break 'outer;
                    }
                    match sub.next_group() {
                        Ok(g) => {
                            cursor = g.last().unwrap().seq;
                            out.groups.push(g);
                            if rng.gen_bool(0.1) {
                                sub.kill_switch().kill();
                            }
                            if sub.ack(cursor).is_err() {
                                break;
                            }
                        }
                        Err(_) => break,
                    }
                }
            }
            out.reconnects = sessions.max(1) - 1;
        }
    }
    out
}

fn circuit_fault_run(transport: Transport, rng: &mut ChaCha8Rng) -> Result<(usize, usize), String> {
    let config = harness::parse(
        &json!({
            "name": "relay",
            "domains": [{"name": "a"}, {"name": "b", "peers": ["a"]}],
            "gates": [
                {
                    "address": "a/src",
                    "iports": [{"name": "in"}],
                    "oports": [{
                        "name": "out",
                        "schema": {"fields": [{"name": "n", "type": "int", "required": true}]},
                        "exported": true,
                        "policy": [{"role": "sink", "oport": "out", "permissions": ["watch"]}]
                    }]
                },
                {
                    "address": "b/dst",
                    "roles": ["sink"],
                    "iports": [{"name": "in"}],
                    "oports": [{"name": "all", "schema": {"fields": []}}]
                }
            ],
            "circuits": [{"name": "c", "edges": [{"from": "a/src/out", "to": "b/dst", "iport": "in"}]}]
        })
        .to_string(),
    )
    .map_err(|e| e.to_string())?;
    let mut dep = Deployment::build(
        &config,
        &RunOptions {
            transport,
            ..RunOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    dep.activate("c").map_err(|e| e.to_string())?;
    let (src, dst) = (
        dep.gate(&addr("a/src")).unwrap().clone(),
        dep.gate(&addr("b/dst")).unwrap().clone(),
    );
    let mut degraded = false;
    let mut faults = 0;
    let mut n = 0;
    for _ in 0..50 {
        let batch: Vec<DataRecord> = (0..rng.gen_range(1..=3))
            .map(|_| {
                n += 1;
                DataRecord::source(source_id(40, n), n, json!({"n": n})).unwrap()
            })
            .collect();
        src.ingest("in", &batch).map_err(|e| e.to_string())?;
        let running = dep.circuit("c").unwrap();
        if !degraded && rng.gen_bool(0.1) {
            running.inject_fault(0).map_err(|e| e.to_string())?;
            degraded = true;
            faults += 1;
        } else if degraded && rng.gen_bool(0.3) {
            running.reconnect(0).map_err(|e| e.to_string())?;
            degraded = false;
        }
    }
    if degraded {
        dep.circuit("c").unwrap().reconnect(0).map_err(|e| e.to_string())?;
    }
    dep.settle(Duration::from_secs(10)).map_err(|e| e.to_string())?;
    let published: Vec<RecordId> = src.event_log("out").unwrap().iter().map(|e| e.record.id()).collect();
    let delivered: Vec<RecordId> = dst.scan_store().iter().map(DataRecord::id).collect();
    ensure!(
        published.len() == n as usize,
        "{transport}: {} of {n} records published",
        published.len()
    );
    ensure!(
        delivered == published,
        "{transport}: delivered {} records, published {}",
        delivered.len(),
        published.len()
    );
    Ok((published.len(), faults))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gate = feed_gate();
    let mut batches = Vec::new();
    let mut groups: Vec<Vec<Value>> = Vec::new();
    let mut n = 0;
    for _ in 0..50 {
        let batch: Vec<DataRecord> = (0..rng.gen_range(1..=4))
            .map(|_| {
                n += 1;
                DataRecord::source(source_id(4, n), n, json!({"a": rng.gen_range(-2..=9), "n": n})).unwrap()
            })
            .collect();
        let passing: Vec<Value> = batch
            .iter()
            .map(|r| r.payload().clone())
            .filter(|p| p["a"].as_i64().unwrap() >= 0)
            .collect();
        if !passing.is_empty() {
            groups.push(passing);
        }
        batches.push(batch);
    }
    let log: Vec<Value> = groups.concat();
    let mut group_of = vec![0];
    let mut group_end = vec![0];
    for (gi, g) in groups.iter().enumerate() {
        let end = group_of.len() as u64 + g.len() as u64 - 1;
        for _ in g {
            group_of.push(gi);
            group_end.push(end);
        }
    }
    let total = log.len() as u64;

    let keys = Arc::new(KeyDirectory::new());
    let server_id = GateIdentity::generate(addr("feed/src"));
    let client = GateIdentity::generate(addr("feed/sub"));
    keys.insert(server_id.address(), server_id.verifying_key());
    keys.insert(client.address(), client.verifying_key());
    let inproc: Arc<dyn Network> = Arc::new(InprocNetwork::new());
    let tcp: Arc<dyn Network> = Arc::new(TcpNetwork::new());
    let mut servers = Vec::new();
    for net in [&inproc, &tcp] {
        servers.push(
            serve(
                net.clone(),
                server_id.clone(),
                keys.clone(),
                Arc::new(gate.clone()),
                SessionConfig::default(),
            )
            .unwrap(),
        );
    }

    let deadline = Instant::now() + Duration::from_secs(15);
    let vias = [0, 0, 1, 1, 2];
    let handles: Vec<_> = vias
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let via = match v {
                0 => Via::Local,
                1 => Via::Net(inproc.clone()),
                _ => Via::Net(tcp.clone()),
            };
            let from = rng.gen_range(0..=total / 2);
            let feed = Feed {
                gate: gate.clone(),
                client: client.clone(),
                keys: keys.clone(),
                total,
                deadline,
            };
            thread::spawn(move || subscribe_until(feed, via, from, 400 + i as u64))
        })
        .collect();
    let sever_at: BTreeSet<usize> = (0..3).map(|_| rng.gen_range(5..45)).collect();
    for (i, batch) in batches.iter().enumerate() {
        gate.ingest("in", batch).map_err(|e| e.to_string())?;
        if sever_at.contains(&i) {
            for s in &servers {
                s.sever_all();
            }
        }
        thread::sleep(Duration::from_micros(rng.gen_range(0..1500)));
    }
    while handles.iter().any(|h| !h.is_finished()) && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
    if Instant::now() >= deadline {
        for s in &servers {
            s.sever_all();
        }
    }
    let seq_log: Vec<ViewEvent> = gate.event_log("out").unwrap();
    ensure!(
        seq_log.len() as u64 == total,
        "gate published {} events, oracle expects {total}",
        seq_log.len()
    );
    let mut reconnects = 0;
    for (i, h) in handles.into_iter().enumerate() {
        let r = h.join().map_err(|_| format!("subscriber {i} panicked"))?;
        reconnects += r.reconnects;
        let flat: Vec<&ViewEvent> = r.groups.iter().flatten().collect();
        let seqs: Vec<u64> = flat.iter().map(|e| e.seq).collect();
        ensure!(
            seqs == (r.from + 1..=total).collect::<Vec<_>>(),
            "subscriber {i} from {}: got seqs {seqs:?}",
            r.from
        );
        for e in &flat {
            let k = e.seq as usize;
            ensure!(
                e.record.payload() == &log[k - 1],
                "subscriber {i}: event {k} payload differs from the oracle"
            );
            ensure!(
                e.record.id() == seq_log[k - 1].record.id(),
                "subscriber {i}: event {k} differs from the seq log"
            );
        }
        for g in &r.groups {
            let (first, last) = (g[0].seq as usize, g.last().unwrap().seq as usize);
            ensure!(
                group_of[first] == group_of[last] && group_end[first] == last as u64,
                "subscriber {i}: group {first}..={last} does not end a publication group"
            );
        }
    }
    let (relayed_a, faults_a) = circuit_fault_run(Transport::Inproc, &mut rng)?;
    let (relayed_b, faults_b) = circuit_fault_run(Transport::Tcp, &mut rng)?;
    Ok(format!(
        "50 ingests, {total} events, 5 subscribers gap-free after {reconnects} reconnects; \
         circuit relays of {relayed_a}/{relayed_b} records exact after {} injected faults",
        faults_a + faults_b
    ))
}

// ---------------------------------------------------------------------------
// 5. Wire security

fn manual_hello(conn: &mut wire::Connection, sid: &str, from: &str, to: &str, nonce: &str) -> Result<Frame, WireError> {
    write_frame(
        &mut conn.writer,
        &Frame::new(FrameType::Hello, sid, json!({"from": from, "to": to, "nonce": nonce})),
    )?;
    read_frame(&mut conn.reader)
}

fn replay_trial(rng: &mut ChaCha8Rng, trial: usize) -> Result<(), String> {
    let server = GateIdentity::generate(addr("sec/srv"));
    let client = GateIdentity::generate(addr("sec/cli"));
    let keys = Arc::new(KeyDirectory::new());
    keys.insert(server.address(), server.verifying_key());
    keys.insert(client.address(), client.verifying_key());
    let sid = format!("replay-{trial}");
    let ni = hex::encode(rng.gen::<[u8; 32]>());

    let (mut a, b) = pipe();
    let (srv, k) = (server.clone(), keys.clone());
    let t = thread::spawn(move || WireSession::accept(&srv, b, k.as_ref(), SessionConfig::default()));
    let ch = manual_hello(&mut a, &sid, "sec/cli", "sec/srv", &ni).map_err(|e| e.to_string())?;
    let nr = ch.body["nonce"].as_str().unwrap().to_string();
    let sig = client.sign(&transcript(
        Side::Initiator,
        &sid,
        &addr("sec/cli"),
        &addr("sec/srv"),
        &ni,
        &nr,
    ));
    let captured = Frame::new(FrameType::Auth, &sid, json!({ "sig": sig }));
    write_frame(&mut a.writer, &captured).map_err(|e| e.to_string())?;
    let reply = read_frame(&mut a.reader).map_err(|e| e.to_string())?;
    ensure!(reply.t == FrameType::Auth, "trial {trial}: genuine AUTH was refused");
    write_frame(&mut a.writer, &Frame::new(FrameType::Open, &sid, json!({}))).map_err(|e| e.to_string())?;
    t.join()
        .unwrap()
        .map_err(|e| format!("trial {trial}: genuine session failed: {e}"))?;

    // The captured AUTH is replayed into a fresh session with the same sid and nonce.
    let (mut a, b) = pipe();
    let (srv, k) = (server.clone(), keys.clone());
    let t = thread::spawn(move || WireSession::accept(&srv, b, k.as_ref(), SessionConfig::default()));
    manual_hello(&mut a, &sid, "sec/cli", "sec/srv", &ni).map_err(|e| e.to_string())?;
    write_frame(&mut a.writer, &captured).map_err(|e| e.to_string())?;
    let reply = read_frame(&mut a.reader).map_err(|e| e.to_string())?;
    ensure!(
        reply.t == FrameType::Error,
        "trial {trial}: replayed AUTH answered with {:?}",
        reply.t
    );
    // Data sent after the refusal must never be acted on.
    let _ = write_frame(
        &mut a.writer,
        &Frame::new(FrameType::Query, &sid, json!({"oport": "out"})),
    );
    ensure!(
        matches!(t.join().unwrap(), Err(WireError::AuthFailed(_))),
        "trial {trial}: responder accepted a replayed AUTH"
    );
    Ok(())
}

fn wrong_key_trial(network: &Arc<dyn Network>, trial: usize) -> Result<(), String> {
    let name = format!("sec/gate{trial}");
    let server = GateIdentity::generate(addr(&name));
    let client = GateIdentity::generate(addr("sec/peer"));
    let keys = Arc::new(KeyDirectory::new());
    keys.insert(server.address(), server.verifying_key());
    keys.insert(client.address(), client.verifying_key());
    let gate = feed_gate();
    let mut handle = serve(
        network.clone(),
        server,
        keys.clone(),
        Arc::new(gate),
        SessionConfig::default(),
    )
    .unwrap();

    let impostor = GateIdentity::generate(addr("sec/peer"));
    let r = WireClient::connect(
        network.as_ref(),
        &impostor,
        keys.as_ref(),
        &addr(&name),
        SessionConfig::default(),
    );
    ensure!(
        matches!(r, Err(WireError::AuthFailed(_))),
        "trial {trial}: impostor client got {r:?}"
    );

    // A server presenting a key the registry does not hold.
    let fake = GateIdentity::generate(addr(&format!("sec/fake{trial}")));
    let registered = GateIdentity::generate(addr(&format!("sec/fake{trial}")));
    keys.insert(registered.address(), registered.verifying_key());
    let mut fake_handle = serve(
        network.clone(),
        fake,
        keys.clone(),
        Arc::new(feed_gate()),
        SessionConfig::default(),
    )
    .unwrap();
    let r = WireClient::connect(
        network.as_ref(),
        &client,
        keys.as_ref(),
        &addr(&format!("sec/fake{trial}")),
        SessionConfig::default(),
    );
    ensure!(
        matches!(r, Err(WireError::AuthFailed(_))),
        "trial {trial}: client accepted a wrong server key: {r:?}"
    );

    let ok = WireClient::connect(
        network.as_ref(),
        &client,
        keys.as_ref(),
        &addr(&name),
        SessionConfig::default(),
    );
    ensure!(ok.is_ok(), "trial {trial}: genuine client refused: {:?}", ok.err());
    ok.unwrap().close();
    ensure!(
        !handle.auth_failures().is_empty(),
        "trial {trial}: server did not record the impostor"
    );
    handle.shutdown();
    fake_handle.shutdown();
    Ok(())
}

fn criterion_5(trace_start: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..30 {
        replay_trial(&mut rng, trial)?;
    }
    let inproc: Arc<dyn Network> = Arc::new(InprocNetwork::new());
    let tcp: Arc<dyn Network> = Arc::new(TcpNetwork::new());
    for trial in 0..20 {
        wrong_key_trial(&inproc, trial)?;
    }
    for trial in 20..25 {
        wrong_key_trial(&tcp, trial)?;
    }
    let events = wire::trace::snapshot();
    let sessions: BTreeSet<u64> = events.iter().map(|e| e.endpoint).collect();
    let data = wire::trace::validate(&events).map_err(|bad| format!("data frames before mutual auth: {bad:?}"))?;
    ensure!(
        trace_start > 0 && data > 0,
        "the suite produced no wire traffic to validate"
    );
    Ok(format!(
        "30 replayed AUTH frames and 25 wrong-key handshakes refused; \
         {} frame events on {} session endpoints, {data} data frames, none before mutual auth",
        events.len(),
        sessions.len()
    ))
}

// ---------------------------------------------------------------------------
// 6 and 7. Random circuits against the composed-dataflow oracle

struct CircuitCase {
    config: ScenarioConfig,
    edges: Vec<oracle::circuit::Edge>,
    ingests: Vec<(GateAddress, Vec<DataRecord>, bool)>,
    faults: Vec<(&'static str, CheckKind)>,
    transport: Transport,
}

fn rowwise(rng: &mut ChaCha8Rng, has_table: bool) -> Vec<Value> {
    (0..rng.gen_range(0..=2))
        .map(|_| match rng.gen_range(0..4) {
            0 => random_filter(rng, 0.0),
            1 => random_project(rng, false),
            2 => random_sort(rng),
            _ if has_table => json!({"op": "join", "right": {"table": "t"}, "left_path": ["s"], "right_path": ["s"]}),
            _ => random_filter(rng, 0.0),
        })
        .collect()
}

fn circuit_payload(rng: &mut ChaCha8Rng) -> Value {
    let mut o = Map::new();
    if rng.gen_bool(0.85) {
        o.insert(
            "a".into(),
            if rng.gen_bool(0.05) {
                Value::Null
            } else {
                json!(rng.gen_range(-5..=5))
            },
        );
    }
    if rng.gen_bool(0.8) {
        o.insert("b".into(), half(rng));
    }
    if rng.gen_bool(0.85) {
        o.insert("s".into(), json!(WORDS.choose(rng).unwrap()));
    }
    if rng.gen_bool(0.7) {
        o.insert("flag".into(), json!(rng.gen_bool(0.5)));
    }
    if rng.gen_bool(0.5) {
        o.insert(
            "m".into(),
            json!({"x": rng.gen_range(-3..=3), "y": WORDS.choose(rng).unwrap()}),
        );
    }
    Value::Object(o)
}

fn out_schema(rng: &mut ChaCha8Rng) -> Value {
    json!({"fields": [
        {"name": "a", "type": "int", "required": rng.gen_bool(0.15)},
        {"name": "b", "type": "float"},
        {"name": "s", "type": "string", "required": rng.gen_bool(0.25)},
        {"name": "flag", "type": "bool"},
        {"name": "m", "type": "map"}
    ]})
}

fn generate_circuit(seed: u64) -> CircuitCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=8);
    let ndom = rng.gen_range(1..=3);
    let dom: Vec<String> = (0..n).map(|_| format!("d{}", rng.gen_range(0..ndom))).collect();
    let gate_addr = |i: usize| format!("{}/g{i}", dom[i]);
    let mut arcs = Vec::new();
    for j in 1..n {
        for i in 0..j {
            if arcs.iter().filter(|(_, t)| *t == j).count() < 3 && rng.gen_bool(0.35) {
                arcs.push((i, j));
            }
        }
    }
    if arcs.is_empty() {
        arcs.push((0, 1));
    }
    let by_selector: Vec<bool> = arcs.iter().map(|_| rng.gen_bool(0.3)).collect();

    let mut gates = Vec::new();
    for i in 0..n {
        let has_table = rng.gen_bool(0.5);
        let strict = match rng.gen_range(0..3) {
            0 => json!({"op": "filter", "path": ["zz"], "cmp": "==", "value": 1}),
            1 => json!({"op": "filter", "path": ["s"], "cmp": ">", "value": 3}),
            _ => json!({"op": "filter", "path": ["a"], "cmp": "==", "value": "text"}),
        };
        let mut iports = vec![
            json!({"name": "local"}),
            json!({"name": "spare"}),
            json!({"name": "strict", "dataflow": [strict]}),
        ];
        for (k, (from, _)) in arcs.iter().enumerate().filter(|(_, (_, to))| *to == i) {
            let mut iport = json!({"name": format!("from{from}"), "dataflow": rowwise(&mut rng, has_table)});
            if by_selector[k] {
                iport["source"] = json!({"constraints": {"kind": format!("k{from}")}, "domain_hint": dom[*from]});
            }
            iports.push(iport);
        }
        let mut gate = json!({
            "address": gate_addr(i),
            "tags": {"kind": format!("k{i}")},
            "roles": ["member"],
            "iports": iports,
            "oports": [{
                "name": "out",
                "schema": out_schema(&mut rng),
                "view": rowwise(&mut rng, has_table),
                "exported": true,
                "policy": [{"role": "member", "oport": "out", "permissions": ["watch", "query"]}]
            }]
        });
        if has_table {
            let rows: Vec<Value> = (0..rng.gen_range(1..=4))
                .map(|_| json!({"s": WORDS.choose(&mut rng).unwrap(), "v": rng.gen_range(0..10)}))
                .collect();
            gate["tables"] = json!({"t": rows});
        }
        gates.push(gate);
    }
    let plain_out = |exported: bool| {
        json!([{
            "name": "out",
            "schema": {"fields": [{"name": "s", "type": "string"}]},
            "exported": exported,
            "policy": [{"role": "member", "oport": "out", "permissions": ["watch"]}]
        }])
    };
    gates.push(json!({"address": "d0/outsider", "tags": {"kind": "outsider"}, "iports": [{"name": "spare"}], "oports": plain_out(true)}));
    gates.push(
        json!({"address": "d0/hidden", "tags": {"kind": "hidden"}, "roles": ["member"], "oports": plain_out(false)}),
    );

    let main_edges: Vec<Value> = arcs
        .iter()
        .zip(&by_selector)
        .map(|((i, j), sel)| {
            let mut e = json!({"to": gate_addr(*j), "iport": format!("from{i}")});
            if !sel {
                e["from"] = json!(format!("{}/out", gate_addr(*i)));
            }
            e
        })
        .collect();
    let (u, v) = *arcs.choose(&mut rng).unwrap();
    let with = |extra: Value| {
        let mut edges = main_edges.clone();
        edges.push(extra);
        Value::Array(edges)
    };
    let mut circuits = vec![
        json!({"name": "main", "edges": main_edges}),
        json!({"name": "cycle", "edges": with(json!({"from": format!("{}/out", gate_addr(v)), "to": gate_addr(u), "iport": "spare"}))}),
        json!({"name": "schema", "edges": with(json!({"from": format!("{}/out", gate_addr(u)), "to": gate_addr(v), "iport": "strict"}))}),
        json!({"name": "permission", "edges": with(json!({"from": format!("{}/out", gate_addr(u)), "to": "d0/outsider", "iport": "spare"}))}),
    ];
    let mut faults = vec![
        ("cycle", CheckKind::Acyclic),
        ("schema", CheckKind::SchemaCompatible),
        ("permission", CheckKind::WatchPermitted),
    ];
    if let Some(w) = (0..n).find(|w| dom[*w] != "d0") {
        circuits.push(json!({"name": "export", "edges": with(json!({"from": "d0/hidden/out", "to": gate_addr(w), "iport": "spare"}))}));
        faults.push(("export", CheckKind::ExportedAcrossDomains));
    }

    let domains: Vec<Value> = (0..ndom.max(1))
        .map(|d| {
            let peers: Vec<String> = (0..ndom).filter(|p| *p != d).map(|p| format!("d{p}")).collect();
            json!({"name": format!("d{d}"), "peers": peers})
        })
        .collect();
    let config = harness::parse(
        &json!({
            "name": format!("random{seed}"),
            "domains": domains,
            "gates": gates,
            "identities": {"seed": seed},
            "circuits": circuits
        })
        .to_string(),
    )
    .unwrap_or_else(|e| panic!("generated circuit {seed} is invalid: {e}"));

    let mut ingests = Vec::new();
    let mut counter = 0;
    for i in 0..n {
        let root = !arcs.iter().any(|(_, t)| *t == i);
        if !root && !rng.gen_bool(0.2) {
            continue;
        }
        for _ in 0..rng.gen_range(1..=3) {
            let batch = (0..rng.gen_range(1..=6))
                .map(|_| {
                    counter += 1;
                    DataRecord::source(source_id(seed, counter), counter, circuit_payload(&mut rng)).unwrap()
                })
                .collect();
            ingests.push((addr(&gate_addr(i)), batch, rng.gen_bool(0.4)));
        }
    }
    let edges = arcs
        .iter()
        .map(|(i, j)| oracle::circuit::Edge {
            from: addr(&format!("{}/out", gate_addr(*i))),
            to: addr(&gate_addr(*j)),
            iport: format!("from{i}"),
        })
        .collect();
    let transport = if seed % 20 == 7 {
        Transport::Tcp
    } else {
        Transport::Inproc
    };
    CircuitCase {
        config,
        edges,
        ingests,
        faults,
        transport,
    }
}

struct CircuitRun {
    gates: usize,
    records: usize,
    traced: usize,
}

fn table_ids(config: &ScenarioConfig) -> BTreeSet<RecordId> {
    let mut ids = BTreeSet::new();
    for g in &config.gates {
        let names: BTreeSet<&BatchRef> = g
            .iports()
            .iter()
            .flat_map(|i| i.dataflow.join_sources())
            .chain(g.oports().iter().flat_map(|o| o.view.join_sources()))
            .collect();
        for r in names {
            if let BatchRef::Table(t) = r {
                ids.extend(g.table_records(t).unwrap_or_default().iter().map(DataRecord::id));
            }
        }
    }
    ids
}

fn run_circuit(case: &CircuitCase, check_faults: bool) -> Result<CircuitRun, String> {
    let name = &case.config.name;
    let mut dep = Deployment::build(
        &case.config,
        &RunOptions {
            transport: case.transport,
            ..RunOptions::default()
        },
    )
    .map_err(|e| format!("{name}: {e}"))?;
    if check_faults {
        for (circuit, kind) in &case.faults {
            let report = dep.verify(circuit).map_err(|e| e.to_string())?;
            ensure!(
                report.failed_checks() == vec![*kind],
                "{name}: injected {circuit} fault failed {:?}, expected only {kind:?}\n{}",
                report.failed_checks(),
                report.to_text()
            );
        }
    }
    let report = dep.verify("main").map_err(|e| e.to_string())?;
    ensure!(
        report.passed,
        "{name}: main circuit failed verification\n{}",
        report.to_text()
    );
    for (gate, batch, early) in &case.ingests {
        if *early {
            dep.gate(gate)
                .unwrap()
                .ingest("local", batch)
                .map_err(|e| format!("{name}: {e}"))?;
        }
    }
    dep.activate("main")
        .map_err(|e| format!("{name}: verified circuit failed to activate: {e}"))?;
    for (gate, batch, early) in &case.ingests {
        if !*early {
            dep.gate(gate)
                .unwrap()
                .ingest("local", batch)
                .map_err(|e| format!("{name}: {e}"))?;
        }
    }
    dep.settle(Duration::from_secs(10))
        .map_err(|e| format!("{name}: {e}"))?;

    let specs: BTreeMap<GateAddress, GateSpec> = case
        .config
        .gates
        .iter()
        .map(|g| (g.address().clone(), g.clone()))
        .collect();
    let mut local: BTreeMap<GateAddress, Vec<(String, Vec<DataRecord>)>> = BTreeMap::new();
    for (gate, batch, _) in &case.ingests {
        local
            .entry(gate.clone())
            .or_default()
            .push(("local".into(), batch.clone()));
    }
    let expected = oracle::circuit::quiescent(&specs, &case.edges, &local);
    let mut known: BTreeSet<RecordId> = case
        .ingests
        .iter()
        .flat_map(|(_, b, _)| b.iter().map(DataRecord::id))
        .collect();
    known.extend(table_ids(&case.config));
    let ledger = dep.merged_ledger();
    let (mut records, mut traced) = (0, 0);
    for (gate_addr, want) in &expected {
        let gate = dep.gate(gate_addr).unwrap();
        let store: Vec<String> = gate
            .scan_store()
            .iter()
            .map(|r| keyed(r.payload(), &engine_sources(r, &known)))
            .collect();
        let want_store: Vec<String> = want.store.iter().map(Row::key).collect();
        ensure!(
            sorted(store) == sorted(want_store),
            "{name}: store of {gate_addr} differs from the oracle"
        );
        for (oport, rows) in &want.views {
            let view = gate.materialize(oport).unwrap().records();
            records += view.len();
            let got: Vec<String> = view
                .iter()
                .map(|r| keyed(r.payload(), &engine_sources(r, &known)))
                .collect();
            let want_view: Vec<String> = rows.iter().map(Row::key).collect();
            ensure!(
                sorted(got) == sorted(want_view.clone()),
                "{name}: view {gate_addr}/{oport} differs from the oracle"
            );
            let mut by_trace = Vec::new();
            for r in &view {
                let dag = trace(&ledger, r.id()).map_err(|e| format!("{name}: {e}"))?;
                by_trace.push(keyed(r.payload(), &dag.leaves()));
                traced += 1;
            }
            ensure!(
                sorted(by_trace) == sorted(want_view),
                "{name}: trace leaves of {gate_addr}/{oport} differ from the oracle's contributing sources"
            );
        }
    }
    dep.shutdown();
    Ok(CircuitRun {
        gates: case.config.gates.len() - 2,
        records,
        traced,
    })
}

fn criterion_6() -> Outcome {
    let (mut records, mut gates, mut faults, mut tcp) = (0, 0, 0, 0);
    for seed in 0..200 {
        let case = generate_circuit(6000 + seed);
        faults += case.faults.len();
        tcp += usize::from(case.transport == Transport::Tcp);
        let run = run_circuit(&case, true)?;
        records += run.records;
        gates += run.gates;
    }
    Ok(format!(
        "200 verified circuits ({gates} gates, {tcp} over tcp) delivered {records} view records equal to the oracle; \
         {faults} injected faults each failed only their own check"
    ))
}

fn criterion_7() -> Outcome {
    let mut traced = 0;
    for seed in 0..60 {
        traced += run_circuit(&generate_circuit(7000 + seed), false)?.traced;
    }
    let mut fixture_records = 0;
    for file in ["smart_building.json", "city_resident.json"] {
        let config = harness::load(&scenario_path(file)).map_err(|e| e.to_string())?;
        let (report, dep) = harness::run_deployment(&config, &RunOptions::default()).map_err(|e| e.to_string())?;
        ensure!(report.passed, "{file} failed: {:?}", report.failures());
        let mut known: BTreeSet<RecordId> = report
            .steps
            .iter()
            .filter(|s| s.action == "ingest")
            .flat_map(|s| {
                s.detail["ids"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_str().unwrap().parse().unwrap())
            })
            .collect();
        known.extend(table_ids(&config));
        let ledger = dep.merged_ledger();
        for g in &config.gates {
            let gate = dep.gate(g.address()).unwrap();
            for o in g.oports() {
                for r in gate.materialize(&o.name).unwrap().records() {
                    let dag = trace(&ledger, r.id()).map_err(|e| format!("{file}: {e}"))?;
                    let leaves = dag.leaves();
                    ensure!(
                        leaves == engine_sources(&r, &known),
                        "{file}: trace of {} in {}/{} found {leaves:?}",
                        r.id(),
                        g.address(),
                        o.name
                    );
                    ensure!(
                        dag.nodes
                            .values()
                            .all(|n| n.entry.is_some() || leaves.contains(&n.record)),
                        "{file}: a derived ancestor of {} is missing from every ledger",
                        r.id()
                    );
                    fixture_records += 1;
                }
            }
        }
    }
    Ok(format!(
        "{traced} records in 60 random circuits and {fixture_records} fixture view records traced to exactly their contributing sources"
    ))
}

// ---------------------------------------------------------------------------
// 8. End-to-end fixtures

fn criterion_8() -> Outcome {
    let mut lines = Vec::new();
    for file in ["smart_building.json", "city_resident.json"] {
        let config = harness::load(&scenario_path(file)).map_err(|e| e.to_string())?;
        let inproc = harness::run(&config, &RunOptions::default()).map_err(|e| e.to_string())?;
        let tcp = harness::run(
            &config,
            &RunOptions {
                transport: Transport::Tcp,
                ..RunOptions::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let filed = harness::run(
            &config,
            &RunOptions {
                store_dir: Some(dir.path().to_path_buf()),
                ..RunOptions::default()
            },
        )
        .map_err(|e| e.to_string())?;
        for (label, r) in [("inproc", &inproc), ("tcp", &tcp), ("file store", &filed)] {
            ensure!(r.passed, "{file} over {label} failed: {:?}", r.failures());
        }
        ensure!(
            inproc.digests() == tcp.digests(),
            "{file}: inproc and tcp view digests differ"
        );
        ensure!(
            inproc.digests() == filed.digests(),
            "{file}: memory and file store view digests differ"
        );
        lines.push(format!(
            "{} ({} steps, {} views)",
            config.name,
            inproc.steps.len(),
            inproc.views.len()
        ));
    }
    Ok(format!(
        "{} pass over inproc, tcp and file stores with identical view digests",
        lines.join(" and ")
    ))
}

// ---------------------------------------------------------------------------

struct Verdict {
    number: u8,
    title: &'static str,
    budget: Duration,
    elapsed: Duration,
    outcome: Outcome,
}

fn measure(number: u8, title: &'static str, budget_secs: u64, f: impl FnOnce() -> Outcome) -> Verdict {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(budget_secs);
    let outcome = match outcome {
        Ok(_) if elapsed > budget => Err(format!(
            "took {:.1}s, over the {budget_secs}s budget",
            elapsed.as_secs_f64()
        )),
        other => other,
    };
    Verdict {
        number,
        title,
        budget,
        elapsed,
        outcome,
    }
}

#[test]
fn acceptance() {
    let mut verdicts = vec![
        measure(1, "operator oracle equivalence", 10, criterion_1),
        measure(2, "resolution determinism and export isolation", 5, criterion_2),
        measure(3, "RBAC lattice", 1, criterion_3),
        measure(4, "watch and wire delivery", 20, criterion_4),
        measure(6, "verified circuits run", 60, criterion_6),
        measure(7, "provenance completeness", 10, criterion_7),
        measure(8, "end-to-end fixtures", 30, criterion_8),
    ];
    let traffic = wire::trace::len();
    verdicts.push(measure(5, "wire security", 5, || criterion_5(traffic)));
    verdicts.sort_by_key(|v| v.number);

    let mut failed = Vec::new();
    for v in &verdicts {
        let status = if v.outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &v.outcome {
            Ok(s) | Err(s) => s,
        };
        println!(
            "criterion {} {}: {status} [{:.2}s of {}s] {detail}",
            v.number,
            v.title,
            v.elapsed.as_secs_f64(),
            v.budget.as_secs()
        );
        if v.outcome.is_err() {
            failed.push(v.number);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
