//! Naive selector resolution: enumerate every candidate and rank them.

use std::collections::{BTreeMap, BTreeSet};

use ioda_core::model::{GateAddress, GateMetadata};
use ioda_core::resolution::Selector;

fn tags_of(meta: &GateMetadata, oport: &str) -> BTreeMap<String, String> {
    let mut tags = meta.tags.clone();
    for (k, v) in &meta.oports[oport].tags {
        tags.insert(k.clone(), v.clone());
    }
    tags
}

fn matches(meta: &GateMetadata, oport: &str, sel: &Selector) -> bool {
    let tags = tags_of(meta, oport);
    let schema = &meta.oports[oport].schema;
    sel.constraints.iter().all(|(k, v)| tags.get(k) == Some(v))
        && sel
            .schema_requires
            .iter()
            .all(|req| schema.fields().iter().any(|f| f.name == req.name && f.ty == req.ty))
}

/// Best candidate among `gates`: most tags shared with the requester, then
/// the smallest canonical address. The requester itself never qualifies.
pub fn best(
    gates: &[GateMetadata],
    requester: &GateMetadata,
    sel: &Selector,
    exported_only: bool,
) -> Option<GateAddress> {
    let mut candidates: Vec<(usize, String)> = Vec::new();
    for meta in gates {
        if meta.address == requester.address {
            continue;
        }
        for (name, o) in &meta.oports {
            if exported_only && !o.exported {
                continue;
            }
            if !matches(meta, name, sel) {
                continue;
            }
            let tags = tags_of(meta, name);
            let shared = requester.tags.iter().filter(|(k, v)| tags.get(*k) == Some(*v)).count();
            candidates.push((
                shared,
                format!("{}/{}/{}", meta.address.domain(), meta.address.gate(), name),
            ));
        }
    }
    let top = candidates.iter().map(|(s, _)| *s).max()?;
    let addr = candidates
        .into_iter()
        .filter(|(s, _)| *s == top)
        .map(|(_, a)| a)
        .min()?;
    Some(addr.parse().expect("candidate addresses are well formed"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Found(GateAddress),
    NotFound,
    UnknownPeer,
}

/// Cross-domain resolution from `local`'s point of view. Registries outside
/// the requester's domain only offer exported oports.
pub fn cross(
    registries: &BTreeMap<String, Vec<GateMetadata>>,
    local: &str,
    peers: &BTreeSet<String>,
    requester: &GateMetadata,
    sel: &Selector,
) -> Outcome {
    let home = requester.address.domain();
    let ask = |domain: &str| best(&registries[domain], requester, sel, domain != home);
    let found = |a: Option<GateAddress>| a.map(Outcome::Found).unwrap_or(Outcome::NotFound);
    if let Some(hint) = &sel.domain_hint {
        if hint == local {
            return found(ask(local));
        }
        if !peers.contains(hint) {
            return Outcome::UnknownPeer;
        }
        return found(ask(hint));
    }
    if let Some(a) = ask(local) {
        return Outcome::Found(a);
    }
    for p in peers {
        if let Some(a) = ask(p) {
            return Outcome::Found(a);
        }
    }
    Outcome::NotFound
}
