//! `ioda`: run scenarios and inspect a deployment.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ioda_core::dataflow::Operator;
use ioda_core::governance::trace;
use ioda_core::harness::{self, HarnessError, RunOptions, Transport};
use ioda_core::model::{parse_address, GateAddress, Principal, RecordId};
use ioda_core::resolution::Selector;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "ioda", version, about = "Run and inspect federated data-gateway scenarios")]
struct Cli {
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deploy a scenario, run its circuits and workload, and report.
    Run {
        file: PathBuf,
        #[arg(long, default_value = "inproc")]
        transport: Transport,
    },
    /// Verify one circuit of a scenario.
    Verify {
        file: PathBuf,
        #[arg(long)]
        circuit: String,
    },
    /// Resolve a selector on behalf of a gate.
    Resolve {
        file: PathBuf,
        #[arg(long)]
        from: String,
        /// Selector as JSON.
        #[arg(long)]
        selector: String,
    },
    /// Query an oport after running the scenario's workload.
    Query {
        file: PathBuf,
        #[arg(long)]
        oport: String,
        /// Principal as JSON or `id[:role,role]`.
        #[arg(long = "as")]
        principal: String,
        /// Query over a wire authenticated as this gate.
        #[arg(long)]
        via: Option<String>,
        /// Filter operator as JSON.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value = "inproc")]
        transport: Transport,
    },
    /// Trace a record's provenance after running the scenario's workload.
    Trace {
        file: PathBuf,
        #[arg(long)]
        record: String,
    },
}

/// Failure that maps to an exit code.
enum Failure {
    /// Expectation, verification or lookup failed.
    Negative(Value, String),
    /// Usage or configuration error.
    Usage(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn usage<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Usage(format!("{what}: {e}"))
}

fn address(text: &str, what: &str) -> Result<GateAddress, Failure> {
    parse_address(text).map_err(usage(what))
}

fn principal(text: &str) -> Result<Principal, Failure> {
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(text).map_err(usage("--as"));
    }
    let (id, roles) = match text.split_once(':') {
        Some((id, roles)) => (id, roles.split(',').filter(|r| !r.is_empty()).collect::<Vec<_>>()),
        None => (text, Vec::new()),
    };
    Principal::new(id, roles).map_err(usage("--as"))
}

/// Output on success: JSON value and text rendering.
type Output = (Value, String);

fn run(file: &Path, transport: Transport) -> Result<Output, Failure> {
    let config = harness::load(file)?;
    let report = harness::run(
        &config,
        &RunOptions {
            transport,
            ..RunOptions::default()
        },
    )?;
    let value = serde_json::to_value(&report).expect("reports serialize");
    if report.passed {
        Ok((value, report.to_text()))
    } else {
        Err(Failure::Negative(value, report.to_text()))
    }
}

fn verify(file: &Path, circuit: &str) -> Result<Output, Failure> {
    let config = harness::load(file)?;
    let dep = harness::Deployment::build(&config, &RunOptions::default())?;
    let report = dep.verify(circuit)?;
    if report.passed {
        Ok((report.to_json(), report.to_text()))
    } else {
        Err(Failure::Negative(report.to_json(), report.to_text()))
    }
}

fn resolve(file: &Path, from: &str, selector: &str) -> Result<Output, Failure> {
    let config = harness::load(file)?;
    let from = address(from, "--from")?;
    let selector: Selector = serde_json::from_str(selector).map_err(usage("--selector"))?;
    let dep = harness::Deployment::build(&config, &RunOptions::default())?;
    if config.gate(&from).is_none() {
        return Err(Failure::Usage(format!("--from: undefined gate {from}")));
    }
    match dep.resolve(&from, &selector) {
        Ok(addr) => Ok((json!({"address": addr.to_string()}), addr.to_string())),
        Err(e) => {
            let kind = harness::run::resolve_error_kind(&e);
            Err(Failure::Negative(
                json!({"error": kind, "message": e.to_string()}),
                format!("{kind}: {e}"),
            ))
        }
    }
}

fn query(
    file: &Path,
    oport: &str,
    who: &str,
    via: Option<&str>,
    filter: Option<&str>,
    transport: Transport,
) -> Result<Output, Failure> {
    let config = harness::load(file)?;
    let oport = address(oport, "--oport")?;
    let who = principal(who)?;
    let via = via.map(|v| address(v, "--via")).transpose()?;
    let filter: Option<Operator> = filter
        .map(|f| serde_json::from_str(f).map_err(usage("--filter")))
        .transpose()?;
    if oport.oport().is_none()
        || config
            .gate(&oport)
            .and_then(|g| g.oport(oport.oport().unwrap_or_default()))
            .is_none()
    {
        return Err(Failure::Usage(format!("--oport: undefined oport {oport}")));
    }
    let (_, dep) = harness::run_deployment(
        &config,
        &RunOptions {
            transport,
            ..RunOptions::default()
        },
    )?;
    match dep.query(&oport, &who, via.as_ref(), filter.as_ref()) {
        Ok(records) => {
            let text = records
                .iter()
                .map(|r| format!("{} {}", r.id(), r.payload()))
                .collect::<Vec<_>>()
                .join("\n");
            Ok((json!({"count": records.len(), "records": records}), text))
        }
        Err(e) => Err(Failure::Negative(
            json!({"error": e.kind(), "message": e.to_string()}),
            format!("{}: {e}", e.kind()),
        )),
    }
}

fn trace_record(file: &Path, record: &str) -> Result<Output, Failure> {
    let config = harness::load(file)?;
    let id: RecordId = record.parse().map_err(usage("--record"))?;
    let (_, dep) = harness::run_deployment(&config, &RunOptions::default())?;
    match trace(&dep.merged_ledger(), id) {
        Ok(dag) => {
            let leaves: Vec<String> = dag.leaves().iter().map(ToString::to_string).collect();
            let mut text = format!("{} ({} nodes)\n", dag.root, dag.nodes.len());
            for node in dag.nodes.values() {
                match &node.entry {
                    Some(e) => text.push_str(&format!("  {} {:?} at {}/{}\n", node.record, e.origin, e.gate, e.port)),
                    None => text.push_str(&format!("  {} unknown\n", node.record)),
                }
            }
            text.push_str(&format!("leaves: {}", leaves.join(" ")));
            Ok((json!({"dag": dag, "leaves": leaves}), text))
        }
        Err(e) => Err(Failure::Negative(json!({"error": e.to_string()}), e.to_string())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .parse_filters(&std::env::var("IODA_LOG").unwrap_or_else(|_| "error".into()))
        .init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { file, transport } => run(file, *transport),
        Command::Verify { file, circuit } => verify(file, circuit),
        Command::Resolve { file, from, selector } => resolve(file, from, selector),
        Command::Query {
            file,
            oport,
            principal,
            via,
            filter,
            transport,
        } => query(file, oport, principal, via.as_deref(), filter.as_deref(), *transport),
        Command::Trace { file, record } => trace_record(file, record),
    };
    let emit = |value: &Value, text: &str| {
        let out = if cli.json {
            serde_json::to_string_pretty(value).expect("values serialize")
        } else {
            text.trim_end().to_string()
        };
        let _ = writeln!(std::io::stdout(), "{out}");
    };
    match outcome {
        Ok((value, text)) => {
            emit(&value, &text);
            ExitCode::SUCCESS
        }
        Err(Failure::Negative(value, text)) => {
            emit(&value, &text);
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("ioda: {msg}");
            ExitCode::from(2)
        }
    }
}
