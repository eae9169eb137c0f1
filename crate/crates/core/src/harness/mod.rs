//! Scenario harness: loads a declarative multi-domain deployment, runs it
//! over the in-process or TCP transport and reports the outcome.

pub mod config;
pub mod deploy;
pub mod run;

pub use config::{load, parse, Action, DomainConfig, IdentityConfig, ScenarioConfig, Step};
pub use deploy::{Deployment, MergedLedger, RunOptions, Transport};
pub use run::{json_eq, run, run_deployment, view_digest, CircuitOutcome, RunReport, StepOutcome, ViewDigest};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarnessError {
    #[error("parse error at line {line}, column {column} ({field}): {message}")]
    Parse {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("deployment failed: {0}")]
    Deploy(String),
}
