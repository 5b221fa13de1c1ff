//! Exit codes and the structured error written to stderr on failure.

use std::io::ErrorKind;

use serde::Serialize;
use thiserror::Error;
use tus_core::corpus::CorpusError;
use tus_core::db::DbError;
use tus_core::experiments::ExperimentError;
use tus_core::nn::NetError;
use tus_core::rl::RlError;
use tus_core::tus::TusError;
use tus_core::OntologyError;

pub const OK: i32 = 0;
pub const OTHER: i32 = 1;
/// Matches clap's own code for bad arguments.
pub const USAGE: i32 = 2;
pub const CONFIG: i32 = 3;
pub const MISSING_INPUT: i32 = 4;
pub const SCHEMA: i32 = 5;
pub const ABORTED: i32 = 6;

#[derive(Debug, Error)]
#[error("usage: {0}")]
pub struct UsageError(pub String);

#[derive(Debug, Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Error)]
#[error("input not found: {0}")]
pub struct MissingInput(pub String);

#[derive(Debug, Error)]
#[error("training aborted: {0}")]
pub struct TrainingAborted(pub String);

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
    pub causes: Vec<String>,
}

fn kind_name(code: i32) -> &'static str {
    match code {
        USAGE => "usage",
        CONFIG => "config",
        MISSING_INPUT => "missing-input",
        SCHEMA => "schema-mismatch",
        ABORTED => "training-aborted",
        _ => "error",
    }
}

/// Code of a single error, or `None` when it says nothing specific.
fn classify_one(e: &(dyn std::error::Error + 'static)) -> Option<i32> {
    if e.is::<UsageError>() {
        return Some(USAGE);
    }
    if e.is::<ConfigError>() {
        return Some(CONFIG);
    }
    if e.is::<MissingInput>() {
        return Some(MISSING_INPUT);
    }
    if e.is::<TrainingAborted>() {
        return Some(ABORTED);
    }
    if let Some(io) = e.downcast_ref::<std::io::Error>() {
        return (io.kind() == ErrorKind::NotFound).then_some(MISSING_INPUT);
    }
    if let Some(e) = e.downcast_ref::<NetError>() {
        return match e {
            NetError::Config(_) => Some(CONFIG),
            NetError::Format(_) | NetError::Fingerprint { .. } | NetError::Width { .. } => {
                Some(SCHEMA)
            }
            NetError::NonFinite { .. } => Some(ABORTED),
            _ => None,
        };
    }
    if let Some(e) = e.downcast_ref::<TusError>() {
        return match e {
            TusError::Config(_) => Some(CONFIG),
            TusError::EmptyCorpus { .. } | TusError::NonFiniteMetrics(_) => Some(ABORTED),
            TusError::Net(n) => classify_one(n),
        };
    }
    if let Some(e) = e.downcast_ref::<RlError>() {
        return match e {
            RlError::Config(_) => Some(CONFIG),
            RlError::EntropyCollapse { .. } | RlError::NonFinite { .. } => Some(ABORTED),
            RlError::Net(n) => classify_one(n),
            RlError::Sim(_) => None,
        };
    }
    if let Some(e) = e.downcast_ref::<ExperimentError>() {
        // Transparent variants hide the wrapped error from `source()`.
        return match e {
            ExperimentError::Config(_) => Some(CONFIG),
            ExperimentError::Tus(t) => classify_one(t),
            ExperimentError::Net(n) => classify_one(n),
            ExperimentError::Rl(r) => classify_one(r),
            ExperimentError::Corpus(c) => classify_one(c),
            ExperimentError::Sim(_) => None,
        };
    }
    if let Some(e) = e.downcast_ref::<CorpusError>() {
        return match e {
            CorpusError::Parse { .. } | CorpusError::Schema { .. } => Some(SCHEMA),
            CorpusError::UnknownDomain(_) | CorpusError::Split(_) => Some(CONFIG),
            _ => None,
        };
    }
    if let Some(e) = e.downcast_ref::<DbError>() {
        return match e {
            DbError::Parse(_) | DbError::Schema { .. } | DbError::Mismatch(_) => Some(SCHEMA),
            DbError::Io(_) => None,
        };
    }
    if let Some(e) = e.downcast_ref::<OntologyError>() {
        return match e {
            OntologyError::Parse(_) | OntologyError::Schema(_) | OntologyError::Invalid(_) => {
                Some(SCHEMA)
            }
            OntologyError::Io(_) => None,
        };
    }
    None
}

/// Walks the error chain, including `source()` links inside core errors,
/// and returns the first specific code.
pub fn classify(err: &anyhow::Error) -> i32 {
    err.chain().find_map(classify_one).unwrap_or(OTHER)
}

pub fn report(err: &anyhow::Error) -> ErrorReport {
    let code = classify(err);
    ErrorReport {
        kind: kind_name(code),
        exit_code: code,
        message: err.to_string(),
        causes: err.chain().skip(1).map(|e| e.to_string()).collect(),
    }
}
