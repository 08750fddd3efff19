//! Four-stage session pipeline: VAD and packet ingest, audio-visual encoding,
//! LLM prefill/decode, and audio decoding with gated delivery.

mod audit;
mod compute;
mod log;
mod session;
pub mod wallclock;

use thiserror::Error;

pub use audit::{audit_causality, CausalityViolation};
pub use compute::{us_to_ms_ceil, ComputeModel};
pub use log::{read_log, write_log, EventKind, EventLog, LogError, LogEvent, Stage, LOG_FORMAT, LOG_VERSION};
pub use session::{
    run_session_with, run_session_with_backend, SessionError, SessionOptions, SessionOutput,
};

use crate::config::{ConfigError, SessionConfig};
use crate::metrics::{summarize, MetricsError, MetricsReport};
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Runs a session with the configured script and summarizes it.
pub fn run_session(trace: &Trace, config: &SessionConfig) -> Result<(EventLog, MetricsReport), RunError> {
    let script = config.load_script()?;
    let out = run_session_with(trace, config, script, SessionOptions::default())?;
    let report = summarize(&out.log)?;
    Ok((out.log, report))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("turn {turn} has no {missing}")]
pub struct NoResponseInTurn {
    pub turn: u32,
    pub missing: &'static str,
}

/// Time from the endpoint of `turn` to its first delivered audio frame.
pub fn first_response_latency(log: &EventLog, turn: u32) -> Result<u64, NoResponseInTurn> {
    let endpoint = log
        .first(EventKind::Endpoint, turn)
        .ok_or(NoResponseInTurn { turn, missing: "endpoint" })?;
    let delivery = log
        .first(EventKind::Deliver, turn)
        .ok_or(NoResponseInTurn { turn, missing: "delivery" })?;
    Ok(delivery.time_ms.saturating_sub(endpoint.time_ms))
}
