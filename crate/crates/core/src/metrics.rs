//! Per-turn metrics derived from an event log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{EventKind, EventLog};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("incomplete log: {0}")]
    IncompleteLog(String),
    #[error("report is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub turn: u32,
    pub speech_start_ms: u64,
    pub speculative_time_ms: Option<u64>,
    pub endpoint_time_ms: Option<u64>,
    pub first_response_latency_ms: Option<u64>,
    pub rollback_count: u32,
    /// The user spoke again after this turn's endpoint.
    pub barge_in: bool,
    pub delivered_frames: u64,
    /// The response was cut short by the barge-in.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub turns: Vec<TurnMetrics>,
    pub responded_turns: u64,
    pub latency_p50_ms: Option<u64>,
    pub latency_p95_ms: Option<u64>,
    pub rollback_total: u64,
    pub truncated_turns: u64,
    pub delivered_frames_total: u64,
}

/// Nearest-rank percentile of `values`; `None` when empty.
pub fn percentile_nearest_rank(values: &[u64], pct: u64) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = (pct * sorted.len() as u64).div_ceil(100).max(1);
    Some(sorted[rank as usize - 1])
}

fn aggregate(turns: Vec<TurnMetrics>) -> MetricsReport {
    let latencies: Vec<u64> = turns.iter().filter_map(|t| t.first_response_latency_ms).collect();
    MetricsReport {
        responded_turns: latencies.len() as u64,
        latency_p50_ms: percentile_nearest_rank(&latencies, 50),
        latency_p95_ms: percentile_nearest_rank(&latencies, 95),
        rollback_total: turns.iter().map(|t| u64::from(t.rollback_count)).sum(),
        truncated_turns: turns.iter().filter(|t| t.truncated).count() as u64,
        delivered_frames_total: turns.iter().map(|t| t.delivered_frames).sum(),
        turns,
    }
}

pub fn summarize(log: &EventLog) -> Result<MetricsReport, MetricsError> {
    if !log.is_canonical() {
        return Err(MetricsError::IncompleteLog(
            "events are not in canonical order".into(),
        ));
    }
    let mut rows: BTreeMap<u32, TurnMetrics> = BTreeMap::new();
    for e in log.iter() {
        let Some(turn) = e.turn else { continue };
        if e.kind == EventKind::SpeechStart {
            rows.entry(turn).or_insert(TurnMetrics {
                turn,
                speech_start_ms: e.time_ms,
                speculative_time_ms: None,
                endpoint_time_ms: None,
                first_response_latency_ms: None,
                rollback_count: 0,
                barge_in: false,
                delivered_frames: 0,
                truncated: false,
            });
            continue;
        }
        let row = rows.get_mut(&turn).ok_or_else(|| {
            MetricsError::IncompleteLog(format!("{} for turn {turn} before its speech start", e.kind))
        })?;
        match e.kind {
            EventKind::Speculative => row.speculative_time_ms = Some(e.time_ms),
            EventKind::Endpoint => row.endpoint_time_ms = Some(e.time_ms),
            EventKind::Rollback => row.rollback_count += 1,
            EventKind::BargeIn => row.barge_in = true,
            EventKind::Truncate => row.truncated = true,
            EventKind::Deliver => {
                if row.delivered_frames == 0 {
                    let endpoint = row.endpoint_time_ms.ok_or_else(|| {
                        MetricsError::IncompleteLog(format!("turn {turn} delivered before its endpoint"))
                    })?;
                    row.first_response_latency_ms = Some(e.time_ms - endpoint);
                }
                row.delivered_frames += 1;
            }
            _ => {}
        }
    }
    Ok(aggregate(rows.into_values().collect()))
}

impl MetricsReport {
    /// Recomputes every aggregate from the per-turn rows.
    pub fn check_consistency(&self) -> Result<(), MetricsError> {
        let fresh = aggregate(self.turns.clone());
        if &fresh != self {
            return Err(MetricsError::Inconsistent(format!(
                "aggregates {:?}/{:?} do not match rows ({:?}/{:?})",
                self.latency_p50_ms, self.latency_p95_ms, fresh.latency_p50_ms, fresh.latency_p95_ms
            )));
        }
        Ok(())
    }

    /// Latency per turn as CSV, one row per turn; empty cells mean no value.
    pub fn plot_data_csv(&self) -> String {
        let mut out = String::from("turn,endpoint_ms,speculative_ms,latency_ms,rollbacks,truncated\n");
        let cell = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.turns {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                t.turn,
                cell(t.endpoint_time_ms),
                cell(t.speculative_time_ms),
                cell(t.first_response_latency_ms),
                t.rollback_count,
                t.truncated
            );
        }
        out
    }
}
