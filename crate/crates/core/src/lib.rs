//! Deterministic real-time audio-visual interaction pipeline.
//!
//! Audio arrives in 1 s packets with two video frames each. A VAD state
//! machine tracks user turns; packets are encoded into dense chunks while the
//! user speaks and sparse chunks while the model answers; the LLM stage
//! prefills chunks as they arrive, starts decoding speculatively before the
//! endpoint and rolls back if the user keeps talking; the audio sink holds
//! generated speech until the endpoint and truncates it at the last spoken
//! punctuation mark when the user barges in.
//!
//! [`orchestrator::run_session_with`] drives everything on a virtual clock
//! and produces an [`orchestrator::EventLog`].

pub mod backend;
pub mod config;
pub mod ids;
pub mod interleave;
pub mod metrics;
pub mod orchestrator;
pub mod sink;
pub mod synth;
pub mod trace;
pub mod vad;
pub mod vision;

pub use backend::{Backend, BackendMode, BackendState, GenStep, MockBackend, Script};
pub use config::SessionConfig;
pub use interleave::{Chunk, ChunkMode, InterleavedSequence};
pub use metrics::{summarize, MetricsReport, TurnMetrics};
pub use orchestrator::{
    first_response_latency, run_session, run_session_with, ComputeModel, EventKind, EventLog,
    LogEvent, SessionOptions, SessionOutput, Stage,
};
pub use sink::{truncate_on_interrupt, PunctuationSet};
pub use trace::{read_trace, validate_trace, write_trace, Trace, TraceRecord};
pub use vad::{AudioPacket, TurnState, VadConfig, VadEvent, VadEventKind};
pub use vision::{plan_resize, plan_sampling, FrameSpec, ResizePlan, SamplerConfig, SamplingPlan, TokenBudget};
