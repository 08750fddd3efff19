//! Endpointing state machine over streamed audio packets.
//!
//! Speech content comes from annotated run-length masks rather than an
//! acoustic model. The machine tracks the silent span that starts at the last
//! speech-to-silence transition (`t2`), fires a speculative event at
//! `t2 + speculative_silence_ms` (`t3`) and the endpoint at
//! `t2 + endpoint_silence_ms` (`t4`). Speech resuming after `t3` but before
//! `t4` cancels the speculation. Speech after the endpoint is reported as a
//! barge-in (`t5`) and opens the next turn.
//!
//! Timing convention: an event at `t` fires once `[t2, t)` has been silent,
//! so thresholds can land exactly on a packet boundary and are emitted by the
//! packet that ends there.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PACKET_MS: u64 = 1000;
pub const ENDPOINT_SILENCE_RANGE_MS: std::ops::RangeInclusive<u64> = 600..=700;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VadError {
    #[error("packet starts at {got} ms but the previous one ended at {expected} ms")]
    OutOfOrderPacket { expected: u64, got: u64 },
    #[error("cannot reset turn while in phase {0:?}")]
    IllegalPhase(Phase),
    #[error("invalid VAD config: {0}")]
    InvalidConfig(String),
    #[error("invalid speech mask: {0}")]
    InvalidMask(String),
}

/// Start of a run within a packet; the run lasts until the next run's offset
/// or the end of the packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpeechRun {
    pub offset_ms: u64,
    pub is_speech: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AudioPacket {
    pub start_ms: u64,
    pub duration_ms: u64,
    speech_mask: Vec<SpeechRun>,
}

impl AudioPacket {
    pub fn new(start_ms: u64, duration_ms: u64, speech_mask: Vec<SpeechRun>) -> Result<Self, VadError> {
        if duration_ms == 0 {
            return Err(VadError::InvalidMask("packet duration must be positive".into()));
        }
        match speech_mask.first() {
            None => return Err(VadError::InvalidMask("mask has no runs".into())),
            Some(r) if r.offset_ms != 0 => {
                return Err(VadError::InvalidMask("first run must start at offset 0".into()))
            }
            _ => {}
        }
        if speech_mask.windows(2).any(|w| w[0].offset_ms >= w[1].offset_ms) {
            return Err(VadError::InvalidMask("run offsets must strictly increase".into()));
        }
        if speech_mask.last().is_some_and(|r| r.offset_ms >= duration_ms) {
            return Err(VadError::InvalidMask("run starts past the packet end".into()));
        }
        Ok(Self {
            start_ms,
            duration_ms,
            speech_mask,
        })
    }

    /// A packet with a single uniform run.
    pub fn uniform(start_ms: u64, duration_ms: u64, is_speech: bool) -> Self {
        Self::new(
            start_ms,
            duration_ms,
            vec![SpeechRun {
                offset_ms: 0,
                is_speech,
            }],
        )
        .expect("uniform mask is valid")
    }

    pub fn speech_mask(&self) -> &[SpeechRun] {
        &self.speech_mask
    }

    pub fn end_ms(&self) -> u64 {
        self.start_ms + self.duration_ms
    }

    /// Runs as absolute `(start, end, is_speech)` intervals.
    pub fn runs(&self) -> impl Iterator<Item = (u64, u64, bool)> + '_ {
        self.speech_mask.iter().enumerate().map(move |(i, r)| {
            let end = self
                .speech_mask
                .get(i + 1)
                .map_or(self.duration_ms, |n| n.offset_ms);
            (self.start_ms + r.offset_ms, self.start_ms + end, r.is_speech)
        })
    }

    pub fn is_speech_at(&self, abs_ms: u64) -> bool {
        self.runs()
            .find(|&(s, e, _)| (s..e).contains(&abs_ms))
            .is_some_and(|(_, _, speech)| speech)
    }

    pub fn has_speech(&self) -> bool {
        self.speech_mask.iter().any(|r| r.is_speech)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVadConfig", into = "RawVadConfig")]
pub struct VadConfig {
    endpoint_silence_ms: u64,
    speculative_silence_ms: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawVadConfig {
    endpoint_silence_ms: u64,
    speculative_silence_ms: u64,
}

impl Default for RawVadConfig {
    fn default() -> Self {
        let d = VadConfig::default();
        Self {
            endpoint_silence_ms: d.endpoint_silence_ms,
            speculative_silence_ms: d.speculative_silence_ms,
        }
    }
}

impl TryFrom<RawVadConfig> for VadConfig {
    type Error = VadError;

    fn try_from(raw: RawVadConfig) -> Result<Self, Self::Error> {
        VadConfig::new(raw.endpoint_silence_ms, raw.speculative_silence_ms)
    }
}

impl From<VadConfig> for RawVadConfig {
    fn from(c: VadConfig) -> Self {
        Self {
            endpoint_silence_ms: c.endpoint_silence_ms,
            speculative_silence_ms: c.speculative_silence_ms,
        }
    }
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            endpoint_silence_ms: 650,
            speculative_silence_ms: 300,
        }
    }
}

impl VadConfig {
    pub fn new(endpoint_silence_ms: u64, speculative_silence_ms: u64) -> Result<Self, VadError> {
        if !ENDPOINT_SILENCE_RANGE_MS.contains(&endpoint_silence_ms) {
            return Err(VadError::InvalidConfig(format!(
                "endpoint_silence_ms {endpoint_silence_ms} outside 600..=700"
            )));
        }
        if speculative_silence_ms == 0 || speculative_silence_ms >= endpoint_silence_ms {
            return Err(VadError::InvalidConfig(format!(
                "speculative_silence_ms {speculative_silence_ms} must be in (0, {endpoint_silence_ms})"
            )));
        }
        Ok(Self {
            endpoint_silence_ms,
            speculative_silence_ms,
        })
    }

    pub fn endpoint_silence_ms(&self) -> u64 {
        self.endpoint_silence_ms
    }

    pub fn speculative_silence_ms(&self) -> u64 {
        self.speculative_silence_ms
    }

    /// Length of the speculative window `t4 - t3`.
    pub fn speculation_lead_ms(&self) -> u64 {
        self.endpoint_silence_ms - self.speculative_silence_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VadEventKind {
    SpeechStart,
    /// Last speech-to-silence transition, `t2`.
    SpeechEnd,
    /// Speculative decode point, `t3`.
    Speculative,
    /// Speech resumed after `t3`; speculative work must be rolled back.
    Cancelled,
    /// End of turn, `t4`.
    Endpoint,
    /// Speech after the endpoint, `t5`.
    BargeIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VadEvent {
    pub kind: VadEventKind,
    pub at_ms: u64,
    pub turn: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    UserSpeaking,
    SilencePending,
    SpeculativeFired,
    Endpointed,
    ModelResponding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TurnState {
    pub phase: Phase,
    pub last_speech_end_ms: Option<u64>,
    pub turn_index: u32,
    next_packet_ms: Option<u64>,
}

impl Default for TurnState {
    fn default() -> Self {
        Self::new()
    }
}

impl TurnState {
    pub fn new() -> Self {
        Self {
            phase: Phase::Idle,
            last_speech_end_ms: None,
            turn_index: 0,
            next_packet_ms: None,
        }
    }

    fn emit(&self, out: &mut Vec<VadEvent>, kind: VadEventKind, at_ms: u64) {
        out.push(VadEvent {
            kind,
            at_ms,
            turn: self.turn_index,
        });
    }

    fn on_speech(&mut self, at: u64, out: &mut Vec<VadEvent>) {
        match self.phase {
            Phase::Idle => {
                self.emit(out, VadEventKind::SpeechStart, at);
                self.phase = Phase::UserSpeaking;
            }
            Phase::UserSpeaking => {}
            Phase::SilencePending => self.phase = Phase::UserSpeaking,
            Phase::SpeculativeFired => {
                self.emit(out, VadEventKind::Cancelled, at);
                self.phase = Phase::UserSpeaking;
            }
            Phase::Endpointed | Phase::ModelResponding => {
                self.emit(out, VadEventKind::BargeIn, at);
                self.turn_index += 1;
                self.emit(out, VadEventKind::SpeechStart, at);
                self.phase = Phase::UserSpeaking;
            }
        }
        self.last_speech_end_ms = None;
    }

    fn on_silence(&mut self, start: u64, end: u64, config: &VadConfig, out: &mut Vec<VadEvent>) {
        if self.phase == Phase::UserSpeaking {
            self.emit(out, VadEventKind::SpeechEnd, start);
            self.last_speech_end_ms = Some(start);
            self.phase = Phase::SilencePending;
        }
        let Some(t2) = self.last_speech_end_ms else {
            return;
        };
        let t3 = t2 + config.speculative_silence_ms;
        let t4 = t2 + config.endpoint_silence_ms;
        if self.phase == Phase::SilencePending && t3 <= end {
            self.emit(out, VadEventKind::Speculative, t3);
            self.phase = Phase::SpeculativeFired;
        }
        if self.phase == Phase::SpeculativeFired && t4 <= end {
            self.emit(out, VadEventKind::Endpoint, t4);
            self.phase = Phase::Endpointed;
        }
    }

    /// Advances the machine over one packet and returns the events it fired,
    /// in time order.
    pub fn feed(&mut self, packet: &AudioPacket, config: &VadConfig) -> Result<Vec<VadEvent>, VadError> {
        if let Some(expected) = self.next_packet_ms {
            if packet.start_ms != expected {
                return Err(VadError::OutOfOrderPacket {
                    expected,
                    got: packet.start_ms,
                });
            }
        }
        let mut events = Vec::new();
        for (start, end, speech) in packet.runs() {
            if speech {
                self.on_speech(start, &mut events);
            } else {
                self.on_silence(start, end, config, &mut events);
            }
        }
        self.next_packet_ms = Some(packet.end_ms());
        Ok(events)
    }

    /// Marks that the model has started answering the endpointed turn.
    pub fn mark_responding(&mut self) {
        if self.phase == Phase::Endpointed {
            self.phase = Phase::ModelResponding;
        }
    }

    /// Closes a finished exchange: back to idle with the next turn index.
    pub fn reset_for_next_turn(&self) -> Result<TurnState, VadError> {
        match self.phase {
            Phase::Endpointed | Phase::ModelResponding => Ok(TurnState {
                phase: Phase::Idle,
                last_speech_end_ms: None,
                turn_index: self.turn_index + 1,
                next_packet_ms: self.next_packet_ms,
            }),
            other => Err(VadError::IllegalPhase(other)),
        }
    }
}

/// Functional form of [`TurnState::feed`].
pub fn feed(
    state: TurnState,
    packet: &AudioPacket,
    config: &VadConfig,
) -> Result<(TurnState, Vec<VadEvent>), VadError> {
    let mut next = state;
    let events = next.feed(packet, config)?;
    Ok((next, events))
}
