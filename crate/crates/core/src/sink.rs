//! Streaming audio decoder timing, endpoint-gated delivery and
//! punctuation-anchored truncation on interruption.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Codec frame rate in hundredths of a hertz (16.67 Hz).
pub const CODEC_RATE_CENTIHZ: u64 = 1667;
/// Future frames the decoder must see before a frame can be rendered.
pub const LOOKAHEAD_FRAMES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SinkError {
    #[error("frame {index} requested but only {len} frames exist")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("delivery gate has no endpoint yet")]
    GateNotArmed,
}

/// Nominal start of codec frame `index` on the millisecond clock.
///
/// The exact period is 59.988 ms. Rounding the running position keeps the
/// long-run rate exact; roughly every 83rd frame comes out one ms short.
pub fn codec_frame_start_ms(index: u64) -> u64 {
    (2 * index * 100_000 + CODEC_RATE_CENTIHZ) / (2 * CODEC_RATE_CENTIHZ)
}

pub fn codec_frame_duration_ms(index: u64) -> u64 {
    codec_frame_start_ms(index + 1) - codec_frame_start_ms(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CodecFrame {
    pub frame_index: u64,
    /// When all four codebook tokens of this frame exist.
    pub ready_at_ms: Option<u64>,
    pub playable_at_ms: Option<u64>,
}

impl CodecFrame {
    pub fn pending(frame_index: u64) -> Self {
        Self {
            frame_index,
            ready_at_ms: None,
            playable_at_ms: None,
        }
    }

    pub fn ready(frame_index: u64, at_ms: u64) -> Self {
        Self {
            frame_index,
            ready_at_ms: Some(at_ms),
            playable_at_ms: None,
        }
    }
}

/// Earliest time frame `index` can be rendered: once it and the next three
/// frames are ready, plus `decode_cost_ms`. Returns `Ok(None)` while the
/// look-ahead is incomplete. With `stream_finished`, trailing frames only wait
/// for the frames that actually exist.
pub fn playable_time(
    frames: &[CodecFrame],
    index: usize,
    decode_cost_ms: u64,
    stream_finished: bool,
) -> Result<Option<u64>, SinkError> {
    if index >= frames.len() {
        return Err(SinkError::IndexOutOfRange {
            index,
            len: frames.len(),
        });
    }
    let want = index + LOOKAHEAD_FRAMES;
    let last = if want < frames.len() {
        want
    } else if stream_finished {
        frames.len() - 1
    } else {
        return Ok(None);
    };
    let mut latest = 0;
    for f in &frames[index..=last] {
        match f.ready_at_ms {
            Some(t) => latest = latest.max(t),
            None => return Ok(None),
        }
    }
    Ok(Some(latest + decode_cost_ms))
}

/// Holds audio back until the endpoint has been detected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeliveryGate {
    pub endpoint_at_ms: Option<u64>,
    pub delivered_up_to_ms: u64,
}

impl DeliveryGate {
    pub fn arm(&mut self, endpoint_at_ms: u64) {
        self.endpoint_at_ms = Some(endpoint_at_ms);
    }

    pub fn is_armed(&self) -> bool {
        self.endpoint_at_ms.is_some()
    }

    /// Delivery time for a frame playable at `frame_playable_at`: never
    /// before the endpoint.
    pub fn gate_delivery(&mut self, frame_playable_at: u64) -> Result<u64, SinkError> {
        let endpoint = self.endpoint_at_ms.ok_or(SinkError::GateNotArmed)?;
        let at = endpoint.max(frame_playable_at);
        self.delivered_up_to_ms = self.delivered_up_to_ms.max(at);
        Ok(at)
    }
}

/// Characters a response may be cut after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct PunctuationSet(Vec<char>);

impl Default for PunctuationSet {
    fn default() -> Self {
        ".,!?;:。，！？；：".into()
    }
}

impl From<&str> for PunctuationSet {
    fn from(s: &str) -> Self {
        let mut chars: Vec<char> = s.chars().collect();
        chars.dedup();
        Self(chars)
    }
}

impl From<String> for PunctuationSet {
    fn from(s: String) -> Self {
        s.as_str().into()
    }
}

impl From<PunctuationSet> for String {
    fn from(p: PunctuationSet) -> Self {
        p.0.into_iter().collect()
    }
}

impl PunctuationSet {
    pub fn contains(&self, c: char) -> bool {
        self.0.contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncationResult {
    pub kept_text: String,
    pub kept_frame_count: u64,
    /// Characters kept.
    pub cut_at: usize,
}

/// Cuts `text` after the last punctuation mark among its first
/// `interrupt_char_offset` characters (the part already spoken). Frames are
/// mapped to text by character share: `frames * kept_chars / total_chars`.
pub fn truncate_on_interrupt(
    text: &str,
    interrupt_char_offset: usize,
    punctuation: &PunctuationSet,
    total_frames: u64,
) -> TruncationResult {
    let chars: Vec<char> = text.chars().collect();
    let spoken = interrupt_char_offset.min(chars.len());
    let cut_at = chars[..spoken]
        .iter()
        .rposition(|&c| punctuation.contains(c))
        .map_or(0, |i| i + 1);
    let kept_frame_count = if chars.is_empty() {
        0
    } else {
        total_frames * cut_at as u64 / chars.len() as u64
    };
    TruncationResult {
        kept_text: chars[..cut_at].iter().collect(),
        kept_frame_count,
        cut_at,
    }
}
