//! Chunk-wise audio-visual interleaving and its textual token stream.
//!
//! A chunk covers a fixed window of the session: one second at 2 FPS while
//! the user is speaking (dense), two seconds at 0.5 FPS while the model is
//! responding (sparse). Each chunk serializes to one line:
//!
//! ```text
//! Second0: v11 v12 Second0.5: v13 v14 <|audio-start-token|> a1 a2 a3
//! Second1: v15 v16 Second1.5: v17 v18 a4 a5 a6 <|audio-end-token|>
//! Second2: v19 v20
//! ```
//!
//! Video token ids carry a `v` prefix and audio feature ids an `a` prefix.
//! The audio start marker opens a user turn on its first dense chunk and the
//! end marker closes it on its last. Chunk windows sit on the one-second
//! packet grid and the first frame of a chunk is always inside its first
//! second, which is what lets [`parse`] recover window bounds from the text.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vision::FrameSpec;

pub const AUDIO_START: &str = "<|audio-start-token|>";
pub const AUDIO_END: &str = "<|audio-end-token|>";
const TIMESTAMP_PREFIX: &str = "Second";

/// Packet grid all chunk windows are aligned to.
pub const GRID_MS: u64 = 1000;
/// Encoder output frame period; 80 ms per feature gives 12.5 Hz.
pub const AUDIO_FEATURE_PERIOD_MS: u64 = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkMode {
    Dense,
    Sparse,
}

impl ChunkMode {
    pub fn duration_ms(self) -> u64 {
        match self {
            ChunkMode::Dense => 1000,
            ChunkMode::Sparse => 2000,
        }
    }

    pub fn frames_per_chunk(self) -> usize {
        match self {
            ChunkMode::Dense => 2,
            ChunkMode::Sparse => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VideoGroup {
    pub timestamp_ms: u64,
    pub tokens: Vec<u32>,
}

/// A frame together with the visual token ids its encoder produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFrame {
    pub frame: FrameSpec,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start_ms: u64,
    pub end_ms: u64,
}

impl Window {
    pub fn new(start_ms: u64, end_ms: u64) -> Self {
        Self { start_ms, end_ms }
    }

    pub fn len_ms(&self) -> u64 {
        self.end_ms.saturating_sub(self.start_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Chunk {
    pub start_ms: u64,
    pub duration_ms: u64,
    pub mode: ChunkMode,
    pub video_groups: Vec<VideoGroup>,
    pub audio_feature_ids: Vec<u32>,
    pub is_first_of_turn: bool,
    pub is_last_of_turn: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChunkError {
    #[error("{mode:?} chunk needs a {expected} ms window, got {actual} ms")]
    WindowMismatch {
        mode: ChunkMode,
        expected: u64,
        actual: u64,
    },
    #[error("window start {0} ms is not on the {GRID_MS} ms packet grid")]
    MisalignedWindow(u64),
    #[error("{mode:?} chunk needs {expected} frames, got {actual}")]
    FrameCountMismatch {
        mode: ChunkMode,
        expected: usize,
        actual: usize,
    },
    #[error("frame at {timestamp_ms} ms lies outside [{start_ms}, {end_ms})")]
    FrameOutOfWindow {
        timestamp_ms: u64,
        start_ms: u64,
        end_ms: u64,
    },
    #[error("first frame at {0} ms is not within the first second of its window")]
    LateFirstFrame(u64),
    #[error("duplicate frame timestamp {0} ms")]
    DuplicateTimestamp(u64),
    #[error("{mode:?} chunk cannot carry {count} audio features")]
    AudioMismatch { mode: ChunkMode, count: usize },
    #[error("turn markers are only valid on dense chunks")]
    MarkerOnSparse,
    #[error("chunk starting at {start_ms} ms overlaps or precedes the previous chunk ending at {prev_end_ms} ms")]
    Ordering { start_ms: u64, prev_end_ms: u64 },
}

/// Assembles a chunk over `window`, checking the mode's duration, frame rate
/// and audio rules. Turn markers start cleared; see [`Chunk::with_turn_bounds`].
pub fn build_chunk(
    mut frames: Vec<EncodedFrame>,
    audio_ids: Vec<u32>,
    window: Window,
    mode: ChunkMode,
) -> Result<Chunk, ChunkError> {
    if window.len_ms() != mode.duration_ms() {
        return Err(ChunkError::WindowMismatch {
            mode,
            expected: mode.duration_ms(),
            actual: window.len_ms(),
        });
    }
    if !window.start_ms.is_multiple_of(GRID_MS) {
        return Err(ChunkError::MisalignedWindow(window.start_ms));
    }
    if frames.len() != mode.frames_per_chunk() {
        return Err(ChunkError::FrameCountMismatch {
            mode,
            expected: mode.frames_per_chunk(),
            actual: frames.len(),
        });
    }
    frames.sort_by_key(|f| f.frame.timestamp_ms);
    for f in &frames {
        let ts = f.frame.timestamp_ms;
        if ts < window.start_ms || ts >= window.end_ms {
            return Err(ChunkError::FrameOutOfWindow {
                timestamp_ms: ts,
                start_ms: window.start_ms,
                end_ms: window.end_ms,
            });
        }
    }
    if let Some(pair) = frames
        .windows(2)
        .find(|p| p[0].frame.timestamp_ms == p[1].frame.timestamp_ms)
    {
        return Err(ChunkError::DuplicateTimestamp(pair[0].frame.timestamp_ms));
    }
    let first_ts = frames[0].frame.timestamp_ms;
    if first_ts >= window.start_ms + GRID_MS {
        return Err(ChunkError::LateFirstFrame(first_ts));
    }
    let audio_ok = match mode {
        ChunkMode::Dense => !audio_ids.is_empty(),
        ChunkMode::Sparse => audio_ids.is_empty(),
    };
    if !audio_ok {
        return Err(ChunkError::AudioMismatch {
            mode,
            count: audio_ids.len(),
        });
    }

    Ok(Chunk {
        start_ms: window.start_ms,
        duration_ms: mode.duration_ms(),
        mode,
        video_groups: frames
            .into_iter()
            .map(|f| VideoGroup {
                timestamp_ms: f.frame.timestamp_ms,
                tokens: f.tokens,
            })
            .collect(),
        audio_feature_ids: audio_ids,
        is_first_of_turn: false,
        is_last_of_turn: false,
    })
}

impl Chunk {
    pub fn end_ms(&self) -> u64 {
        self.start_ms + self.duration_ms
    }

    pub fn with_turn_bounds(mut self, first: bool, last: bool) -> Result<Self, ChunkError> {
        if self.mode == ChunkMode::Sparse && (first || last) {
            return Err(ChunkError::MarkerOnSparse);
        }
        self.is_first_of_turn = first;
        self.is_last_of_turn = last;
        Ok(self)
    }

    pub fn visual_token_count(&self) -> usize {
        self.video_groups.iter().map(|g| g.tokens.len()).sum()
    }

    /// Tokens this chunk occupies in the backend context: one per timestamp,
    /// video id, audio id and turn marker.
    pub fn token_count(&self) -> usize {
        self.video_groups.len()
            + self.visual_token_count()
            + self.audio_feature_ids.len()
            + usize::from(self.is_first_of_turn)
            + usize::from(self.is_last_of_turn)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        write_chunk(&mut out, self);
        out
    }
}

/// Renders milliseconds as seconds, fraction only when nonzero (`0.5`, `12`).
pub fn render_seconds(ms: u64) -> String {
    let (whole, frac) = (ms / 1000, ms % 1000);
    if frac == 0 {
        whole.to_string()
    } else {
        let digits = format!("{frac:03}");
        format!("{whole}.{}", digits.trim_end_matches('0'))
    }
}

fn write_chunk(out: &mut String, chunk: &Chunk) {
    let mut sep = "";
    for g in &chunk.video_groups {
        let _ = write!(out, "{sep}{TIMESTAMP_PREFIX}{}:", render_seconds(g.timestamp_ms));
        sep = " ";
        for t in &g.tokens {
            let _ = write!(out, " v{t}");
        }
    }
    if chunk.is_first_of_turn {
        let _ = write!(out, " {AUDIO_START}");
    }
    for a in &chunk.audio_feature_ids {
        let _ = write!(out, " a{a}");
    }
    if chunk.is_last_of_turn {
        let _ = write!(out, " {AUDIO_END}");
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct InterleavedSequence {
    chunks: Vec<Chunk>,
}

impl InterleavedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_chunks(chunks: Vec<Chunk>) -> Result<Self, ChunkError> {
        let mut seq = Self::new();
        for c in chunks {
            seq.push(c)?;
        }
        Ok(seq)
    }

    /// Appends a chunk; windows must be strictly increasing and disjoint.
    pub fn push(&mut self, chunk: Chunk) -> Result<(), ChunkError> {
        if let Some(prev) = self.chunks.last() {
            if chunk.start_ms < prev.end_ms() {
                return Err(ChunkError::Ordering {
                    start_ms: chunk.start_ms,
                    prev_end_ms: prev.end_ms(),
                });
            }
        }
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn last_mut(&mut self) -> Option<&mut Chunk> {
        self.chunks.last_mut()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn token_count(&self) -> usize {
        self.chunks.iter().map(Chunk::token_count).sum()
    }

    /// One line per chunk, no trailing newline.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.chunks.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            write_chunk(&mut out, c);
        }
        out
    }
}

/// Tokens in a serialized stream: every whitespace-separated item counts once.
pub fn token_count(serialized: &str) -> usize {
    serialized.split_ascii_whitespace().count()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        Self {
            offset,
            message: message.into(),
        }
    }
}

/// Whitespace-separated words of `line` with their absolute byte offsets.
fn words(line: &str, base: usize) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_ascii_whitespace(), start) {
            (true, Some(s)) => {
                out.push((base + s, &line[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((base + s, &line[s..]));
    }
    out
}

fn parse_timestamp(word: &str, offset: usize) -> Result<u64, ParseError> {
    let rest = &word[TIMESTAMP_PREFIX.len()..];
    let int_len = rest.bytes().take_while(u8::is_ascii_digit).count();
    if int_len == 0 {
        return Err(ParseError::new(
            offset + TIMESTAMP_PREFIX.len(),
            "expected seconds after 'Second'",
        ));
    }
    let whole: u64 = rest[..int_len]
        .parse()
        .map_err(|_| ParseError::new(offset + TIMESTAMP_PREFIX.len(), "timestamp overflow"))?;
    let mut pos = int_len;
    let mut frac_ms = 0;
    if rest[pos..].starts_with('.') {
        pos += 1;
        let frac_len = rest[pos..].bytes().take_while(u8::is_ascii_digit).count();
        if frac_len == 0 || frac_len > 3 {
            return Err(ParseError::new(
                offset + TIMESTAMP_PREFIX.len() + pos,
                "expected 1 to 3 fractional digits",
            ));
        }
        let digits = &rest[pos..pos + frac_len];
        frac_ms = digits.parse::<u64>().unwrap() * 10u64.pow(3 - frac_len as u32);
        pos += frac_len;
    }
    let colon_at = offset + TIMESTAMP_PREFIX.len() + pos;
    match &rest[pos..] {
        ":" => {}
        "" => return Err(ParseError::new(colon_at, "expected ':' after timestamp")),
        _ => return Err(ParseError::new(colon_at, "unexpected text in timestamp")),
    }
    whole
        .checked_mul(1000)
        .and_then(|ms| ms.checked_add(frac_ms))
        .ok_or_else(|| ParseError::new(offset, "timestamp overflow"))
}

fn parse_id(word: &str, offset: usize) -> Result<u32, ParseError> {
    word[1..]
        .parse()
        .map_err(|_| ParseError::new(offset + 1, format!("invalid token id '{word}'")))
}

fn parse_line(line: &str, base: usize) -> Result<Chunk, ParseError> {
    let words = words(line, base);
    if words.is_empty() {
        return Err(ParseError::new(base, "empty chunk"));
    }

    let mut groups: Vec<VideoGroup> = Vec::new();
    let mut audio = Vec::new();
    let (mut first, mut last) = (false, false);
    // 0: video groups, 1: after start marker / audio ids, 2: after end marker
    let mut section = 0;
    for &(off, w) in &words {
        if w.starts_with(TIMESTAMP_PREFIX) {
            if section != 0 || !audio.is_empty() {
                return Err(ParseError::new(off, "timestamp after audio section"));
            }
            groups.push(VideoGroup {
                timestamp_ms: parse_timestamp(w, off)?,
                tokens: Vec::new(),
            });
        } else if w == AUDIO_START {
            if section != 0 || !audio.is_empty() {
                return Err(ParseError::new(off, "misplaced audio start marker"));
            }
            first = true;
            section = 1;
        } else if w == AUDIO_END {
            if section == 2 || audio.is_empty() {
                return Err(ParseError::new(off, "misplaced audio end marker"));
            }
            last = true;
            section = 2;
        } else if w.starts_with('v') {
            if section != 0 || !audio.is_empty() {
                return Err(ParseError::new(off, "video token after audio section"));
            }
            let group = groups
                .last_mut()
                .ok_or_else(|| ParseError::new(off, "video token before any timestamp"))?;
            group.tokens.push(parse_id(w, off)?);
        } else if w.starts_with('a') {
            if section == 2 {
                return Err(ParseError::new(off, "audio token after end marker"));
            }
            if groups.is_empty() {
                return Err(ParseError::new(off, "audio token before any timestamp"));
            }
            audio.push(parse_id(w, off)?);
        } else {
            return Err(ParseError::new(off, format!("unexpected token '{w}'")));
        }
    }

    let mode = if audio.is_empty() && !first && !last {
        ChunkMode::Sparse
    } else {
        ChunkMode::Dense
    };
    let start_ms = groups
        .first()
        .map(|g| g.timestamp_ms - g.timestamp_ms % GRID_MS)
        .ok_or_else(|| ParseError::new(base, "chunk without video"))?;
    let frames = groups
        .into_iter()
        .map(|g| EncodedFrame {
            frame: FrameSpec {
                width: 1,
                height: 1,
                timestamp_ms: g.timestamp_ms,
            },
            tokens: g.tokens,
        })
        .collect();
    build_chunk(
        frames,
        audio,
        Window::new(start_ms, start_ms + mode.duration_ms()),
        mode,
    )
    .and_then(|c| c.with_turn_bounds(first, last))
    .map_err(|e| ParseError::new(base, e.to_string()))
}

/// Inverse of [`InterleavedSequence::serialize`].
pub fn parse(text: &str) -> Result<InterleavedSequence, ParseError> {
    let mut seq = InterleavedSequence::new();
    if text.is_empty() {
        return Ok(seq);
    }
    let mut base = 0;
    for line in text.split('\n') {
        let chunk = parse_line(line, base)?;
        seq.push(chunk)
            .map_err(|e| ParseError::new(base, e.to_string()))?;
        base += line.len() + 1;
    }
    Ok(seq)
}

/// Counts encoder output frames (one per 80 ms) whose start falls in each
/// successive window. `carry_ms` is the offset of the next frame start from
/// the current position, so no frame is lost or duplicated at boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AudioFeatureClock {
    period_ms: u64,
    carry_ms: u64,
}

impl Default for AudioFeatureClock {
    fn default() -> Self {
        Self::new()
    }
}

impl AudioFeatureClock {
    pub fn new() -> Self {
        Self::with_period_ms(AUDIO_FEATURE_PERIOD_MS)
    }

    /// # Panics
    ///
    /// If `period_ms` is zero.
    pub fn with_period_ms(period_ms: u64) -> Self {
        assert!(period_ms > 0, "feature period must be positive");
        Self {
            period_ms,
            carry_ms: 0,
        }
    }

    pub fn rate_hz(&self) -> Ratio<u64> {
        Ratio::new(1000, self.period_ms)
    }

    pub fn carry_ms(&self) -> u64 {
        self.carry_ms
    }

    /// Features starting in the next `window_ms`, and the clock after it.
    pub fn count(self, window_ms: u64) -> (u64, Self) {
        if self.carry_ms >= window_ms {
            let next = Self {
                carry_ms: self.carry_ms - window_ms,
                ..self
            };
            return (0, next);
        }
        let n = (window_ms - self.carry_ms).div_ceil(self.period_ms);
        let next = Self {
            carry_ms: self.carry_ms + n * self.period_ms - window_ms,
            ..self
        };
        (n, next)
    }
}

/// Free-function form of [`AudioFeatureClock::count`].
pub fn audio_feature_count(clock: AudioFeatureClock, window_ms: u64) -> (u64, AudioFeatureClock) {
    clock.count(window_ms)
}
