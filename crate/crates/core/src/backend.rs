//! Rollback-capable LLM stage.
//!
//! [`MockBackend`] stands in for the real model. It counts prefilled context
//! positions instead of holding a KV cache and reads its responses from a
//! [`Script`]. Each decode step yields one text token and the four codebook
//! tokens of the audio heads. Acoustic codebooks trail the semantic codebook
//! by one step, so the first step has no acoustic tokens and a trailing
//! flush step carries the acoustic tokens for the last semantic token.
//!
//! A real backend implementing [`Backend`] must restore its attention state
//! to `committed_boundary` on rollback, not just the counter.

use std::path::Path;

use thiserror::Error;

use crate::ids::token_id;
use crate::interleave;

pub const AUDIO_CODEBOOKS: usize = 4;
pub const ACOUSTIC_CODEBOOKS: usize = AUDIO_CODEBOOKS - 1;

const HEAD_TEXT: u64 = 0;
const HEAD_SEMANTIC: u64 = 1;
const HEAD_ACOUSTIC: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("{op} is not allowed in {mode:?} mode")]
    Mode { op: &'static str, mode: BackendMode },
    #[error("response already complete")]
    Exhausted,
    #[error("kept {kept} steps but only {emitted} were generated")]
    KeepOutOfRange { kept: u64, emitted: u64 },
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("reading script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("script has no responses")]
    Empty,
}

/// Canned responses, one per line; line `n` answers turn `n` (wrapping).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Script {
    responses: Vec<String>,
}

impl Default for Script {
    fn default() -> Self {
        Self {
            responses: vec!["Sure, I can see that. It looks like a busy street.".into()],
        }
    }
}

impl Script {
    pub fn from_text(text: &str) -> Result<Self, ScriptError> {
        let responses: Vec<String> = text.lines().map(str::to_owned).collect();
        if responses.is_empty() {
            return Err(ScriptError::Empty);
        }
        Ok(Self { responses })
    }

    pub fn from_lines<I, S>(lines: I) -> Result<Self, ScriptError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let responses: Vec<String> = lines.into_iter().map(Into::into).collect();
        if responses.is_empty() {
            return Err(ScriptError::Empty);
        }
        Ok(Self { responses })
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    pub fn response(&self, turn: u64) -> &str {
        &self.responses[(turn % self.responses.len() as u64) as usize]
    }

    pub fn responses(&self) -> &[String] {
        &self.responses
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendMode {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BackendState {
    pub prefilled_token_count: u64,
    /// Context position at the last commit point; rollback returns here.
    pub committed_boundary: u64,
    pub mode: BackendMode,
    /// Characters of the current response already emitted.
    pub script_cursor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AcousticTokens {
    /// Step 0: no semantic token precedes it yet.
    Pending,
    Ready {
        source_step: u64,
        tokens: [u32; ACOUSTIC_CODEBOOKS],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GenStep {
    pub step_index: u64,
    /// `None` on the audio-only flush step.
    pub text_token: Option<u32>,
    /// Codebook 0. `None` on the flush step.
    pub semantic_token: Option<u32>,
    /// Codebooks 1..=3 for the semantic token of the previous step.
    pub acoustic: AcousticTokens,
}

impl GenStep {
    /// Codec frame completed by this step, if any.
    pub fn completed_frame(&self) -> Option<u64> {
        match self.acoustic {
            AcousticTokens::Pending => None,
            AcousticTokens::Ready { source_step, .. } => Some(source_step),
        }
    }
}

/// The LLM stage as the pipeline drives it.
pub trait Backend {
    fn state(&self) -> BackendState;
    fn prefill(&mut self, tokens: u64) -> Result<(), BackendError>;
    fn begin_decode(&mut self) -> Result<(), BackendError>;
    fn decode_step(&mut self) -> Result<GenStep, BackendError>;
    fn is_turn_complete(&self) -> bool;
    fn rollback(&mut self) -> Result<(), BackendError>;
    /// Ends the response, keeping the first `kept_steps` generated steps in
    /// context, and returns to prefill.
    fn complete_turn(&mut self, kept_steps: u64) -> Result<(), BackendError>;
    /// Text of the response being decoded.
    fn response_text(&self) -> &str;
    /// Steps generated since `begin_decode`.
    fn steps_emitted(&self) -> u64;
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    script: Script,
    seed: u64,
    state: BackendState,
    snapshot: Option<BackendState>,
    response_turn: u64,
    response_chars: usize,
    steps: u64,
    complete: bool,
}

impl MockBackend {
    pub fn new(script: Script, seed: u64) -> Self {
        Self {
            script,
            seed,
            state: BackendState {
                prefilled_token_count: 0,
                committed_boundary: 0,
                mode: BackendMode::Prefill,
                script_cursor: 0,
            },
            snapshot: None,
            response_turn: 0,
            response_chars: 0,
            steps: 0,
            complete: false,
        }
    }

    /// Prefills a serialized chunk, counting its whitespace-separated tokens.
    pub fn prefill_serialized(&mut self, chunk: &str) -> Result<(), BackendError> {
        self.prefill(interleave::token_count(chunk) as u64)
    }

    pub fn responses_completed(&self) -> u64 {
        self.response_turn
    }

    fn require(&self, op: &'static str, mode: BackendMode) -> Result<(), BackendError> {
        if self.state.mode != mode {
            return Err(BackendError::Mode {
                op,
                mode: self.state.mode,
            });
        }
        Ok(())
    }

    fn id(&self, position: u64, head: u64) -> u32 {
        token_id(self.seed, head, self.response_turn, position)
    }
}

impl Backend for MockBackend {
    fn state(&self) -> BackendState {
        self.state
    }

    fn prefill(&mut self, tokens: u64) -> Result<(), BackendError> {
        self.require("prefill", BackendMode::Prefill)?;
        self.state.prefilled_token_count += tokens;
        Ok(())
    }

    fn begin_decode(&mut self) -> Result<(), BackendError> {
        self.require("begin_decode", BackendMode::Prefill)?;
        self.snapshot = Some(self.state);
        self.state.mode = BackendMode::Decode;
        self.state.committed_boundary = self.state.prefilled_token_count;
        self.state.script_cursor = 0;
        self.response_chars = self.script.response(self.response_turn).chars().count();
        self.steps = 0;
        self.complete = self.response_chars == 0;
        Ok(())
    }

    fn decode_step(&mut self) -> Result<GenStep, BackendError> {
        self.require("decode_step", BackendMode::Decode)?;
        if self.complete {
            return Err(BackendError::Exhausted);
        }
        let k = self.steps;
        let n = self.response_chars as u64;
        let acoustic = if k == 0 {
            AcousticTokens::Pending
        } else {
            let src = k - 1;
            AcousticTokens::Ready {
                source_step: src,
                tokens: [
                    self.id(src, HEAD_ACOUSTIC),
                    self.id(src, HEAD_ACOUSTIC + 1),
                    self.id(src, HEAD_ACOUSTIC + 2),
                ],
            }
        };
        let (text_token, semantic_token) = if k < n {
            (Some(self.id(k, HEAD_TEXT)), Some(self.id(k, HEAD_SEMANTIC)))
        } else {
            (None, None)
        };
        let step = GenStep {
            step_index: k,
            text_token,
            semantic_token,
            acoustic,
        };
        self.steps += 1;
        self.state.prefilled_token_count += 1;
        self.state.script_cursor = (self.steps as usize).min(self.response_chars);
        if self.steps > n {
            self.complete = true;
        }
        Ok(step)
    }

    fn is_turn_complete(&self) -> bool {
        self.state.mode == BackendMode::Decode && self.complete
    }

    fn rollback(&mut self) -> Result<(), BackendError> {
        self.require("rollback", BackendMode::Decode)?;
        self.state = self.snapshot.take().expect("snapshot taken at begin_decode");
        self.steps = 0;
        self.complete = false;
        Ok(())
    }

    fn complete_turn(&mut self, kept_steps: u64) -> Result<(), BackendError> {
        self.require("complete_turn", BackendMode::Decode)?;
        if kept_steps > self.steps {
            return Err(BackendError::KeepOutOfRange {
                kept: kept_steps,
                emitted: self.steps,
            });
        }
        let count = self.state.committed_boundary + kept_steps;
        self.state = BackendState {
            prefilled_token_count: count,
            committed_boundary: count,
            mode: BackendMode::Prefill,
            script_cursor: 0,
        };
        self.snapshot = None;
        self.response_turn += 1;
        self.steps = 0;
        self.complete = false;
        Ok(())
    }

    fn response_text(&self) -> &str {
        self.script.response(self.response_turn)
    }

    fn steps_emitted(&self) -> u64 {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend(line: &str) -> MockBackend {
        MockBackend::new(Script::from_lines([line]).unwrap(), 7)
    }

    #[test]
    fn prefill_counts() {
        let mut b = backend("Hi.");
        b.prefill(0).unwrap();
        assert_eq!(b.state().prefilled_token_count, 0);
        b.prefill(2 * 256 + 13 + 3).unwrap();
        assert_eq!(b.state().prefilled_token_count, 528);
        b.prefill_serialized("Second0: v1 v2").unwrap();
        assert_eq!(b.state().prefilled_token_count, 531);
    }

    #[test]
    fn prefill_rejected_while_decoding() {
        let mut b = backend("Hi.");
        b.begin_decode().unwrap();
        assert!(matches!(b.prefill(1), Err(BackendError::Mode { op: "prefill", .. })));
        assert!(matches!(b.begin_decode(), Err(BackendError::Mode { .. })));
    }

    #[test]
    fn begin_decode_snapshots_boundary() {
        let mut b = backend("Hi.");
        b.prefill(1000).unwrap();
        b.begin_decode().unwrap();
        assert_eq!(b.state().mode, BackendMode::Decode);
        assert_eq!(b.state().committed_boundary, 1000);
        b.rollback().unwrap();
        b.prefill(24).unwrap();
        b.begin_decode().unwrap();
        assert_eq!(b.state().committed_boundary, 1024);
    }

    #[test]
    fn offset_between_semantic_and_acoustic() {
        let mut b = backend("ab");
        b.begin_decode().unwrap();
        let s0 = b.decode_step().unwrap();
        assert!(s0.text_token.is_some() && s0.semantic_token.is_some());
        assert_eq!(s0.acoustic, AcousticTokens::Pending);
        let s1 = b.decode_step().unwrap();
        assert!(matches!(s1.acoustic, AcousticTokens::Ready { source_step: 0, .. }));
        let flush = b.decode_step().unwrap();
        assert_eq!(flush.text_token, None);
        assert!(matches!(flush.acoustic, AcousticTokens::Ready { source_step: 1, .. }));
        assert!(b.is_turn_complete());
        assert_eq!(b.decode_step(), Err(BackendError::Exhausted));
    }

    #[test]
    fn single_token_script_has_one_flush_step() {
        let mut b = backend("x");
        b.begin_decode().unwrap();
        b.decode_step().unwrap();
        assert!(!b.is_turn_complete());
        b.decode_step().unwrap();
        assert!(b.is_turn_complete());
        assert_eq!(b.steps_emitted(), 2);
    }

    #[test]
    fn rollback_restores_pre_begin_state() {
        let mut b = backend("hello");
        b.prefill(40).unwrap();
        let before = b.state();
        b.begin_decode().unwrap();
        for _ in 0..5 {
            b.decode_step().unwrap();
        }
        b.rollback().unwrap();
        assert_eq!(b.state(), before);
        assert_eq!(b.state().prefilled_token_count, 40);

        b.begin_decode().unwrap();
        b.rollback().unwrap();
        assert_eq!(b.state(), before);
        assert!(matches!(b.rollback(), Err(BackendError::Mode { .. })));
    }

    #[test]
    fn redecode_after_rollback_is_identical() {
        let mut b = backend("hey there");
        b.begin_decode().unwrap();
        let first: Vec<_> = (0..4).map(|_| b.decode_step().unwrap()).collect();
        b.rollback().unwrap();
        b.begin_decode().unwrap();
        let second: Vec<_> = (0..4).map(|_| b.decode_step().unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn complete_turn_keeps_prefix() {
        let mut b = backend("abcd");
        b.prefill(10).unwrap();
        b.begin_decode().unwrap();
        for _ in 0..3 {
            b.decode_step().unwrap();
        }
        assert!(b.complete_turn(4).is_err());
        b.complete_turn(2).unwrap();
        let s = b.state();
        assert_eq!((s.prefilled_token_count, s.committed_boundary, s.mode), (12, 12, BackendMode::Prefill));
        assert_eq!(b.responses_completed(), 1);
    }

    #[test]
    fn script_parsing() {
        assert!(matches!(Script::from_text(""), Err(ScriptError::Empty)));
        let s = Script::from_text("one\ntwo\n").unwrap();
        assert_eq!(s.response(0), "one");
        assert_eq!(s.response(3), "two");
    }
}
