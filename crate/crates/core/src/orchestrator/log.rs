use std::fmt;

use serde::{Deserialize, Serialize};

/// Pipeline stages in tie-break priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Vad,
    Encode,
    Llm,
    AudioSink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    // vad & frame sampling
    PacketArrival,
    SpeechStart,
    SpeechEnd,
    Speculative,
    Cancelled,
    Endpoint,
    BargeIn,
    // encoding
    EncodeDense,
    EncodeSparse,
    // llm
    PrefillDense,
    PrefillSparse,
    ChunkDropped,
    BeginDecode,
    DecodeStep,
    TurnComplete,
    Rollback,
    Truncate,
    // audio decoding
    FramePlayable,
    Deliver,
    Discard,
    SinkStop,
}

impl EventKind {
    pub fn stage(self) -> Stage {
        use EventKind::*;
        match self {
            PacketArrival | SpeechStart | SpeechEnd | Speculative | Cancelled | Endpoint | BargeIn => {
                Stage::Vad
            }
            EncodeDense | EncodeSparse => Stage::Encode,
            PrefillDense | PrefillSparse | ChunkDropped | BeginDecode | DecodeStep | TurnComplete
            | Rollback | Truncate => Stage::Llm,
            FramePlayable | Deliver | Discard | SinkStop => Stage::AudioSink,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).map_err(|_| fmt::Error)?;
        f.write_str(s.as_str().unwrap_or_default())
    }
}

/// One log line.
///
/// `index` names the object the event is about (packet, decode step or codec
/// frame); `value` carries a count whose meaning depends on `kind`:
///
/// | kind | index | value |
/// |------|-------|-------|
/// | `packet_arrival` | packet | - |
/// | `encode_*`, `prefill_*`, `chunk_dropped` | first packet of the chunk | tokens |
/// | `begin_decode` | - | committed boundary |
/// | `decode_step` | step | - |
/// | `turn_complete` | - | steps |
/// | `rollback` | - | discarded steps |
/// | `truncate` | kept frames | kept characters |
/// | `frame_playable`, `deliver` | frame | - |
/// | `discard`, `sink_stop` | - | frames thrown away |
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEvent {
    pub seq: u64,
    pub time_ms: u64,
    pub stage: Stage,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

impl LogEvent {
    pub fn new(time_ms: u64, kind: EventKind) -> Self {
        Self {
            seq: 0,
            time_ms,
            stage: kind.stage(),
            kind,
            turn: None,
            index: None,
            value: None,
            digest: None,
        }
    }

    pub fn turn(mut self, turn: u32) -> Self {
        self.turn = Some(turn);
        self
    }

    pub fn index(mut self, index: u64) -> Self {
        self.index = Some(index);
        self
    }

    pub fn value(mut self, value: u64) -> Self {
        self.value = Some(value);
        self
    }

    pub fn digest(mut self, digest: String) -> Self {
        self.digest = Some(digest);
        self
    }
}

/// Time-ordered record of a session. Ties are broken by stage priority, then
/// by the order events were produced; `seq` is the position in that order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct EventLog {
    events: Vec<LogEvent>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a log from events already in canonical order, renumbering `seq`.
    pub fn from_events(mut events: Vec<LogEvent>) -> Self {
        for (i, e) in events.iter_mut().enumerate() {
            e.seq = i as u64;
        }
        Self { events }
    }

    /// Sorts raw events into canonical order (stable) and numbers them.
    pub fn canonicalize(mut events: Vec<LogEvent>) -> Self {
        events.sort_by_key(|e| (e.time_ms, e.stage));
        Self::from_events(events)
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LogEvent> {
        self.events.iter()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &LogEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn first(&self, kind: EventKind, turn: u32) -> Option<&LogEvent> {
        self.events
            .iter()
            .find(|e| e.kind == kind && e.turn == Some(turn))
    }

    /// Whether events are time-ordered with stage-priority tie-breaks and
    /// contiguous sequence numbers.
    pub fn is_canonical(&self) -> bool {
        self.events.iter().enumerate().all(|(i, e)| e.seq == i as u64)
            && self
                .events
                .windows(2)
                .all(|w| (w[0].time_ms, w[0].stage) <= (w[1].time_ms, w[1].stage))
    }
}

pub const LOG_FORMAT: &str = "omnistream-event-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogHeader {
    format: String,
    version: u32,
}

pub fn write_log<W: std::io::Write>(mut w: W, log: &EventLog) -> std::io::Result<()> {
    let header = LogHeader {
        format: LOG_FORMAT.into(),
        version: LOG_VERSION,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for e in log.iter() {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a log written by [`write_log`]. Every line must be complete,
/// including its newline, and `seq` must count up from zero.
pub fn read_log<R: std::io::BufRead>(mut r: R) -> Result<EventLog, LogError> {
    let mut events = Vec::new();
    let mut line_no = 0;
    let mut buf = String::new();
    loop {
        buf.clear();
        if r.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let schema = |message: String| LogError::Schema {
            line: line_no,
            message,
        };
        let Some(text) = buf.strip_suffix('\n') else {
            return Err(schema("truncated line".into()));
        };
        if line_no == 1 {
            let h: LogHeader = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
            if h.format != LOG_FORMAT || h.version != LOG_VERSION {
                return Err(schema(format!(
                    "expected {LOG_FORMAT} version {LOG_VERSION}, got {} version {}",
                    h.format, h.version
                )));
            }
            continue;
        }
        let e: LogEvent = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
        if e.seq != events.len() as u64 {
            return Err(schema(format!("expected seq {}, got {}", events.len(), e.seq)));
        }
        if e.stage != e.kind.stage() {
            return Err(schema(format!("{} belongs to {:?}, not {:?}", e.kind, e.kind.stage(), e.stage)));
        }
        events.push(e);
    }
    if line_no == 0 {
        return Err(LogError::Schema {
            line: 1,
            message: "missing header".into(),
        });
    }
    Ok(EventLog { events })
}
