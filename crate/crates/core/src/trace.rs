//! Recorded session input: JSON Lines with a header line, then one record per
//! audio packet, video frame or session end, in time order.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interleave::GRID_MS;
use crate::vad::{AudioPacket, SpeechRun, DEFAULT_PACKET_MS};
use crate::vision::FrameSpec;

pub const TRACE_FORMAT: &str = "omnistream-trace";
pub const TRACE_VERSION: u32 = 1;
/// Frames each audio packet must carry.
pub const FRAMES_PER_PACKET: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub format: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceRecord {
    AudioPacket {
        version: u32,
        time_ms: u64,
        duration_ms: u64,
        speech: Vec<SpeechRun>,
    },
    VideoFrame {
        version: u32,
        time_ms: u64,
        width: u32,
        height: u32,
    },
    SessionEnd {
        version: u32,
        time_ms: u64,
    },
}

impl TraceRecord {
    pub fn time_ms(&self) -> u64 {
        match *self {
            Self::AudioPacket { time_ms, .. }
            | Self::VideoFrame { time_ms, .. }
            | Self::SessionEnd { time_ms, .. } => time_ms,
        }
    }

    pub fn version(&self) -> u32 {
        match *self {
            Self::AudioPacket { version, .. }
            | Self::VideoFrame { version, .. }
            | Self::SessionEnd { version, .. } => version,
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("trace failed validation with {} violation(s)", .0.len())]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Schema,
    Ordering,
    FrameCount,
    FrameOutsidePacket,
    DuplicateFrame,
    FrameSize,
    PacketDuration,
    PacketGap,
    Grid,
    SpeechMask,
    SessionEnd,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Schema => "schema",
            Self::Ordering => "ordering",
            Self::FrameCount => "frame count",
            Self::FrameOutsidePacket => "frame outside packet",
            Self::DuplicateFrame => "duplicate frame",
            Self::FrameSize => "frame size",
            Self::PacketDuration => "packet duration",
            Self::PacketGap => "packet gap",
            Self::Grid => "grid",
            Self::SpeechMask => "speech mask",
            Self::SessionEnd => "session end",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// 1-based line in the trace file (the header is line 1).
    pub line: usize,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}: {}", self.line, self.kind, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracePacket {
    pub audio: AudioPacket,
    /// Sorted by timestamp, all inside the packet window.
    pub frames: Vec<FrameSpec>,
}

/// A validated trace: contiguous 1 s packets on the grid, each with its frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub packets: Vec<TracePacket>,
    pub end_ms: Option<u64>,
}

/// File line of the record at `index`; the header is line 1 and blank lines
/// are rejected, so records start on line 2.
pub fn record_line(index: usize) -> usize {
    index + 2
}

/// Parses and schema-checks a trace file into its records.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    let mut lines = reader.lines();
    let schema = |line: usize| move |e: serde_json::Error| TraceError::Schema {
        line,
        message: e.to_string(),
    };
    let header = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(TraceError::Schema {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let h: FileHeader = serde_json::from_str(&header).map_err(schema(1))?;
    if h.format != TRACE_FORMAT || h.version != TRACE_VERSION {
        return Err(TraceError::Schema {
            line: 1,
            message: format!(
                "expected {TRACE_FORMAT} version {TRACE_VERSION}, got {} version {}",
                h.format, h.version
            ),
        });
    }
    for (i, line) in lines.enumerate() {
        let line_no = record_line(i);
        let line = line?;
        let record: TraceRecord = serde_json::from_str(&line).map_err(schema(line_no))?;
        if record.version() != TRACE_VERSION {
            return Err(TraceError::Schema {
                line: line_no,
                message: format!("unsupported record version {}", record.version()),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Checks the structural rules a trace must satisfy and assembles it.
pub fn validate_trace(records: &[TraceRecord]) -> Result<Trace, Vec<Violation>> {
    let mut violations = Vec::new();
    let mut packets: Vec<(usize, TracePacket)> = Vec::new();
    let mut end_ms = None;
    let mut prev_time = 0;
    let mut push = |line, kind, message: String| violations.push(Violation { line, kind, message });

    for (pos, record) in records.iter().enumerate() {
        let line = record_line(pos);
        let t = record.time_ms();
        if t < prev_time {
            push(
                line,
                ViolationKind::Ordering,
                format!("time {t} ms precedes previous record at {prev_time} ms"),
            );
        }
        prev_time = prev_time.max(t);
        if end_ms.is_some() {
            push(line, ViolationKind::SessionEnd, "record after session_end".into());
        }
        match record {
            TraceRecord::AudioPacket {
                time_ms,
                duration_ms,
                speech,
                ..
            } => {
                if *duration_ms != DEFAULT_PACKET_MS {
                    push(
                        line,
                        ViolationKind::PacketDuration,
                        format!("packet lasts {duration_ms} ms, expected {DEFAULT_PACKET_MS}"),
                    );
                    continue;
                }
                match packets.last() {
                    None if time_ms % GRID_MS != 0 => push(
                        line,
                        ViolationKind::Grid,
                        format!("first packet starts at {time_ms} ms, off the {GRID_MS} ms grid"),
                    ),
                    Some((_, p)) if *time_ms != p.audio.end_ms() => push(
                        line,
                        if *time_ms < p.audio.end_ms() {
                            ViolationKind::Ordering
                        } else {
                            ViolationKind::PacketGap
                        },
                        format!(
                            "packet starts at {time_ms} ms, previous packet ends at {} ms",
                            p.audio.end_ms()
                        ),
                    ),
                    _ => {}
                }
                match AudioPacket::new(*time_ms, *duration_ms, speech.clone()) {
                    Ok(audio) => packets.push((
                        line,
                        TracePacket {
                            audio,
                            frames: Vec::new(),
                        },
                    )),
                    Err(e) => push(line, ViolationKind::SpeechMask, e.to_string()),
                }
            }
            TraceRecord::VideoFrame {
                time_ms,
                width,
                height,
                ..
            } => {
                if *width == 0 || *height == 0 {
                    push(
                        line,
                        ViolationKind::FrameSize,
                        format!("frame is {width}x{height}"),
                    );
                    continue;
                }
                let owner = packets
                    .last_mut()
                    .filter(|(_, p)| *time_ms >= p.audio.start_ms && *time_ms < p.audio.end_ms());
                match owner {
                    Some((_, p)) => {
                        if p.frames.iter().any(|f| f.timestamp_ms == *time_ms) {
                            push(
                                line,
                                ViolationKind::DuplicateFrame,
                                format!("second frame at {time_ms} ms"),
                            );
                        } else {
                            p.frames.push(FrameSpec {
                                width: *width,
                                height: *height,
                                timestamp_ms: *time_ms,
                            });
                        }
                    }
                    None => push(
                        line,
                        ViolationKind::FrameOutsidePacket,
                        format!("frame at {time_ms} ms is not inside the current packet"),
                    ),
                }
            }
            TraceRecord::SessionEnd { time_ms, .. } => {
                if let Some((_, p)) = packets.last() {
                    if *time_ms < p.audio.end_ms() {
                        push(
                            line,
                            ViolationKind::SessionEnd,
                            format!("session ends at {time_ms} ms inside the last packet"),
                        );
                    }
                }
                if pos + 1 != records.len() {
                    push(line, ViolationKind::SessionEnd, "session_end is not the last record".into());
                }
                end_ms = Some(*time_ms);
            }
        }
    }
    for (line, p) in &packets {
        if p.frames.len() != FRAMES_PER_PACKET {
            push(
                *line,
                ViolationKind::FrameCount,
                format!(
                    "packet at {} ms has {} frames, expected {FRAMES_PER_PACKET}",
                    p.audio.start_ms,
                    p.frames.len()
                ),
            );
        }
    }
    if !violations.is_empty() {
        violations.sort_by_key(|v| v.line);
        return Err(violations);
    }
    Ok(Trace {
        packets: packets.into_iter().map(|(_, p)| p).collect(),
        end_ms,
    })
}

/// Reads, schema-checks and validates a trace file.
pub fn load_trace(path: &std::path::Path) -> Result<Trace, TraceError> {
    let file = std::fs::File::open(path)?;
    let records = read_trace(std::io::BufReader::new(file))?;
    validate_trace(&records).map_err(TraceError::Invalid)
}

impl Trace {
    pub fn to_records(&self) -> Vec<TraceRecord> {
        let mut out = Vec::new();
        for p in &self.packets {
            out.push(TraceRecord::AudioPacket {
                version: TRACE_VERSION,
                time_ms: p.audio.start_ms,
                duration_ms: p.audio.duration_ms,
                speech: p.audio.speech_mask().to_vec(),
            });
            for f in &p.frames {
                out.push(TraceRecord::VideoFrame {
                    version: TRACE_VERSION,
                    time_ms: f.timestamp_ms,
                    width: f.width,
                    height: f.height,
                });
            }
        }
        if let Some(t) = self.end_ms {
            out.push(TraceRecord::SessionEnd {
                version: TRACE_VERSION,
                time_ms: t,
            });
        }
        out
    }

    pub fn duration_ms(&self) -> u64 {
        self.packets.last().map_or(0, |p| p.audio.end_ms())
    }
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    let header = FileHeader {
        format: TRACE_FORMAT.into(),
        version: TRACE_VERSION,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}
