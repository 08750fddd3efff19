//! Wall-clock mode: the four stages run as threads against the real clock,
//! passing messages down ordered channels. One feedback channel from the
//! sink back to the LLM stage reports how much of an interrupted response
//! was kept. Results depend on scheduling and are not reproducible; use the
//! discrete-event driver for anything that is compared or asserted on.
//!
//! Differences from the discrete-event driver: control events travel through
//! the encode stage, so they wait behind in-flight encodes, and the audio
//! decoder runs inline in the sink thread.

use std::collections::VecDeque;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};

use super::log::{EventKind, EventLog, LogEvent};
use super::session::{packet_features, SessionError};
use crate::backend::{Backend, BackendMode, MockBackend, Script};
use crate::config::SessionConfig;
use crate::ids::{digest, token_id};
use crate::interleave::{build_chunk, Chunk, ChunkMode, EncodedFrame, Window};
use crate::sink::{codec_frame_duration_ms, truncate_on_interrupt, PunctuationSet, LOOKAHEAD_FRAMES};
use crate::trace::Trace;
use crate::vad::{TurnState, VadEvent, VadEventKind};
use crate::vision::frame_token_count;

#[derive(Clone, Copy)]
struct Clock {
    start: Instant,
    speed: f64,
}

impl Clock {
    fn now_ms(&self) -> u64 {
        (self.start.elapsed().as_secs_f64() * 1000.0 * self.speed) as u64
    }

    fn sleep_until(&self, t_ms: u64) {
        let target = Duration::from_secs_f64(t_ms as f64 / 1000.0 / self.speed);
        if let Some(d) = target.checked_sub(self.start.elapsed()) {
            thread::sleep(d);
        }
    }

    fn work(&self, ms: u64) {
        thread::sleep(Duration::from_secs_f64(ms as f64 / 1000.0 / self.speed));
    }
}

#[derive(Clone)]
struct Logger {
    tx: Sender<LogEvent>,
    clock: Clock,
}

impl Logger {
    fn ev(&self, kind: EventKind) -> LogEvent {
        LogEvent::new(self.clock.now_ms(), kind)
    }

    fn log(&self, e: LogEvent) {
        let _ = self.tx.send(e);
    }
}

enum Ingest {
    Packet { index: usize, dense_turn: Option<(u32, bool)> },
    Control(VadEvent),
}

enum ToLlm {
    Chunk { chunk: Chunk, first_packet: usize, turn: Option<u32> },
    Control(VadEvent),
}

enum ToSink {
    Begin { turn: u32, text: String },
    Frame,
    DecodingDone,
    Endpoint,
    Discard,
    BargeIn,
}

/// Runs `trace` in real time scaled by `speed` (2.0 plays twice as fast).
pub fn run_wall_clock(
    trace: &Trace,
    cfg: &SessionConfig,
    script: Script,
    speed: f64,
) -> Result<EventLog, SessionError> {
    assert!(speed > 0.0, "speed must be positive");
    let mut vad = TurnState::new();
    let mut vad_events = Vec::new();
    for p in &trace.packets {
        vad_events.extend(vad.feed(&p.audio, &cfg.vad)?);
    }
    let clock = Clock {
        start: Instant::now(),
        speed,
    };
    let (log_tx, log_rx) = unbounded();
    let (ingest_tx, ingest_rx) = unbounded();
    let (llm_tx, llm_rx) = unbounded();
    let (sink_tx, sink_rx) = unbounded();
    let (kept_tx, kept_rx) = bounded(1);
    let logger = Logger { tx: log_tx, clock };

    thread::scope(|s| {
        let l = logger.clone();
        s.spawn(move || vad_stage(trace, vad_events, l, ingest_tx));
        let l = logger.clone();
        s.spawn(move || encode_stage(trace, cfg, l, ingest_rx, llm_tx));
        let l = logger.clone();
        let backend = MockBackend::new(script, cfg.seed);
        let llm = s.spawn(move || llm_stage(cfg, backend, l, llm_rx, sink_tx, kept_rx));
        let l = logger.clone();
        let punct = cfg.sink.punctuation.clone();
        s.spawn(move || sink_stage(cfg, punct, l, sink_rx, kept_tx));
        drop(logger);
        llm.join().expect("llm stage panicked")
    })?;
    Ok(EventLog::canonicalize(log_rx.iter().collect()))
}

fn vad_stage(trace: &Trace, events: Vec<VadEvent>, log: Logger, tx: Sender<Ingest>) {
    let mut events: VecDeque<VadEvent> = events.into();
    let mut open_turn: Option<(u32, bool)> = None;
    let mut dense_sent = false;
    for (i, p) in trace.packets.iter().enumerate() {
        let arrival = p.audio.end_ms();
        while let Some(ev) = events.front().copied().filter(|e| e.at_ms < arrival) {
            events.pop_front();
            log.clock.sleep_until(ev.at_ms);
            match ev.kind {
                VadEventKind::SpeechStart => {
                    open_turn = Some((ev.turn, true));
                    dense_sent = false;
                }
                VadEventKind::Endpoint => open_turn = None,
                _ => {}
            }
            log.log(log.ev(vad_kind(ev.kind)).turn(ev.turn));
            let _ = tx.send(Ingest::Control(ev));
        }
        log.clock.sleep_until(arrival);
        log.log(log.ev(EventKind::PacketArrival).index(i as u64));
        let dense_turn = open_turn.map(|(t, _)| (t, !dense_sent));
        dense_sent |= dense_turn.is_some();
        let _ = tx.send(Ingest::Packet { index: i, dense_turn });
    }
    for ev in events {
        log.clock.sleep_until(ev.at_ms);
        log.log(log.ev(vad_kind(ev.kind)).turn(ev.turn));
        let _ = tx.send(Ingest::Control(ev));
    }
}

fn vad_kind(k: VadEventKind) -> EventKind {
    match k {
        VadEventKind::SpeechStart => EventKind::SpeechStart,
        VadEventKind::SpeechEnd => EventKind::SpeechEnd,
        VadEventKind::Speculative => EventKind::Speculative,
        VadEventKind::Cancelled => EventKind::Cancelled,
        VadEventKind::Endpoint => EventKind::Endpoint,
        VadEventKind::BargeIn => EventKind::BargeIn,
    }
}

fn encode_stage(trace: &Trace, cfg: &SessionConfig, log: Logger, rx: Receiver<Ingest>, tx: Sender<ToLlm>) {
    let features = packet_features(trace, cfg.seed, cfg.pipeline.audio_feature_period_ms);
    let encode = |f: &crate::vision::FrameSpec| EncodedFrame {
        frame: *f,
        tokens: (0..frame_token_count(f.width, f.height, &cfg.budget))
            .map(|i| token_id(cfg.seed, 0x10, f.timestamp_ms, i))
            .collect(),
    };
    let mut pair: Option<usize> = None;
    for msg in rx {
        match msg {
            Ingest::Control(ev) => {
                if ev.kind == VadEventKind::SpeechStart {
                    pair = None;
                }
                let _ = tx.send(ToLlm::Control(ev));
            }
            Ingest::Packet { index, dense_turn } => {
                let p = &trace.packets[index];
                let (chunk, first_packet, turn) = match dense_turn {
                    Some((turn, first)) => {
                        let frames = p.frames.iter().map(encode).collect();
                        let window = Window::new(p.audio.start_ms, p.audio.end_ms());
                        let chunk = build_chunk(frames, features[index].clone(), window, ChunkMode::Dense)
                            .and_then(|c| c.with_turn_bounds(first, false))
                            .expect("validated trace yields valid dense chunks");
                        (chunk, index, Some(turn))
                    }
                    None => match pair.take() {
                        Some(q) if q + 1 == index => {
                            let first = &trace.packets[q];
                            let start = first.audio.start_ms;
                            let window = Window::new(start, start + ChunkMode::Sparse.duration_ms());
                            let chunk = build_chunk(vec![encode(&first.frames[0])], Vec::new(), window, ChunkMode::Sparse)
                                .expect("validated trace yields valid sparse chunks");
                            (chunk, q, None)
                        }
                        _ => {
                            pair = Some(index);
                            continue;
                        }
                    },
                };
                let audio_ms = if chunk.mode == ChunkMode::Dense { chunk.duration_ms } else { 0 };
                log.clock
                    .work(cfg.compute.encode_ms(chunk.video_groups.len() as u64, audio_ms));
                let kind = match chunk.mode {
                    ChunkMode::Dense => EventKind::EncodeDense,
                    ChunkMode::Sparse => EventKind::EncodeSparse,
                };
                let mut e = log
                    .ev(kind)
                    .index(first_packet as u64)
                    .value(chunk.token_count() as u64)
                    .digest(digest(chunk.serialize().as_bytes()));
                e.turn = turn;
                log.log(e);
                let _ = tx.send(ToLlm::Chunk { chunk, first_packet, turn });
            }
        }
    }
}

struct LlmState<'a, B> {
    cfg: &'a SessionConfig,
    backend: B,
    log: Logger,
    sink: Sender<ToSink>,
    kept: Receiver<Option<u64>>,
    turn: Option<u32>,
    speculating: bool,
    committed: bool,
    decoding: bool,
    held: Vec<(Chunk, usize, Option<u32>)>,
    pending_sparse: Vec<(Chunk, usize, Option<u32>)>,
}

impl<B: Backend> LlmState<'_, B> {
    fn prefill(&mut self, chunk: Chunk, first_packet: usize, turn: Option<u32>) {
        let tokens = chunk.token_count() as u64;
        self.log.clock.work(self.cfg.compute.prefill_ms(tokens));
        if self.backend.prefill(tokens).is_err() {
            return;
        }
        let kind = match chunk.mode {
            ChunkMode::Dense => EventKind::PrefillDense,
            ChunkMode::Sparse => EventKind::PrefillSparse,
        };
        let mut e = self
            .log
            .ev(kind)
            .index(first_packet as u64)
            .value(tokens)
            .digest(digest(chunk.serialize().as_bytes()));
        e.turn = turn;
        self.log.log(e);
    }

    fn drop_chunk(&self, chunk: &Chunk, first_packet: usize, turn: Option<u32>) {
        let mut e = self
            .log
            .ev(EventKind::ChunkDropped)
            .index(first_packet as u64)
            .value(chunk.token_count() as u64)
            .digest(digest(chunk.serialize().as_bytes()));
        e.turn = turn;
        self.log.log(e);
    }

    fn handle(&mut self, msg: ToLlm) -> Result<(), SessionError> {
        match msg {
            ToLlm::Chunk { chunk, first_packet, turn } => {
                match chunk.mode {
                    ChunkMode::Dense if self.committed => self.drop_chunk(&chunk, first_packet, turn),
                    ChunkMode::Dense if self.speculating => self.held.push((chunk, first_packet, turn)),
                    ChunkMode::Sparse if self.turn.is_none() || self.committed => {
                        self.pending_sparse.push((chunk, first_packet, turn))
                    }
                    _ => self.prefill(chunk, first_packet, turn),
                }
            }
            ToLlm::Control(ev) => match ev.kind {
                VadEventKind::SpeechStart => {
                    self.turn = Some(ev.turn);
                    self.committed = false;
                    for (c, p, t) in std::mem::take(&mut self.pending_sparse) {
                        self.prefill(c, p, t);
                    }
                }
                VadEventKind::SpeechEnd => {}
                VadEventKind::Speculative => {
                    self.backend.begin_decode()?;
                    self.speculating = true;
                    self.decoding = true;
                    let boundary = self.backend.state().committed_boundary;
                    self.log.log(self.log.ev(EventKind::BeginDecode).turn(ev.turn).value(boundary));
                    let _ = self.sink.send(ToSink::Begin {
                        turn: ev.turn,
                        text: self.backend.response_text().to_owned(),
                    });
                    if self.backend.is_turn_complete() {
                        self.finish_decoding(ev.turn);
                    }
                }
                VadEventKind::Cancelled => {
                    if self.backend.state().mode == BackendMode::Decode {
                        let steps = self.backend.steps_emitted();
                        self.backend.rollback()?;
                        self.log.log(self.log.ev(EventKind::Rollback).turn(ev.turn).value(steps));
                        let _ = self.sink.send(ToSink::Discard);
                    }
                    self.speculating = false;
                    self.decoding = false;
                    for (c, p, t) in std::mem::take(&mut self.held) {
                        self.prefill(c, p, t);
                    }
                }
                VadEventKind::Endpoint => {
                    self.speculating = false;
                    self.committed = true;
                    for (c, p, t) in std::mem::take(&mut self.held) {
                        self.drop_chunk(&c, p, t);
                    }
                    let _ = self.sink.send(ToSink::Endpoint);
                }
                VadEventKind::BargeIn => {
                    if self.backend.state().mode == BackendMode::Decode {
                        let _ = self.sink.send(ToSink::BargeIn);
                        let kept = self.kept.recv().ok().flatten();
                        let steps = self.backend.steps_emitted();
                        self.backend.complete_turn(kept.map_or(steps, |k| k.min(steps)))?;
                    }
                    self.decoding = false;
                    self.turn = None;
                }
            },
        }
        Ok(())
    }

    fn finish_decoding(&mut self, turn: u32) {
        self.decoding = false;
        let steps = self.backend.steps_emitted();
        self.log.log(self.log.ev(EventKind::TurnComplete).turn(turn).value(steps));
        let _ = self.sink.send(ToSink::DecodingDone);
    }

    fn step(&mut self) -> Result<(), SessionError> {
        let turn = self.turn.unwrap_or_default();
        self.log.clock.work(self.cfg.compute.decode_step_ms());
        let step = self.backend.decode_step()?;
        self.log.log(
            self.log
                .ev(EventKind::DecodeStep)
                .turn(turn)
                .index(step.step_index)
                .digest(digest(format!("{step:?}").as_bytes())),
        );
        if step.completed_frame().is_some() {
            let _ = self.sink.send(ToSink::Frame);
        }
        if self.backend.is_turn_complete() {
            self.finish_decoding(turn);
        }
        Ok(())
    }
}

fn llm_stage<B: Backend>(
    cfg: &SessionConfig,
    backend: B,
    log: Logger,
    rx: Receiver<ToLlm>,
    sink: Sender<ToSink>,
    kept: Receiver<Option<u64>>,
) -> Result<(), SessionError> {
    let mut st = LlmState {
        cfg,
        backend,
        log,
        sink,
        kept,
        turn: None,
        speculating: false,
        committed: false,
        decoding: false,
        held: Vec::new(),
        pending_sparse: Vec::new(),
    };
    loop {
        if st.decoding {
            st.step()?;
            while let Ok(msg) = rx.try_recv() {
                st.handle(msg)?;
            }
        } else {
            match rx.recv() {
                Ok(msg) => st.handle(msg)?,
                Err(_) => return Ok(()),
            }
        }
    }
}

#[derive(Default)]
struct SinkResponse {
    turn: u32,
    text: String,
    ready: usize,
    decoded: usize,
    done: bool,
    armed: bool,
    playable: usize,
    play_starts: Vec<u64>,
    play_end: u64,
}

fn sink_stage(
    cfg: &SessionConfig,
    punct: PunctuationSet,
    log: Logger,
    rx: Receiver<ToSink>,
    kept: Sender<Option<u64>>,
) {
    let mut resp: Option<SinkResponse> = None;
    for msg in rx {
        match msg {
            ToSink::Begin { turn, text } => {
                resp = Some(SinkResponse {
                    turn,
                    text,
                    ..SinkResponse::default()
                })
            }
            ToSink::Frame => {
                if let Some(r) = resp.as_mut() {
                    r.ready += 1;
                }
            }
            ToSink::DecodingDone => {
                if let Some(r) = resp.as_mut() {
                    r.done = true;
                }
            }
            ToSink::Endpoint => {
                if let Some(r) = resp.as_mut() {
                    r.armed = true;
                }
            }
            ToSink::Discard => {
                if let Some(r) = resp.take() {
                    log.log(log.ev(EventKind::Discard).turn(r.turn).value(r.ready as u64));
                }
            }
            ToSink::BargeIn => {
                let mut reply = None;
                if let Some(r) = resp.take() {
                    let now = log.clock.now_ms();
                    let total = r.text.chars().count();
                    if !r.done || r.play_starts.len() < total || now < r.play_end {
                        let played = r.play_starts.iter().filter(|&&s| s < now).count();
                        let cut = truncate_on_interrupt(&r.text, played, &punct, total as u64);
                        log.log(
                            log.ev(EventKind::Truncate)
                                .turn(r.turn)
                                .index(cut.kept_frame_count)
                                .value(cut.cut_at as u64),
                        );
                        log.log(log.ev(EventKind::SinkStop).turn(r.turn).value((total - played) as u64));
                        reply = Some(cut.cut_at as u64);
                    }
                }
                let _ = kept.send(reply);
            }
        }
        let Some(r) = resp.as_mut() else { continue };
        while r.decoded < r.ready && (r.decoded + LOOKAHEAD_FRAMES < r.ready || r.done) {
            log.clock.work(cfg.compute.audio_decode_ms(r.decoded == 0));
            log.log(log.ev(EventKind::FramePlayable).turn(r.turn).index(r.decoded as u64));
            r.decoded += 1;
        }
        r.playable = r.decoded;
        if r.armed {
            while r.play_starts.len() < r.playable {
                let frame = r.play_starts.len();
                let now = log.clock.now_ms();
                log.log(log.ev(EventKind::Deliver).turn(r.turn).index(frame as u64));
                let start = now.max(r.play_end);
                r.play_starts.push(start);
                r.play_end = start + codec_frame_duration_ms(frame as u64);
            }
        }
    }
}
