//! Discrete-event session driver.
//!
//! Four stages share one virtual millisecond clock. Encode, LLM and audio
//! decode are single servers working through their queues in order; jobs
//! never preempt each other except when rollback or barge-in aborts the
//! current decode step and audio decode queue.
//!
//! Routing rules:
//! - A packet arriving while a user turn is open (speech started, endpoint
//!   not yet reached) becomes a dense chunk; otherwise it waits in a pair
//!   buffer that yields one sparse chunk per two consecutive packets.
//! - Dense chunks are prefilled as soon as they are encoded. Chunks whose
//!   packet arrives after the speculative point are held; rollback releases
//!   them to prefill, the endpoint drops them.
//! - Sparse chunks wait until the next turn opens and are prefilled ahead of
//!   that turn's dense chunks. A half-filled pair is dropped when a turn
//!   opens.
//! - At the speculative point `begin_decode` is queued behind every encode
//!   already in flight, so decoding sees all audio received up to then.
//! - Frame `j` becomes playable once frames `j..=j+3` exist (or decoding
//!   finished) and the audio decoder has processed it. Playable frames are
//!   delivered at the later of their playable time and the endpoint.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::log::{EventKind, EventLog, LogEvent, Stage};
use crate::backend::{Backend, BackendError, BackendState, GenStep, MockBackend, Script};
use crate::config::SessionConfig;
use crate::ids::{digest, token_id};
use crate::interleave::{
    build_chunk, AudioFeatureClock, Chunk, ChunkError, ChunkMode, EncodedFrame, InterleavedSequence,
    Window,
};
use crate::sink::{codec_frame_duration_ms, truncate_on_interrupt, DeliveryGate, LOOKAHEAD_FRAMES};
use crate::trace::Trace;
use crate::vad::{TurnState, VadError, VadEvent, VadEventKind};
use crate::vision::{frame_token_count, FrameSpec};

const DOMAIN_VIDEO: u64 = 0x10;
const DOMAIN_AUDIO: u64 = 0x11;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("vad: {0}")]
    Vad(#[from] VadError),
    #[error("chunk assembly: {0}")]
    Chunk(#[from] ChunkError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionOptions {
    /// Shuffles the order in which simultaneous events are inserted into the
    /// queue. The result must not change.
    pub tie_stress_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub log: EventLog,
    /// Everything prefilled into the backend, in order.
    pub sequence: InterleavedSequence,
    pub backend: BackendState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    time: u64,
    stage: Stage,
    class: u8,
    id: u64,
}

#[derive(Debug, Clone, Copy)]
enum Action {
    Arrival(usize),
    Vad(VadEvent),
    EncodeDone(u64),
    BeginReady(u64),
    LlmDone(u64),
    AudioDone { epoch: u64, frame: usize },
}

#[derive(Debug)]
struct Scheduled {
    key: Key,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    /// `spec` is the speculation in progress when the packet arrived.
    Dense { spec: Option<u64> },
    Sparse,
}

#[derive(Debug)]
struct EncodeJob {
    id: u64,
    chunk: Chunk,
    first_packet: usize,
    turn: Option<u32>,
    route: Route,
}

#[derive(Debug)]
struct PrefillJob {
    chunk: Chunk,
    first_packet: usize,
    turn: Option<u32>,
    digest: String,
}

#[derive(Debug)]
enum LlmJob {
    Prefill(PrefillJob),
    BeginDecode,
}

#[derive(Debug)]
enum Running {
    Prefill(PrefillJob),
    Step,
}

#[derive(Debug)]
struct UserTurn {
    turn: u32,
    dense_built: usize,
    dense_prefilled: usize,
    /// Current speculation, from the speculative point until rollback.
    spec: Option<u64>,
    /// Barrier event scheduled but not yet reached.
    begin_token: Option<u64>,
    begin_queued: bool,
    begin_started: bool,
    endpoint_ms: Option<u64>,
    markers_closed: bool,
    held: Vec<PrefillJob>,
}

impl UserTurn {
    fn new(turn: u32) -> Self {
        Self {
            turn,
            dense_built: 0,
            dense_prefilled: 0,
            spec: None,
            begin_token: None,
            begin_queued: false,
            begin_started: false,
            endpoint_ms: None,
            markers_closed: false,
            held: Vec::new(),
        }
    }

    fn is_open(&self) -> bool {
        self.endpoint_ms.is_none()
    }
}

#[derive(Debug)]
struct Response {
    turn: u32,
    text: String,
    frame_total: usize,
    ready: Vec<u64>,
    decoding_done: bool,
    next_audio: usize,
    playable: Vec<u64>,
    gate: DeliveryGate,
    play_starts: Vec<u64>,
    play_end: u64,
}

impl Response {
    fn new(turn: u32, text: &str) -> Self {
        Self {
            turn,
            text: text.to_owned(),
            frame_total: text.chars().count(),
            ready: Vec::new(),
            decoding_done: false,
            next_audio: 0,
            playable: Vec::new(),
            gate: DeliveryGate::default(),
            play_starts: Vec::new(),
            play_end: 0,
        }
    }

    fn is_audible_at(&self, t: u64) -> bool {
        !self.decoding_done || self.play_starts.len() < self.frame_total || t < self.play_end
    }
}

struct Session<'a, B> {
    trace: &'a Trace,
    cfg: &'a SessionConfig,
    backend: B,
    rng: Option<ChaCha8Rng>,
    heap: BinaryHeap<Reverse<Scheduled>>,
    now: u64,
    raw_log: Vec<LogEvent>,
    sequence: InterleavedSequence,
    packet_features: Vec<Vec<u32>>,

    encode_free_at: u64,
    encode_jobs: VecDeque<EncodeJob>,
    next_encode_id: u64,

    llm_queue: VecDeque<LlmJob>,
    llm_running: Option<(u64, Running)>,
    next_llm_id: u64,
    next_begin_token: u64,

    audio_free_at: u64,
    audio_epoch: u64,

    turn: Option<UserTurn>,
    response: Option<Response>,
    pair_buffer: Option<usize>,
    pending_sparse: Vec<PrefillJob>,
    unencoded_sparse: Vec<(Chunk, usize)>,
    last_enqueued_end: u64,
}

/// Runs a session with the mock backend answering from `script`.
pub fn run_session_with(
    trace: &Trace,
    cfg: &SessionConfig,
    script: Script,
    options: SessionOptions,
) -> Result<SessionOutput, SessionError> {
    let backend = MockBackend::new(script, cfg.seed);
    run_session_with_backend(trace, cfg, backend, options)
}

pub fn run_session_with_backend<B: Backend>(
    trace: &Trace,
    cfg: &SessionConfig,
    backend: B,
    options: SessionOptions,
) -> Result<SessionOutput, SessionError> {
    let mut session = Session::new(trace, cfg, backend, options);
    session.schedule_inputs()?;
    session.run()?;
    Ok(SessionOutput {
        log: EventLog::canonicalize(session.raw_log),
        sequence: session.sequence,
        backend: session.backend.state(),
    })
}

/// Audio feature ids per packet, numbered on one clock across the session.
pub(super) fn packet_features(trace: &Trace, seed: u64, period_ms: u64) -> Vec<Vec<u32>> {
    let mut clock = AudioFeatureClock::with_period_ms(period_ms);
    let mut next_id = 0u64;
    trace
        .packets
        .iter()
        .map(|p| {
            let (n, next) = clock.count(p.audio.duration_ms);
            clock = next;
            let ids = (next_id..next_id + n)
                .map(|k| token_id(seed, DOMAIN_AUDIO, k, 0))
                .collect();
            next_id += n;
            ids
        })
        .collect()
}

fn step_digest(step: &GenStep) -> String {
    digest(format!("{step:?}").as_bytes())
}

impl<'a, B: Backend> Session<'a, B> {
    fn new(trace: &'a Trace, cfg: &'a SessionConfig, backend: B, options: SessionOptions) -> Self {
        Self {
            trace,
            cfg,
            backend,
            rng: options.tie_stress_seed.map(ChaCha8Rng::seed_from_u64),
            heap: BinaryHeap::new(),
            now: 0,
            raw_log: Vec::new(),
            sequence: InterleavedSequence::new(),
            packet_features: packet_features(trace, cfg.seed, cfg.pipeline.audio_feature_period_ms),
            encode_free_at: 0,
            encode_jobs: VecDeque::new(),
            next_encode_id: 0,
            llm_queue: VecDeque::new(),
            llm_running: None,
            next_llm_id: 0,
            next_begin_token: 0,
            audio_free_at: 0,
            audio_epoch: 0,
            turn: None,
            response: None,
            pair_buffer: None,
            pending_sparse: Vec::new(),
            unencoded_sparse: Vec::new(),
            last_enqueued_end: 0,
        }
    }

    fn schedule(&mut self, time: u64, stage: Stage, class: u8, id: u64, action: Action) {
        self.heap.push(Reverse(Scheduled {
            key: Key {
                time,
                stage,
                class,
                id,
            },
            action,
        }));
    }

    /// Packet arrivals and the whole VAD timeline. VAD runs sample-synchronously
    /// on the audio; packets only group audio for the encoder.
    fn schedule_inputs(&mut self) -> Result<(), SessionError> {
        let mut batch = Vec::new();
        for (i, p) in self.trace.packets.iter().enumerate() {
            batch.push(Scheduled {
                key: Key {
                    time: p.audio.end_ms(),
                    stage: Stage::Vad,
                    class: 0,
                    id: i as u64,
                },
                action: Action::Arrival(i),
            });
        }
        let mut vad = TurnState::new();
        let mut n = 0u64;
        for p in &self.trace.packets {
            for ev in vad.feed(&p.audio, &self.cfg.vad)? {
                batch.push(Scheduled {
                    key: Key {
                        time: ev.at_ms,
                        stage: Stage::Vad,
                        class: 1,
                        id: n,
                    },
                    action: Action::Vad(ev),
                });
                n += 1;
            }
        }
        if let Some(rng) = self.rng.as_mut() {
            batch.shuffle(rng);
        }
        self.heap.extend(batch.into_iter().map(Reverse));
        Ok(())
    }

    fn run(&mut self) -> Result<(), SessionError> {
        while let Some(Reverse(item)) = self.heap.pop() {
            if self.trace.end_ms.is_some_and(|end| item.key.time > end) {
                break;
            }
            debug_assert!(item.key.time >= self.now);
            self.now = item.key.time;
            match item.action {
                Action::Arrival(i) => self.on_arrival(i)?,
                Action::Vad(ev) => self.on_vad(ev)?,
                Action::EncodeDone(id) => self.on_encode_done(id)?,
                Action::BeginReady(token) => self.on_begin_ready(token)?,
                Action::LlmDone(id) => self.on_llm_done(id)?,
                Action::AudioDone { epoch, frame } => self.on_audio_done(epoch, frame),
            }
        }
        Ok(())
    }

    fn log(&mut self, event: LogEvent) {
        self.raw_log.push(event);
    }

    fn ev(&self, kind: EventKind) -> LogEvent {
        LogEvent::new(self.now, kind)
    }

    fn encoded_frame(&self, f: &FrameSpec) -> EncodedFrame {
        let n = frame_token_count(f.width, f.height, &self.cfg.budget);
        EncodedFrame {
            frame: *f,
            tokens: (0..n)
                .map(|i| token_id(self.cfg.seed, DOMAIN_VIDEO, f.timestamp_ms, i))
                .collect(),
        }
    }

    fn on_arrival(&mut self, i: usize) -> Result<(), SessionError> {
        let packet = &self.trace.packets[i];
        let payload = serde_json::to_vec(&(packet.audio.start_ms, packet.audio.speech_mask(), &packet.frames))
            .expect("packet serializes");
        let e = self.ev(EventKind::PacketArrival).index(i as u64).digest(digest(&payload));
        self.log(e);

        if let Some(turn) = self.turn.as_mut().filter(|t| t.is_open()) {
            let first = turn.dense_built == 0;
            turn.dense_built += 1;
            let spec = turn.spec;
            let turn_id = turn.turn;
            let frames = packet.frames.iter().map(|f| self.encoded_frame(f)).collect();
            let window = Window::new(packet.audio.start_ms, packet.audio.end_ms());
            let chunk = build_chunk(frames, self.packet_features[i].clone(), window, ChunkMode::Dense)?
                .with_turn_bounds(first, false)?;
            self.submit_encode(chunk, i, Some(turn_id), Route::Dense { spec });
            return Ok(());
        }

        match self.pair_buffer.take() {
            Some(p) if p + 1 == i => {
                let first = &self.trace.packets[p];
                let start = first.audio.start_ms;
                let frame = self.encoded_frame(&first.frames[0]);
                let window = Window::new(start, start + ChunkMode::Sparse.duration_ms());
                let chunk = build_chunk(vec![frame], Vec::new(), window, ChunkMode::Sparse)?;
                if self.cfg.pipeline.eager_sparse_encode {
                    self.submit_encode(chunk, p, None, Route::Sparse);
                } else {
                    self.unencoded_sparse.push((chunk, p));
                }
            }
            _ => self.pair_buffer = Some(i),
        }
        Ok(())
    }

    fn submit_encode(&mut self, chunk: Chunk, first_packet: usize, turn: Option<u32>, route: Route) {
        let cost = match chunk.mode {
            ChunkMode::Dense => self.cfg.compute.encode_ms(chunk.video_groups.len() as u64, chunk.duration_ms),
            ChunkMode::Sparse => self.cfg.compute.encode_ms(chunk.video_groups.len() as u64, 0),
        };
        let done = self.now.max(self.encode_free_at) + cost;
        self.encode_free_at = done;
        let id = self.next_encode_id;
        self.next_encode_id += 1;
        self.encode_jobs.push_back(EncodeJob {
            id,
            chunk,
            first_packet,
            turn,
            route,
        });
        self.schedule(done, Stage::Encode, 0, id, Action::EncodeDone(id));
    }

    fn on_encode_done(&mut self, id: u64) -> Result<(), SessionError> {
        let job = self.encode_jobs.pop_front().expect("encode completion without a job");
        debug_assert_eq!(job.id, id);
        let serialized = job.chunk.serialize();
        let job_digest = digest(serialized.as_bytes());
        let kind = match job.route {
            Route::Dense { .. } => EventKind::EncodeDense,
            Route::Sparse => EventKind::EncodeSparse,
        };
        let mut e = self
            .ev(kind)
            .index(job.first_packet as u64)
            .value(job.chunk.token_count() as u64)
            .digest(job_digest.clone());
        e.turn = job.turn;
        self.log(e);

        let prefill = PrefillJob {
            chunk: job.chunk,
            first_packet: job.first_packet,
            turn: job.turn,
            digest: job_digest,
        };
        match job.route {
            Route::Dense { spec: None } => self.enqueue_prefill(prefill)?,
            Route::Dense { spec } => {
                let turn = self.turn.as_mut().filter(|t| Some(t.turn) == job.turn);
                match turn {
                    Some(t) if t.is_open() && t.spec == spec => t.held.push(prefill),
                    // Rolled back, or arrived before a later speculative point.
                    Some(t) if t.is_open() => self.enqueue_prefill(prefill)?,
                    _ => self.drop_chunk(&prefill),
                }
            }
            Route::Sparse => {
                if self.turn.as_ref().is_some_and(|t| t.is_open()) {
                    self.enqueue_prefill(prefill)?;
                } else {
                    self.pending_sparse.push(prefill);
                }
            }
        }
        Ok(())
    }

    fn drop_chunk(&mut self, job: &PrefillJob) {
        let mut e = self
            .ev(EventKind::ChunkDropped)
            .index(job.first_packet as u64)
            .value(job.chunk.token_count() as u64)
            .digest(job.digest.clone());
        e.turn = job.turn;
        self.log(e);
    }

    fn enqueue_prefill(&mut self, job: PrefillJob) -> Result<(), SessionError> {
        if job.chunk.start_ms < self.last_enqueued_end {
            self.drop_chunk(&job);
            return Ok(());
        }
        self.last_enqueued_end = job.chunk.end_ms();
        self.llm_queue.push_back(LlmJob::Prefill(job));
        self.pump_llm()
    }

    fn pump_llm(&mut self) -> Result<(), SessionError> {
        while self.llm_running.is_none() {
            let Some(job) = self.llm_queue.pop_front() else {
                break;
            };
            match job {
                LlmJob::Prefill(p) => {
                    let cost = self.cfg.compute.prefill_ms(p.chunk.token_count() as u64);
                    let id = self.next_llm_id;
                    self.next_llm_id += 1;
                    self.llm_running = Some((id, Running::Prefill(p)));
                    self.schedule(self.now + cost, Stage::Llm, 1, id, Action::LlmDone(id));
                }
                LlmJob::BeginDecode => self.begin_decode()?,
            }
        }
        Ok(())
    }

    fn start_step(&mut self) {
        let id = self.next_llm_id;
        self.next_llm_id += 1;
        self.llm_running = Some((id, Running::Step));
        let at = self.now + self.cfg.compute.decode_step_ms();
        self.schedule(at, Stage::Llm, 1, id, Action::LlmDone(id));
    }

    fn begin_decode(&mut self) -> Result<(), SessionError> {
        let turn = self.turn.as_mut().expect("begin_decode without a turn");
        turn.begin_queued = false;
        turn.begin_started = true;
        let turn_id = turn.turn;
        let endpoint = turn.endpoint_ms;
        self.backend.begin_decode()?;
        let e = self
            .ev(EventKind::BeginDecode)
            .turn(turn_id)
            .value(self.backend.state().committed_boundary);
        self.log(e);
        let mut resp = Response::new(turn_id, self.backend.response_text());
        if let Some(t4) = endpoint {
            resp.gate.arm(t4);
        }
        self.response = Some(resp);
        if endpoint.is_some() {
            self.close_markers();
        }
        if self.backend.is_turn_complete() {
            self.finish_decoding();
        } else {
            self.start_step();
        }
        Ok(())
    }

    fn finish_decoding(&mut self) {
        let resp = self.response.as_mut().expect("decoding without a response");
        resp.decoding_done = true;
        let turn = resp.turn;
        let e = self
            .ev(EventKind::TurnComplete)
            .turn(turn)
            .value(self.backend.steps_emitted());
        self.log(e);
        self.submit_audio();
    }

    fn on_llm_done(&mut self, id: u64) -> Result<(), SessionError> {
        match self.llm_running.take() {
            Some((running_id, running)) if running_id == id => match running {
                Running::Prefill(job) => {
                    let tokens = job.chunk.token_count() as u64;
                    self.backend.prefill(tokens)?;
                    let kind = match job.chunk.mode {
                        ChunkMode::Dense => EventKind::PrefillDense,
                        ChunkMode::Sparse => EventKind::PrefillSparse,
                    };
                    let mut e = self
                        .ev(kind)
                        .index(job.first_packet as u64)
                        .value(tokens)
                        .digest(job.digest);
                    e.turn = job.turn;
                    self.log(e);
                    if job.chunk.mode == ChunkMode::Dense {
                        if let Some(t) = self.turn.as_mut().filter(|t| Some(t.turn) == job.turn) {
                            t.dense_prefilled += 1;
                        }
                    }
                    self.sequence.push(job.chunk)?;
                    self.pump_llm()?;
                }
                Running::Step => self.on_step_done()?,
            },
            // Stale completion of an aborted job; put back what is running.
            other => self.llm_running = other,
        }
        Ok(())
    }

    fn on_step_done(&mut self) -> Result<(), SessionError> {
        let step = self.backend.decode_step()?;
        let resp = self.response.as_mut().expect("decode step without a response");
        let turn = resp.turn;
        if let Some(frame) = step.completed_frame() {
            debug_assert_eq!(frame as usize, resp.ready.len());
            resp.ready.push(self.now);
        }
        let e = self
            .ev(EventKind::DecodeStep)
            .turn(turn)
            .index(step.step_index)
            .digest(step_digest(&step));
        self.log(e);
        if self.backend.is_turn_complete() {
            self.finish_decoding();
            self.pump_llm()?;
        } else {
            self.start_step();
            self.submit_audio();
        }
        Ok(())
    }

    fn submit_audio(&mut self) {
        let Some(resp) = self.response.as_mut() else {
            return;
        };
        while resp.next_audio < resp.ready.len()
            && (resp.next_audio + LOOKAHEAD_FRAMES < resp.ready.len() || resp.decoding_done)
        {
            let frame = resp.next_audio;
            resp.next_audio += 1;
            let cost = self.cfg.compute.audio_decode_ms(frame == 0);
            let done = self.now.max(self.audio_free_at) + cost;
            self.audio_free_at = done;
            let epoch = self.audio_epoch;
            self.heap.push(Reverse(Scheduled {
                key: Key {
                    time: done,
                    stage: Stage::AudioSink,
                    class: 0,
                    id: (epoch << 32) | frame as u64,
                },
                action: Action::AudioDone { epoch, frame },
            }));
        }
    }

    fn reset_audio(&mut self) {
        self.audio_epoch += 1;
        self.audio_free_at = self.audio_free_at.min(self.now);
    }

    fn on_audio_done(&mut self, epoch: u64, frame: usize) {
        if epoch != self.audio_epoch {
            return;
        }
        let resp = self.response.as_mut().expect("audio frame without a response");
        debug_assert_eq!(frame, resp.playable.len());
        resp.playable.push(self.now);
        let turn = resp.turn;
        let armed = resp.gate.is_armed();
        let e = self.ev(EventKind::FramePlayable).turn(turn).index(frame as u64);
        self.log(e);
        if armed {
            self.deliver_pending();
        }
    }

    fn deliver_pending(&mut self) {
        let now = self.now;
        let Some(resp) = self.response.as_mut() else {
            return;
        };
        let mut delivered = Vec::new();
        while resp.play_starts.len() < resp.playable.len() {
            let frame = resp.play_starts.len();
            let at = resp
                .gate
                .gate_delivery(resp.playable[frame])
                .expect("delivery only after the gate is armed");
            debug_assert_eq!(at, now);
            let start = at.max(resp.play_end);
            resp.play_starts.push(start);
            resp.play_end = start + codec_frame_duration_ms(frame as u64);
            delivered.push(frame);
        }
        let turn = resp.turn;
        for frame in delivered {
            let e = self.ev(EventKind::Deliver).turn(turn).index(frame as u64);
            self.log(e);
        }
    }

    fn on_vad(&mut self, ev: VadEvent) -> Result<(), SessionError> {
        let kind = match ev.kind {
            VadEventKind::SpeechStart => EventKind::SpeechStart,
            VadEventKind::SpeechEnd => EventKind::SpeechEnd,
            VadEventKind::Speculative => EventKind::Speculative,
            VadEventKind::Cancelled => EventKind::Cancelled,
            VadEventKind::Endpoint => EventKind::Endpoint,
            VadEventKind::BargeIn => EventKind::BargeIn,
        };
        let e = self.ev(kind).turn(ev.turn);
        self.log(e);
        match ev.kind {
            VadEventKind::SpeechStart => self.open_turn(ev.turn)?,
            VadEventKind::SpeechEnd => {}
            VadEventKind::Speculative => self.request_decode(),
            VadEventKind::Cancelled => self.rollback()?,
            VadEventKind::Endpoint => self.commit(),
            VadEventKind::BargeIn => self.interrupt()?,
        }
        Ok(())
    }

    fn open_turn(&mut self, turn: u32) -> Result<(), SessionError> {
        debug_assert!(self.turn.is_none());
        self.turn = Some(UserTurn::new(turn));
        self.pair_buffer = None;
        for (chunk, p) in std::mem::take(&mut self.unencoded_sparse) {
            self.submit_encode(chunk, p, None, Route::Sparse);
        }
        for job in std::mem::take(&mut self.pending_sparse) {
            self.enqueue_prefill(job)?;
        }
        Ok(())
    }

    fn request_decode(&mut self) {
        let token = self.next_begin_token;
        self.next_begin_token += 1;
        let turn = self.turn.as_mut().expect("speculative point without a turn");
        turn.spec = Some(token);
        turn.begin_token = Some(token);
        let at = self.now.max(self.encode_free_at);
        self.schedule(at, Stage::Llm, 0, token, Action::BeginReady(token));
    }

    fn on_begin_ready(&mut self, token: u64) -> Result<(), SessionError> {
        let Some(turn) = self.turn.as_mut().filter(|t| t.begin_token == Some(token)) else {
            return Ok(());
        };
        turn.begin_token = None;
        turn.begin_queued = true;
        self.llm_queue.push_back(LlmJob::BeginDecode);
        self.pump_llm()
    }

    /// Withdraws a `begin_decode` that has not started. Returns whether there
    /// was one.
    fn cancel_pending_begin(&mut self) -> bool {
        let turn = self.turn.as_mut().expect("turn");
        if turn.begin_token.take().is_some() {
            return true;
        }
        if turn.begin_queued {
            turn.begin_queued = false;
            self.llm_queue.retain(|j| !matches!(j, LlmJob::BeginDecode));
            return true;
        }
        false
    }

    fn abort_step(&mut self) {
        if matches!(self.llm_running, Some((_, Running::Step))) {
            self.llm_running = None;
        }
    }

    fn rollback(&mut self) -> Result<(), SessionError> {
        let turn_id = self.turn.as_ref().expect("cancel without a turn").turn;
        if self.cancel_pending_begin() {
            let e = self.ev(EventKind::Rollback).turn(turn_id).value(0);
            self.log(e);
        } else if self.turn.as_ref().is_some_and(|t| t.begin_started) {
            self.abort_step();
            let steps = self.backend.steps_emitted();
            self.backend.rollback()?;
            let resp = self.response.take().expect("decoding turn has a response");
            self.reset_audio();
            let e = self.ev(EventKind::Rollback).turn(turn_id).value(steps);
            self.log(e);
            let e = self
                .ev(EventKind::Discard)
                .turn(turn_id)
                .value(resp.ready.len() as u64);
            self.log(e);
        }
        let turn = self.turn.as_mut().expect("turn");
        turn.spec = None;
        turn.begin_started = false;
        for job in std::mem::take(&mut turn.held) {
            self.enqueue_prefill(job)?;
        }
        self.pump_llm()
    }

    fn commit(&mut self) {
        let turn = self.turn.as_mut().expect("endpoint without a turn");
        turn.endpoint_ms = Some(self.now);
        let started = turn.begin_started;
        for job in std::mem::take(&mut turn.held) {
            self.drop_chunk(&job);
        }
        if started {
            if let Some(resp) = self.response.as_mut() {
                resp.gate.arm(self.now);
            }
            self.close_markers();
            self.deliver_pending();
        }
    }

    /// Marks the last prefilled dense chunk of the committed turn with the
    /// audio-end token.
    fn close_markers(&mut self) {
        let turn = self.turn.as_mut().expect("turn");
        if turn.markers_closed {
            return;
        }
        turn.markers_closed = true;
        if turn.dense_prefilled == 0 {
            return;
        }
        let last = self.sequence.last_mut().expect("prefilled chunk");
        debug_assert_eq!(last.mode, ChunkMode::Dense);
        last.is_last_of_turn = true;
    }

    fn interrupt(&mut self) -> Result<(), SessionError> {
        let turn_id = self.turn.as_ref().expect("barge-in without a turn").turn;
        if self.cancel_pending_begin() {
            let e = self.ev(EventKind::Truncate).turn(turn_id).index(0).value(0);
            self.log(e);
        } else if let Some(resp) = self.response.take() {
            if resp.is_audible_at(self.now) {
                let played = resp.play_starts.iter().filter(|&&s| s < self.now).count();
                let cut = truncate_on_interrupt(
                    &resp.text,
                    played,
                    &self.cfg.sink.punctuation,
                    resp.frame_total as u64,
                );
                self.abort_step();
                self.reset_audio();
                let kept = (cut.cut_at as u64).min(self.backend.steps_emitted());
                self.backend.complete_turn(kept)?;
                let e = self
                    .ev(EventKind::Truncate)
                    .turn(turn_id)
                    .index(cut.kept_frame_count)
                    .value(cut.cut_at as u64);
                self.log(e);
                let e = self
                    .ev(EventKind::SinkStop)
                    .turn(turn_id)
                    .value((resp.frame_total - played) as u64);
                self.log(e);
            } else {
                self.backend.complete_turn(self.backend.steps_emitted())?;
            }
        }
        self.turn = None;
        self.pump_llm()
    }
}
