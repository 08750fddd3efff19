//! Reference implementations the library is checked against. Each one is the
//! slow, obvious version of a rule: enumerate, step millisecond by
//! millisecond, or scan. None of them call into the code under test.

#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::path::PathBuf;

use num_rational::Ratio;
use omnistream_core::backend::Script;
use omnistream_core::orchestrator::{EventKind, EventLog};
use omnistream_core::synth::Scenario;
use omnistream_core::vad::{AudioPacket, SpeechRun, VadEventKind};
use omnistream_core::SessionConfig;
use rand::Rng;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Config file each golden scenario runs with.
pub fn golden_config(s: Scenario) -> SessionConfig {
    let name = match s {
        Scenario::BargeIn => "long.toml",
        _ => "short.toml",
    };
    SessionConfig::load(&golden_dir().join(name)).expect("golden config loads")
}

// ---------------------------------------------------------------- resize

/// Output size by brute force over every 112-multiple grid whose 14 px patch
/// count lies in 576..=5832.
pub fn resize_oracle(w: u32, h: u32) -> (u32, u32) {
    let (w, h) = (w as u128, h as u128);
    let patches = |ow: u128, oh: u128| (ow / 14) * (oh / 14);
    let in_range = |ow: u128, oh: u128| (576..=5832).contains(&patches(ow, oh));

    // nearest multiple of 112, halves going up
    let nearest = |x: u128| {
        let lo = x / 112 * 112;
        if x - lo >= lo + 112 - x {
            lo + 112
        } else {
            lo
        }
    };
    let (nw, nh) = (nearest(w), nearest(h));
    if nw > 0 && nh > 0 && in_range(nw, nh) {
        return (nw as u32, nh as u32);
    }

    let ratio = |x: u128, y: u128| {
        if x >= y {
            Ratio::new(x, y)
        } else {
            Ratio::new(y, x)
        }
    };
    type Key = (Ratio<u128>, Ratio<u128>, Reverse<u128>, Reverse<u128>);
    let mut best: Option<(Key, (u128, u128))> = None;
    let mut ow = 112;
    while patches(ow, 112) <= 5832 {
        let mut oh = 112;
        while patches(ow, oh) <= 5832 {
            if in_range(ow, oh) {
                let key = (
                    ratio(ow * h, oh * w),
                    ratio(ow * oh, w * h),
                    Reverse(ow * oh),
                    Reverse(ow),
                );
                if best.as_ref().is_none_or(|(k, _)| key < *k) {
                    best = Some((key, (ow, oh)));
                }
            }
            oh += 112;
        }
        ow += 112;
    }
    let (ow, oh) = best.expect("some grid is in range").1;
    (ow as u32, oh as u32)
}

// -------------------------------------------------------------- sampling

/// Frame times in µs by walking the default-rate grid one frame at a time.
pub fn sampling_oracle(duration_ms: u64, fps: u64, min_frames: u64, max_frames: u64) -> Vec<u64> {
    let mut native = Vec::new();
    let mut k = 0u64;
    // frame k sits at k/fps s; keep it while that is before the end
    while k * 1000 < duration_ms * fps {
        native.push(k * 1_000_000 / fps);
        k += 1;
    }
    let spread = |n: u64| -> Vec<u64> {
        let d = duration_ms as u128 * 1000;
        (0..n).map(|i| (i as u128 * d / n as u128) as u64).collect()
    };
    if (native.len() as u64) < min_frames {
        spread(min_frames)
    } else if native.len() as u64 > max_frames {
        spread(max_frames)
    } else {
        native
    }
}

// ---------------------------------------------------------- audio frames

/// Encoder frames (one every `period_ms` from 0) starting in `[start, end)`.
pub fn feature_starts_in(period_ms: u64, start: u64, end: u64) -> u64 {
    (start..end).filter(|t| t % period_ms == 0).count() as u64
}

// -------------------------------------------------------------------- vad

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefEvent {
    pub kind: VadEventKind,
    pub at_ms: u64,
    pub turn: u32,
}

/// Endpointing by stepping one millisecond at a time. At each instant the
/// silence timers are checked first, then the sample starting there.
pub fn vad_reference(mask: &[bool], speculative_ms: u64, endpoint_ms: u64) -> Vec<RefEvent> {
    #[derive(PartialEq)]
    enum S {
        Idle,
        Speaking,
        Quiet { since: u64, fired: bool },
        Done,
    }
    let mut out = Vec::new();
    let mut s = S::Idle;
    let mut turn = 0u32;
    for t in 0..=mask.len() as u64 {
        if let S::Quiet { since, fired } = s {
            if !fired && t == since + speculative_ms {
                out.push(RefEvent { kind: VadEventKind::Speculative, at_ms: t, turn });
                s = S::Quiet { since, fired: true };
            } else if fired && t == since + endpoint_ms {
                out.push(RefEvent { kind: VadEventKind::Endpoint, at_ms: t, turn });
                s = S::Done;
            }
        }
        let Some(&speech) = mask.get(t as usize) else { break };
        s = match (s, speech) {
            (S::Idle, true) => {
                out.push(RefEvent { kind: VadEventKind::SpeechStart, at_ms: t, turn });
                S::Speaking
            }
            (S::Speaking, false) => {
                out.push(RefEvent { kind: VadEventKind::SpeechEnd, at_ms: t, turn });
                S::Quiet { since: t, fired: false }
            }
            (S::Quiet { fired, .. }, true) => {
                if fired {
                    out.push(RefEvent { kind: VadEventKind::Cancelled, at_ms: t, turn });
                }
                S::Speaking
            }
            (S::Done, true) => {
                out.push(RefEvent { kind: VadEventKind::BargeIn, at_ms: t, turn });
                turn += 1;
                out.push(RefEvent { kind: VadEventKind::SpeechStart, at_ms: t, turn });
                S::Speaking
            }
            (s, _) => s,
        };
    }
    out
}

/// Random per-ms speech mask cut into packets of random length. Speech and
/// silence runs are drawn long enough to cross the thresholds now and then.
pub fn random_mask_packets(rng: &mut impl Rng, total_ms: u64) -> (Vec<bool>, Vec<AudioPacket>) {
    let mut mask = Vec::with_capacity(total_ms as usize);
    let mut speech = rng.gen_bool(0.5);
    while (mask.len() as u64) < total_ms {
        let len = match rng.gen_range(0..4) {
            0 => rng.gen_range(1..50),
            1 => rng.gen_range(50..400),
            _ => rng.gen_range(250..1200),
        };
        mask.extend(std::iter::repeat_n(speech, len));
        speech = !speech;
    }
    mask.truncate(total_ms as usize);

    let mut packets = Vec::new();
    let mut start = 0u64;
    while start < total_ms {
        let dur = rng.gen_range(1..=1500).min(total_ms - start);
        let mut runs: Vec<SpeechRun> = Vec::new();
        let mut off = 0;
        while off < dur {
            let v = mask[(start + off) as usize];
            runs.push(SpeechRun { offset_ms: off, is_speech: v });
            let mut end = off + 1;
            while end < dur && mask[(start + end) as usize] == v {
                end += 1;
            }
            // now and then split a run in two to exercise adjacent equal runs
            off = if end - off > 1 && rng.gen_ratio(1, 8) {
                rng.gen_range(off + 1..end)
            } else {
                end
            };
        }
        packets.push(AudioPacket::new(start, dur, runs).expect("runs are well formed"));
        start += dur;
    }
    (mask, packets)
}

// ------------------------------------------------------------- truncation

/// `(cut_at, kept_frames)`: keep everything up to and including the last
/// punctuation mark among the first `spoken` characters.
pub fn truncation_oracle(text: &str, spoken: usize, punct: &[char], total_frames: u64) -> (usize, u64) {
    let mut cut = 0;
    for (i, c) in text.chars().enumerate() {
        if i >= spoken {
            break;
        }
        if punct.contains(&c) {
            cut = i + 1;
        }
    }
    let n = text.chars().count() as u64;
    let kept = (total_frames * cut as u64).checked_div(n).unwrap_or(0);
    (cut, kept)
}

pub fn random_bilingual(rng: &mut impl Rng, len: usize) -> String {
    const LATIN: &[char] = &['a', 'b', 'e', 'o', 'r', 's', 't', 'Z', ' ', ' '];
    const HAN: &[char] = &['你', '好', '我', '们', '看', '到', '了', '猫', '车', '很'];
    const MARKS: &[char] = &['.', ',', '!', '?', ';', ':', '。', '，', '！', '？', '；', '：', '-', '…', '"'];
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0..=3 => LATIN[rng.gen_range(0..LATIN.len())],
            4..=7 => HAN[rng.gen_range(0..HAN.len())],
            _ => MARKS[rng.gen_range(0..MARKS.len())],
        })
        .collect()
}

// ---------------------------------------------------------------- scripts

pub fn random_script(rng: &mut impl Rng, responses: usize, max_len: usize) -> Script {
    let lines: Vec<String> = (0..responses)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            random_bilingual(rng, len).replace('\n', " ")
        })
        .collect();
    Script::from_lines(lines).expect("non-empty script")
}

// --------------------------------------------------------- session safety

/// Deliveries before their turn's endpoint, and deliveries of frames that
/// were not produced by the decode attempt still live when delivered.
pub fn delivery_violations(log: &EventLog) -> Vec<String> {
    #[derive(Default)]
    struct Turn {
        endpoint: Option<u64>,
        /// Highest step index of the live attempt, `None` before any step.
        live_steps: Option<u64>,
        live_complete: bool,
    }
    let mut turns: BTreeMap<u32, Turn> = BTreeMap::new();
    let mut bad = Vec::new();
    for e in log.iter() {
        let Some(turn) = e.turn else { continue };
        let t = turns.entry(turn).or_default();
        match e.kind {
            EventKind::Endpoint => t.endpoint = Some(e.time_ms),
            EventKind::BeginDecode => {
                t.live_steps = None;
                t.live_complete = false;
            }
            EventKind::DecodeStep => t.live_steps = e.index,
            EventKind::TurnComplete => t.live_complete = true,
            EventKind::Rollback => {
                t.live_steps = None;
                t.live_complete = false;
            }
            EventKind::Deliver => {
                let frame = e.index.unwrap_or(u64::MAX);
                match t.endpoint {
                    Some(ep) if ep <= e.time_ms => {}
                    _ => bad.push(format!("turn {turn}: frame {frame} delivered at {} before endpoint", e.time_ms)),
                }
                // frame j is completed by step j + 1 of the live attempt
                let generated = t.live_steps.is_some_and(|s| s > frame);
                if !generated {
                    bad.push(format!(
                        "turn {turn}: frame {frame} delivered at {} not generated by the live attempt",
                        e.time_ms
                    ));
                }
            }
            _ => {}
        }
    }
    bad
}

// ---------------------------------------------------------------- latency

/// One user turn of speech on `[speech_start, speech_end)` over 1 s packets,
/// with a response of `response_chars` characters.
#[derive(Debug, Clone, Copy)]
pub struct TurnCase {
    pub speech_start: u64,
    pub speech_end: u64,
    pub response_chars: u64,
    pub visual_tokens_per_frame: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TurnTiming {
    pub t3: u64,
    pub t4: u64,
    pub decode_start: u64,
    pub first_playable: u64,
}

impl TurnTiming {
    pub fn ttfp(&self) -> u64 {
        self.first_playable - self.t3
    }

    pub fn latency(&self) -> u64 {
        self.ttfp().saturating_sub(self.t4 - self.t3)
    }
}

/// First-frame timing of a single turn, replayed as two first-come
/// first-served servers (encoder, then LLM) fed by every packet that arrived
/// by the speculative point.
pub fn turn_timing_oracle(
    case: &TurnCase,
    cfg: &SessionConfig,
) -> TurnTiming {
    let c = &cfg.compute;
    let t3 = case.speech_end + cfg.vad.speculative_silence_ms();
    let t4 = case.speech_end + cfg.vad.endpoint_silence_ms();
    let vt = case.visual_tokens_per_frame;

    // (arrival, encode ms, tokens, sparse)
    let mut jobs = Vec::new();
    let mut i = 0u64;
    loop {
        let arrival = 1000 * (i + 1);
        if arrival > t3 {
            break;
        }
        if arrival <= case.speech_start {
            // pre-speech packets pair up; the second of a pair carries the job
            if i % 2 == 1 {
                jobs.push((arrival, c.encode_ms(1, 0), 1 + vt, true));
            }
        } else {
            let first = arrival - 1000 <= case.speech_start;
            let feats = feature_starts_in(80, 1000 * i, 1000 * (i + 1));
            jobs.push((arrival, c.encode_ms(2, 1000), 2 + 2 * vt + feats + u64::from(first), false));
        }
        i += 1;
    }

    let mut enc_free = 0;
    let mut llm_free = 0;
    for &(arrival, enc_ms, tokens, sparse) in &jobs {
        enc_free = enc_free.max(arrival) + enc_ms;
        let ready = if sparse { enc_free.max(case.speech_start) } else { enc_free };
        llm_free = llm_free.max(ready) + c.prefill_ms(tokens);
    }
    let decode_start = t3.max(enc_free).max(llm_free);
    let steps = case.response_chars.min(4) + 1;
    let first_playable = decode_start + steps * c.decode_step_ms() + c.audio_decode_ms(true);
    TurnTiming {
        t3,
        t4,
        decode_start,
        first_playable,
    }
}
