//! Acceptance suite. Runs every criterion at its stated size and tolerance,
//! prints one line per criterion and exits non-zero if any fails.
//!
//! `cargo test -p omnistream-core --test acceptance`

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use omnistream_core::backend::{AcousticTokens, Backend, MockBackend, Script};
use omnistream_core::interleave::{
    build_chunk, parse, AudioFeatureClock, ChunkMode, EncodedFrame, InterleavedSequence, Window,
};
use omnistream_core::metrics::{percentile_nearest_rank, summarize};
use omnistream_core::orchestrator::{
    audit_causality, first_response_latency, run_session, run_session_with, write_log, ComputeModel, EventKind,
    SessionOptions,
};
use omnistream_core::sink::{truncate_on_interrupt, PunctuationSet};
use omnistream_core::synth::{synth_trace, trace_from_speech, Scenario, SynthSpec};
use omnistream_core::trace::{write_trace, Trace};
use omnistream_core::vad::{TurnState, VadConfig, VadEventKind};
use omnistream_core::vision::{frame_token_count, plan_resize, plan_sampling, FrameSpec, ResizeBranch, SamplerConfig};
use omnistream_core::SessionConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn rng(criterion: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xacce_0000 + criterion)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn resize() -> Outcome {
    let mut rng = rng(1);
    let cases: Vec<(u32, u32)> = (0..10_000)
        .map(|i| match i % 4 {
            // small and near-grid sizes hit the minimal branch and its edges
            0 => (rng.gen_range(1..=1200), rng.gen_range(1..=1200)),
            1 => (rng.gen_range(1..=20) * 112 + rng.gen_range(0..3) * 56, rng.gen_range(1..=20) * 112),
            _ => (rng.gen_range(1..=20_000), rng.gen_range(1..=20_000)),
        })
        .collect();
    let started = Instant::now();
    let plans: Vec<_> = cases.iter().map(|&(w, h)| plan_resize(w, h)).collect();
    let elapsed = started.elapsed();
    let mut minimal = 0;
    for (&(w, h), p) in cases.iter().zip(&plans) {
        let ctx = || format!("{w}x{h} -> {p:?}");
        ensure(p.out_width % 112 == 0 && p.out_height % 112 == 0, || format!("not 112-aligned: {}", ctx()))?;
        ensure((576..=5832).contains(&p.patch_count()), || format!("patches out of range: {}", ctx()))?;
        ensure(
            p.patch_cols == p.out_width / 14 && p.patch_rows == p.out_height / 14,
            || format!("patch grid mismatch: {}", ctx()),
        )?;
        ensure(p.tokens_after_unshuffle == p.patch_count() / 4, || format!("token count: {}", ctx()))?;
        let want = resize_oracle(w, h);
        ensure((p.out_width, p.out_height) == want, || format!("oracle {want:?}: {}", ctx()))?;
        minimal += usize::from(p.branch == ResizeBranch::Minimal);
    }
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "10000 cases ({minimal} minimal) match the exhaustive oracle, plan_resize total {:.1?}",
        elapsed
    ))
}

fn sampling() -> Outcome {
    let mut rng = rng(2);
    let mut regimes = [0usize; 3];
    for _ in 0..1000 {
        let duration_ms = match rng.gen_range(0..3) {
            0 => rng.gen_range(1..10_000),
            1 => rng.gen_range(1..200_000),
            _ => rng.gen_range(100_000..2_000_000),
        };
        let cfg = if rng.gen_bool(0.5) {
            SamplerConfig::default()
        } else {
            let min = rng.gen_range(1..64);
            SamplerConfig {
                default_fps: rng.gen_range(1..=8),
                min_frames: min,
                max_frames: rng.gen_range(min..=512),
            }
        };
        let plan = plan_sampling(duration_ms, &cfg).map_err(|e| e.to_string())?;
        let want = sampling_oracle(
            duration_ms,
            cfg.default_fps as u64,
            cfg.min_frames as u64,
            cfg.max_frames as u64,
        );
        ensure(plan.frame_times_us == want, || {
            format!("{duration_ms} ms {cfg:?}: got {} frames, want {}", plan.frame_count(), want.len())
        })?;
        regimes[plan.regime as usize] += 1;
    }
    ensure(regimes.iter().all(|&n| n > 0), || format!("regime not exercised: {regimes:?}"))?;
    Ok(format!(
        "1000 cases, 0 mismatches (default {} / min-frames {} / capped {})",
        regimes[0], regimes[1], regimes[2]
    ))
}

fn random_sequence(rng: &mut ChaCha8Rng) -> InterleavedSequence {
    let mut seq = InterleavedSequence::new();
    let mut at = rng.gen_range(0..5) * 1000;
    for _ in 0..rng.gen_range(0..12) {
        let mode = if rng.gen_bool(0.6) { ChunkMode::Dense } else { ChunkMode::Sparse };
        let len = mode.duration_ms();
        let tokens = |rng: &mut ChaCha8Rng| (0..rng.gen_range(1..6)).map(|_| rng.gen()).collect::<Vec<u32>>();
        let frame = |ts: u64, rng: &mut ChaCha8Rng| EncodedFrame {
            frame: FrameSpec {
                width: 448,
                height: 448,
                timestamp_ms: ts,
            },
            tokens: tokens(rng),
        };
        let first = at + rng.gen_range(0..999);
        let mut frames = vec![frame(first, rng)];
        let audio = match mode {
            ChunkMode::Dense => {
                frames.push(frame(rng.gen_range(first + 1..at + len), rng));
                (0..rng.gen_range(1..15)).map(|_| rng.gen()).collect()
            }
            ChunkMode::Sparse => Vec::new(),
        };
        let mut chunk = build_chunk(frames, audio, Window::new(at, at + len), mode).expect("valid chunk");
        if mode == ChunkMode::Dense {
            chunk = chunk
                .with_turn_bounds(rng.gen_bool(0.3), rng.gen_bool(0.3))
                .expect("dense takes markers");
        }
        seq.push(chunk).expect("ordered");
        at += len + rng.gen_range(0..3) * 1000;
    }
    seq
}

fn interleave() -> Outcome {
    let mut rng = rng(3);
    let mut chunks = 0;
    for i in 0..1000 {
        let seq = random_sequence(&mut rng);
        chunks += seq.len();
        let text = seq.serialize();
        let back = parse(&text).map_err(|e| format!("sequence {i}: {e}\n{text}"))?;
        ensure(back == seq, || format!("sequence {i} did not round-trip:\n{text}"))?;
        ensure(back.serialize() == text, || format!("sequence {i} re-serializes differently"))?;
    }

    let mut windows = 0;
    for i in 0..10_000 {
        let period = if i % 2 == 0 { 80 } else { rng.gen_range(1..=200) };
        let mut clock = AudioFeatureClock::with_period_ms(period);
        let mut pos = 0;
        let mut total = 0;
        for _ in 0..rng.gen_range(1..30) {
            let len = match rng.gen_range(0..4) {
                0 => 0,
                1 => rng.gen_range(1..period + 2),
                _ => rng.gen_range(1..2500),
            };
            let (n, next) = clock.count(len);
            let want = feature_starts_in(period, pos, pos + len);
            ensure(n == want, || {
                format!("period {period}, window [{pos}, {}): counted {n}, enumerated {want}", pos + len)
            })?;
            clock = next;
            pos += len;
            total += n;
            windows += 1;
        }
        ensure(total == feature_starts_in(period, 0, pos), || format!("sequence {i} lost frames"))?;
    }
    Ok(format!(
        "1000 sequences ({chunks} chunks) round-trip; 10000 window sequences ({windows} windows) conserve frames"
    ))
}

fn endpointing() -> Outcome {
    let mut rng = rng(4);
    let mut events = 0;
    let mut endpoints = 0;
    for i in 0..10_000 {
        let endpoint = rng.gen_range(600..=700);
        let spec = rng.gen_range(1..endpoint);
        let cfg = VadConfig::new(endpoint, spec).map_err(|e| e.to_string())?;
        let total = rng.gen_range(1..8000);
        let (mask, packets) = random_mask_packets(&mut rng, total);
        let mut vad = TurnState::new();
        let mut got = Vec::new();
        for p in &packets {
            got.extend(vad.feed(p, &cfg).map_err(|e| e.to_string())?);
        }
        let got: Vec<RefEvent> = got
            .into_iter()
            .map(|e| RefEvent {
                kind: e.kind,
                at_ms: e.at_ms,
                turn: e.turn,
            })
            .collect();
        let want = vad_reference(&mask, spec, endpoint);
        ensure(got == want, || {
            let at = got.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(got.len().min(want.len()));
            format!(
                "mask {i} ({} packets, thresholds {spec}/{endpoint}): first difference at event {at}: {:?} vs {:?}",
                packets.len(),
                got.get(at),
                want.get(at)
            )
        })?;
        events += want.len();
        endpoints += want.iter().filter(|e| e.kind == VadEventKind::Endpoint).count();
    }
    Ok(format!("10000 masks, {events} events ({endpoints} endpoints) bit-exact"))
}

fn random_compute(rng: &mut ChaCha8Rng) -> ComputeModel {
    let scale = [1u64, 3, 10][rng.gen_range(0..3)];
    ComputeModel {
        encode_cost_per_frame_us: rng.gen_range(0..60_000) * scale,
        encode_cost_per_audio_second_us: rng.gen_range(0..30_000) * scale,
        prefill_cost_per_token_us: rng.gen_range(0..80) * scale,
        decode_step_us: rng.gen_range(1..45_000) * scale,
        audio_decode_cost_per_frame_us: rng.gen_range(0..10_000) * scale,
        audio_startup_us: rng.gen_range(0..30_000) * scale,
    }
}

fn random_vad(rng: &mut ChaCha8Rng) -> VadConfig {
    let endpoint = rng.gen_range(600..=700);
    VadConfig::new(endpoint, rng.gen_range(100..endpoint - 100)).expect("valid thresholds")
}

fn latency_identity() -> Outcome {
    let mut rng = rng(5);
    let (mut hidden, mut exposed) = (0, 0);
    for i in 0..500 {
        let mut cfg = SessionConfig {
            compute: random_compute(&mut rng),
            seed: rng.gen(),
            ..SessionConfig::default()
        };
        if i % 2 == 1 {
            cfg.vad = random_vad(&mut rng);
        }
        let speech_start = rng.gen_range(0..2500);
        let case = TurnCase {
            speech_start,
            speech_end: speech_start + rng.gen_range(600..4000),
            response_chars: rng.gen_range(1..30),
            visual_tokens_per_frame: frame_token_count(640, 480, &cfg.budget),
        };
        let trace = trace_from_speech(
            &[(case.speech_start, case.speech_end)],
            case.speech_end + 6000,
            (640, 480),
            |_| (0, 500),
        );
        let script = Script::from_lines(["x".repeat(case.response_chars as usize)]).expect("script");
        let out = run_session_with(&trace, &cfg, script, SessionOptions::default()).map_err(|e| e.to_string())?;
        let want = turn_timing_oracle(&case, &cfg);

        let at = |kind| out.log.first(kind, 0).map(|e| e.time_ms);
        let ctx = || format!("model {i} {:?} {case:?}", cfg.compute);
        ensure(at(EventKind::Speculative) == Some(want.t3), || format!("speculative point: {}", ctx()))?;
        ensure(at(EventKind::Endpoint) == Some(want.t4), || format!("endpoint: {}", ctx()))?;
        ensure(at(EventKind::BeginDecode) == Some(want.decode_start), || {
            format!("decode start {:?} want {}: {}", at(EventKind::BeginDecode), want.decode_start, ctx())
        })?;
        let playable = at(EventKind::FramePlayable).ok_or_else(|| format!("nothing playable: {}", ctx()))?;
        ensure(playable == want.first_playable, || {
            format!("first playable {playable} want {}: {}", want.first_playable, ctx())
        })?;
        let latency = first_response_latency(&out.log, 0).map_err(|e| e.to_string())?;
        let ttfp = playable - want.t3;
        let lead = cfg.vad.speculation_lead_ms();
        ensure(latency == ttfp.saturating_sub(lead), || {
            format!("latency {latency} != max(0, {ttfp} - {lead}): {}", ctx())
        })?;
        ensure(latency == want.latency(), || format!("latency {latency} != oracle {}", want.latency()))?;
        if ttfp <= lead {
            ensure(latency == 0, || format!("ttfp {ttfp} within lead but latency {latency}"))?;
            hidden += 1;
        } else {
            exposed += 1;
        }
    }
    ensure(hidden > 0 && exposed > 0, || format!("unbalanced suite: {hidden} hidden, {exposed} exposed"))?;
    Ok(format!(
        "500 compute models: identity exact; {hidden} fully hidden (latency 0), {exposed} exposed"
    ))
}

fn gating_safety() -> Outcome {
    let mut rng = rng(6);
    let (mut rollbacks, mut barge_ins, mut deliveries) = (0, 0, 0);
    for i in 0..1000 {
        let vad = random_vad(&mut rng);
        let spec = SynthSpec {
            turns: rng.gen_range(1..=8),
            seed: rng.gen(),
            rollback_pct: 35,
            barge_in_pct: 35,
            ..SynthSpec::default()
        };
        let trace = synth_trace(&spec, &vad);
        let cfg = SessionConfig {
            vad,
            compute: random_compute(&mut rng),
            seed: rng.gen(),
            ..SessionConfig::default()
        };
        let script = random_script(&mut rng, spec.turns as usize + 4, 150);
        let options = SessionOptions {
            tie_stress_seed: rng.gen_bool(0.3).then(|| rng.gen()),
        };
        let out = run_session_with(&trace, &cfg, script, options).map_err(|e| format!("session {i}: {e}"))?;
        let bad = delivery_violations(&out.log);
        ensure(bad.is_empty(), || format!("session {i}: {}", bad.join("; ")))?;
        let audit = audit_causality(&out.log);
        ensure(audit.is_empty(), || format!("session {i}: causality {:?}", audit.first()))?;
        rollbacks += out.log.of_kind(EventKind::Rollback).count();
        barge_ins += out.log.of_kind(EventKind::BargeIn).count();
        deliveries += out.log.of_kind(EventKind::Deliver).count();
    }
    ensure(rollbacks > 0 && barge_ins > 0, || "suite produced no rollback or barge-in".into())?;
    Ok(format!(
        "1000 sessions, {deliveries} deliveries, {rollbacks} rollbacks, {barge_ins} barge-ins: 0 early, 0 stale"
    ))
}

fn offset_invariant() -> Outcome {
    let mut rng = rng(7);
    let mut steps_total = 0;
    for i in 0..1000 {
        let responses = rng.gen_range(1..6);
        let script = random_script(&mut rng, responses, 60);
        let mut backend = MockBackend::new(script.clone(), rng.gen());
        for turn in 0..responses as u64 {
            backend.prefill(rng.gen_range(1..2000)).map_err(|e| e.to_string())?;
            // abandoned speculative attempts must not disturb the invariant
            for _ in 0..rng.gen_range(0..3) {
                backend.begin_decode().map_err(|e| e.to_string())?;
                for _ in 0..rng.gen_range(0..5) {
                    if backend.is_turn_complete() {
                        break;
                    }
                    backend.decode_step().map_err(|e| e.to_string())?;
                }
                backend.rollback().map_err(|e| e.to_string())?;
            }
            backend.begin_decode().map_err(|e| e.to_string())?;
            let mut steps = Vec::new();
            while !backend.is_turn_complete() {
                steps.push(backend.decode_step().map_err(|e| e.to_string())?);
            }
            let chars = script.response(turn).chars().count();
            let ctx = || format!("script {i} turn {turn} ({chars} chars)");
            ensure(steps.len() == chars + 1, || format!("{} steps: {}", steps.len(), ctx()))?;
            for (k, s) in steps.iter().enumerate() {
                ensure(s.step_index == k as u64, || format!("step {k} index: {}", ctx()))?;
                let ok = match s.acoustic {
                    AcousticTokens::Pending => k == 0,
                    AcousticTokens::Ready { source_step, .. } => k > 0 && source_step == k as u64 - 1,
                };
                ensure(ok, || format!("step {k} acoustic {:?}: {}", s.acoustic, ctx()))?;
            }
            let flush: Vec<usize> = steps
                .iter()
                .enumerate()
                .filter(|(_, s)| s.text_token.is_none() && s.semantic_token.is_none())
                .map(|(k, _)| k)
                .collect();
            ensure(flush == [chars], || format!("flush steps at {flush:?}: {}", ctx()))?;
            steps_total += steps.len();
            backend.complete_turn(steps.len() as u64).map_err(|e| e.to_string())?;
        }
    }
    Ok(format!("1000 scripts, {steps_total} steps: acoustic lags by one, one flush per turn"))
}

fn log_bytes(trace: &Trace, cfg: &SessionConfig, stress: Option<u64>) -> Result<Vec<u8>, String> {
    let script = cfg.load_script().map_err(|e| e.to_string())?;
    let options = SessionOptions { tie_stress_seed: stress };
    let out = run_session_with(trace, cfg, script, options).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_log(&mut buf, &out.log).map_err(|e| e.to_string())?;
    Ok(buf)
}

fn determinism() -> Outcome {
    let dir = golden_dir();
    for s in Scenario::ALL {
        let name = s.name();
        let trace = s.trace();
        let mut trace_bytes = Vec::new();
        write_trace(&mut trace_bytes, &trace.to_records()).map_err(|e| e.to_string())?;
        let on_disk = fs::read(dir.join(format!("{name}.trace.jsonl"))).map_err(|e| format!("{name}: {e}"))?;
        ensure(trace_bytes == on_disk, || format!("{name}: golden trace differs from the scenario"))?;

        let golden = fs::read(dir.join(format!("{name}.log.jsonl"))).map_err(|e| format!("{name}: {e}"))?;
        let cfg = golden_config(s);
        for run in 0..10 {
            ensure(log_bytes(&trace, &cfg, None)? == golden, || format!("{name}: run {run} differs from golden"))?;
        }
        for seed in [1, 2] {
            ensure(log_bytes(&trace, &cfg, Some(seed))? == golden, || {
                format!("{name}: stress seed {seed} differs from golden")
            })?;
        }
    }
    Ok("3 golden logs byte-identical over 10 runs and stress seeds 1, 2".into())
}

fn truncation() -> Outcome {
    let mut rng = rng(9);
    let set = PunctuationSet::default();
    let marks = ['.', ',', '!', '?', ';', ':', '。', '，', '！', '？', '；', '：'];
    let mut cut_somewhere = 0;
    for i in 0..5000 {
        let len = rng.gen_range(0..80);
        let text = random_bilingual(&mut rng, len);
        let spoken = rng.gen_range(0..=len + 5);
        let frames = rng.gen_range(0..300);
        let got = truncate_on_interrupt(&text, spoken, &set, frames);
        let (cut, kept) = truncation_oracle(&text, spoken, &marks, frames);
        ensure(got.cut_at == cut && got.kept_frame_count == kept, || {
            format!("string {i} {text:?} at {spoken}: got ({}, {}), want ({cut}, {kept})", got.cut_at, got.kept_frame_count)
        })?;
        ensure(got.kept_text.chars().count() == cut, || format!("string {i}: kept text length"))?;
        cut_somewhere += usize::from(cut > 0);
    }
    Ok(format!("5000 bilingual strings match the scan oracle ({cut_somewhere} cut after a mark)"))
}

fn benchmark() -> Outcome {
    let cfg = SessionConfig {
        script: None,
        ..SessionConfig::default()
    };
    let trace = synth_trace(&SynthSpec::default(), &cfg.vad);
    let started = Instant::now();
    let (log, report) = run_session(&trace, &cfg).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    report.check_consistency().map_err(|e| e.to_string())?;
    ensure(summarize(&log).map_err(|e| e.to_string())? == report, || "report is not a function of the log".into())?;
    ensure(report.turns.len() == 100, || format!("{} turns", report.turns.len()))?;
    let latencies: Vec<u64> = report.turns.iter().filter_map(|t| t.first_response_latency_ms).collect();
    let mut sorted = latencies.clone();
    sorted.sort_unstable();
    let rank = |p: usize| sorted[(p * sorted.len()).div_ceil(100).max(1) - 1];
    ensure(!sorted.is_empty(), || "no turn got a response".into())?;
    ensure(
        report.latency_p50_ms == Some(rank(50)) && report.latency_p95_ms == Some(rank(95)),
        || format!("percentiles {:?}/{:?} vs {}/{}", report.latency_p50_ms, report.latency_p95_ms, rank(50), rank(95)),
    )?;
    ensure(
        percentile_nearest_rank(&latencies, 95) == report.latency_p95_ms,
        || "p95 helper disagrees".into(),
    )?;
    Ok(format!(
        "100 turns, {} events in {:.1?}; {} responded, p50 {} ms, p95 {} ms, {} rollbacks, {} truncated",
        log.len(),
        elapsed,
        report.responded_turns,
        rank(50),
        rank(95),
        report.rollback_total,
        report.truncated_turns
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("resize arithmetic", resize),
        ("sampling rules", sampling),
        ("interleave round-trip", interleave),
        ("endpointing exactness", endpointing),
        ("speculative-switch latency identity", latency_identity),
        ("gating and rollback safety", gating_safety),
        ("offset invariant", offset_invariant),
        ("determinism", determinism),
        ("truncation", truncation),
        ("desk-scale run", benchmark),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{:.1?}]", n + 1, started.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", n + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
