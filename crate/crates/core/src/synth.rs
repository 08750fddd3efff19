//! Synthetic traces: the fixed scenarios behind the golden files and a
//! seeded multi-turn generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::trace::{Trace, TracePacket};
use crate::vad::{AudioPacket, SpeechRun, VadConfig, DEFAULT_PACKET_MS};
use crate::vision::FrameSpec;

/// Half-open speech interval in ms. Spans passed around here are sorted and
/// disjoint.
pub type Span = (u64, u64);

/// Builds a trace of 1 s packets covering `[0, total_ms)` (rounded up to a
/// whole packet) with speech exactly on `speech`. `frame_offsets` gives the two
/// frame offsets within packet `i`.
pub fn trace_from_speech(
    speech: &[Span],
    total_ms: u64,
    (width, height): (u32, u32),
    mut frame_offsets: impl FnMut(usize) -> (u64, u64),
) -> Trace {
    let packets = total_ms.div_ceil(DEFAULT_PACKET_MS);
    let packets = (0..packets)
        .map(|i| {
            let start = i * DEFAULT_PACKET_MS;
            let end = start + DEFAULT_PACKET_MS;
            let mut marks = vec![(0, false)];
            for &(s, e) in speech {
                if e > start && s < end {
                    marks.push((s.max(start) - start, true));
                    if e < end {
                        marks.push((e - start, false));
                    }
                }
            }
            let mut runs: Vec<SpeechRun> = Vec::new();
            for (offset_ms, is_speech) in marks {
                if runs.last().is_some_and(|r| r.offset_ms == offset_ms) {
                    runs.pop();
                }
                if runs.last().map(|r| r.is_speech) != Some(is_speech) {
                    runs.push(SpeechRun { offset_ms, is_speech });
                }
            }
            let (a, b) = frame_offsets(i as usize);
            let frame = |off: u64| FrameSpec {
                width,
                height,
                timestamp_ms: start + off,
            };
            TracePacket {
                audio: AudioPacket::new(start, DEFAULT_PACKET_MS, runs).expect("runs tile the packet"),
                frames: vec![frame(a), frame(b)],
            }
        })
        .collect();
    Trace {
        packets,
        end_ms: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Speech 0-2000 ms, then silence.
    SingleTurn,
    /// Speech 0-2000 ms, a 400 ms pause, speech again until 3500 ms.
    Rollback,
    /// Speech 0-2000 ms; the user speaks again 1 s after the endpoint.
    BargeIn,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::SingleTurn, Scenario::Rollback, Scenario::BargeIn];

    pub fn name(self) -> &'static str {
        match self {
            Self::SingleTurn => "single_turn",
            Self::Rollback => "rollback",
            Self::BargeIn => "barge_in",
        }
    }

    pub fn trace(self) -> Trace {
        let (speech, total): (&[Span], u64) = match self {
            Self::SingleTurn => (&[(0, 2000)], 5000),
            Self::Rollback => (&[(0, 2000), (2400, 3500)], 7000),
            Self::BargeIn => (&[(0, 2000), (3650, 4500)], 8000),
        };
        let mut t = trace_from_speech(speech, total, (640, 480), |_| (0, 500));
        t.end_ms = Some(total);
        t
    }

    /// Script the scenario is meant to run with.
    pub fn script_text(self) -> &'static str {
        match self {
            Self::SingleTurn | Self::Rollback => "Hi there.\nAnything else?\n",
            Self::BargeIn => {
                "Sure, I can see a red bicycle by the door, and a cat asleep on the windowsill. Want more detail?\nOkay.\n"
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub turns: u32,
    pub seed: u64,
    /// Percent of turns with a pause long enough to trigger speculation and
    /// short enough to be cancelled.
    pub rollback_pct: u32,
    /// Percent of turns the user interrupts while the model is answering.
    pub barge_in_pct: u32,
    pub width: u32,
    pub height: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            turns: 100,
            seed: 0,
            rollback_pct: 20,
            barge_in_pct: 20,
            width: 640,
            height: 480,
        }
    }
}

/// Speech spans of a random multi-turn conversation. Pauses are chosen
/// relative to `vad` so each turn's intent (plain, rollback, barge-in) holds.
pub fn synth_speech(spec: &SynthSpec, vad: &VadConfig) -> (Vec<Span>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spec_ms = vad.speculative_silence_ms();
    let end_ms = vad.endpoint_silence_ms();
    let mut spans = Vec::new();
    let mut t = rng.gen_range(0..1500);
    for turn in 0..spec.turns {
        let len = rng.gen_range(600..3000);
        spans.push((t, t + len));
        t += len;
        if rng.gen_range(0..100) < spec.rollback_pct {
            t += rng.gen_range(spec_ms + 20..end_ms - 20);
            let len = rng.gen_range(300..1200);
            spans.push((t, t + len));
            t += len;
        }
        let last = turn + 1 == spec.turns;
        t += end_ms
            + if !last && rng.gen_range(0..100) < spec.barge_in_pct {
                rng.gen_range(150..1200)
            } else {
                rng.gen_range(3000..6000)
            };
    }
    (spans, t + 1000)
}

pub fn synth_trace(spec: &SynthSpec, vad: &VadConfig) -> Trace {
    let (speech, total) = synth_speech(spec, vad);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_f4a3);
    let mut t = trace_from_speech(&speech, total, (spec.width, spec.height), |_| {
        (rng.gen_range(0..500), rng.gen_range(500..1000))
    });
    t.end_ms = Some(t.duration_ms());
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::validate_trace;

    #[test]
    fn scenario_traces_validate() {
        for s in Scenario::ALL {
            let t = s.trace();
            assert_eq!(validate_trace(&t.to_records()).unwrap(), t, "{}", s.name());
        }
    }

    #[test]
    fn speech_spans_map_to_runs() {
        let t = trace_from_speech(&[(0, 2000), (2400, 3500)], 4000, (64, 64), |_| (0, 500));
        let runs: Vec<_> = t.packets.iter().flat_map(|p| p.audio.runs().collect::<Vec<_>>()).collect();
        assert_eq!(
            runs,
            vec![
                (0, 1000, true),
                (1000, 2000, true),
                (2000, 2400, false),
                (2400, 3000, true),
                (3000, 3500, true),
                (3500, 4000, false),
            ]
        );
    }

    #[test]
    fn synth_is_seeded() {
        let vad = VadConfig::default();
        let spec = SynthSpec {
            turns: 5,
            ..SynthSpec::default()
        };
        assert_eq!(synth_trace(&spec, &vad), synth_trace(&spec, &vad));
        let t = synth_trace(&spec, &vad);
        assert!(validate_trace(&t.to_records()).is_ok());
    }
}
