use std::collections::{HashMap, HashSet};

use super::log::{EventKind, EventLog};
use crate::sink::LOOKAHEAD_FRAMES;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalityViolation {
    pub seq: u64,
    pub kind: EventKind,
    pub message: String,
}

#[derive(Default)]
struct Attempt {
    max_step: Option<u64>,
    complete: bool,
    playable: HashSet<u64>,
    closed: bool,
}

#[derive(Default)]
struct TurnSeen {
    speech_end: Option<u64>,
    speculative: Option<u64>,
    cancelled: Option<u64>,
    endpoint: Option<u64>,
    barge_in: Option<u64>,
    rollback: Option<u64>,
    attempt: Option<Attempt>,
}

/// Checks that every event follows the events it depends on: each input
/// appears earlier in the log at a time no later than the event itself.
pub fn audit_causality(log: &EventLog) -> Vec<CausalityViolation> {
    let mut out = Vec::new();
    let mut arrivals: HashMap<u64, u64> = HashMap::new();
    let mut encoded: HashMap<(u64, Option<&str>), u64> = HashMap::new();
    let mut turns: HashMap<u32, TurnSeen> = HashMap::new();

    for e in log.iter() {
        let mut fail = |msg: String| {
            out.push(CausalityViolation {
                seq: e.seq,
                kind: e.kind,
                message: msg,
            })
        };
        let t = e.time_ms;
        use EventKind::*;
        let per_packet = matches!(
            e.kind,
            PacketArrival | EncodeDense | EncodeSparse | PrefillDense | PrefillSparse | ChunkDropped
        );
        let turn = e.turn.map(|k| turns.entry(k).or_default());
        if !per_packet && turn.is_none() {
            fail(format!("{} without a turn", e.kind));
            continue;
        }
        let need = |name: &str, at: Option<u64>, fail: &mut dyn FnMut(String)| match at {
            Some(a) if a <= t => {}
            Some(a) => fail(format!("{name} at {a} ms is after {t} ms")),
            None => fail(format!("no preceding {name}")),
        };
        match e.kind {
            PacketArrival => {
                arrivals.insert(e.index.unwrap_or_default(), t);
            }
            EncodeDense | EncodeSparse => {
                let p = e.index.unwrap_or_default();
                let last = if e.kind == EncodeSparse { p + 1 } else { p };
                need("packet arrival", arrivals.get(&last).copied(), &mut fail);
                encoded.insert((p, e.digest.as_deref()), t);
            }
            PrefillDense | PrefillSparse => {
                let key = (e.index.unwrap_or_default(), e.digest.as_deref());
                need("matching encode", encoded.get(&key).copied(), &mut fail);
            }
            ChunkDropped | SpeechStart => {}
            SpeechEnd => {
                if let Some(s) = turn {
                    s.speech_end = Some(t);
                }
            }
            Speculative | Endpoint => {
                let s = turn.expect("checked above");
                need("speech end", s.speech_end, &mut fail);
                if e.kind == Speculative {
                    s.speculative = Some(t);
                } else {
                    need("speculative point", s.speculative, &mut fail);
                    s.endpoint = Some(t);
                }
            }
            Cancelled => {
                let s = turn.expect("checked above");
                need("speculative point", s.speculative, &mut fail);
                s.cancelled = Some(t);
            }
            BargeIn => {
                let s = turn.expect("checked above");
                need("endpoint", s.endpoint, &mut fail);
                s.barge_in = Some(t);
                if let Some(a) = s.attempt.as_mut() {
                    a.closed = true;
                }
            }
            BeginDecode => {
                let s = turn.expect("checked above");
                need("speculative point", s.speculative, &mut fail);
                s.attempt = Some(Attempt::default());
            }
            DecodeStep | TurnComplete => {
                let s = turn.expect("checked above");
                match s.attempt.as_mut() {
                    Some(a) if !a.closed => {
                        if e.kind == DecodeStep {
                            a.max_step = e.index;
                        } else {
                            a.complete = true;
                        }
                    }
                    _ => fail("decoding outside an active decode".into()),
                }
            }
            Rollback => {
                let s = turn.expect("checked above");
                need("cancellation", s.cancelled, &mut fail);
                s.rollback = Some(t);
                s.attempt = None;
            }
            Discard => {
                let s = turn.expect("checked above");
                need("rollback", s.rollback, &mut fail);
            }
            Truncate | SinkStop => {
                let s = turn.expect("checked above");
                need("barge-in", s.barge_in, &mut fail);
            }
            FramePlayable => {
                let s = turn.expect("checked above");
                let j = e.index.unwrap_or_default();
                match s.attempt.as_mut() {
                    Some(a) if !a.closed => {
                        let enough = a.complete
                            || a.max_step.is_some_and(|k| k > j + LOOKAHEAD_FRAMES as u64);
                        if !enough {
                            fail(format!("frame {j} playable before its look-ahead was generated"));
                        }
                        a.playable.insert(j);
                    }
                    _ => fail("playable frame outside an active decode".into()),
                }
            }
            Deliver => {
                let s = turn.expect("checked above");
                need("endpoint", s.endpoint, &mut fail);
                let j = e.index.unwrap_or_default();
                let ok = s
                    .attempt
                    .as_ref()
                    .is_some_and(|a| !a.closed && a.playable.contains(&j));
                if !ok {
                    fail(format!("frame {j} delivered without being playable in the live decode"));
                }
            }
        }
    }
    out
}
