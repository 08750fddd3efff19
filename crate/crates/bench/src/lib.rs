//! Shared inputs for the benchmarks.

use omnistream_core::synth::{synth_trace, SynthSpec};
use omnistream_core::{SessionConfig, Trace};

/// The synthetic conversation used by the session benchmark.
pub fn conversation(turns: u32) -> (Trace, SessionConfig) {
    let cfg = SessionConfig::default();
    let spec = SynthSpec {
        turns,
        ..SynthSpec::default()
    };
    (synth_trace(&spec, &cfg.vad), cfg)
}
