use serde::{Deserialize, Serialize};

/// Per-stage costs in microseconds. Every job's duration is rounded up to
/// whole milliseconds when it is placed on the virtual clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeModel {
    pub encode_cost_per_frame_us: u64,
    pub encode_cost_per_audio_second_us: u64,
    pub prefill_cost_per_token_us: u64,
    pub decode_step_us: u64,
    pub audio_decode_cost_per_frame_us: u64,
    /// Charged once on the first frame of every response.
    pub audio_startup_us: u64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self {
            encode_cost_per_frame_us: 20_000,
            encode_cost_per_audio_second_us: 10_000,
            prefill_cost_per_token_us: 40,
            decode_step_us: 30_000,
            audio_decode_cost_per_frame_us: 5_000,
            audio_startup_us: 0,
        }
    }
}

pub fn us_to_ms_ceil(us: u64) -> u64 {
    us.div_ceil(1000)
}

impl ComputeModel {
    pub fn encode_ms(&self, frames: u64, audio_ms: u64) -> u64 {
        let audio_us = (audio_ms * self.encode_cost_per_audio_second_us).div_ceil(1000);
        us_to_ms_ceil(frames * self.encode_cost_per_frame_us + audio_us)
    }

    pub fn prefill_ms(&self, tokens: u64) -> u64 {
        us_to_ms_ceil(tokens * self.prefill_cost_per_token_us)
    }

    pub fn decode_step_ms(&self) -> u64 {
        us_to_ms_ceil(self.decode_step_us)
    }

    pub fn audio_decode_ms(&self, first_of_response: bool) -> u64 {
        let startup = if first_of_response { self.audio_startup_us } else { 0 };
        us_to_ms_ceil(self.audio_decode_cost_per_frame_us + startup)
    }
}
