//! Frame selection, native-resolution resize planning and visual-token
//! budgeting.
//!
//! Everything here is integer arithmetic over frame geometry and counts. No
//! pixel data is decoded or touched.

use std::cmp::Ordering;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// ViT patch edge in pixels.
pub const PATCH_SIZE: u32 = 14;
/// Both output dimensions must be multiples of this.
pub const DIM_ALIGN: u32 = 112;
/// Inclusive patch-count range a frame is fitted into.
pub const MIN_PATCHES: u64 = 576;
pub const MAX_PATCHES: u64 = 5832;
/// A 2x2 pixel-unshuffle merges four patches into one token.
pub const UNSHUFFLE_FACTOR: u64 = 4;

const PATCHES_PER_ALIGN: u64 = (DIM_ALIGN / PATCH_SIZE) as u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VisionError {
    #[error("video duration must be at least 1 ms")]
    ZeroDuration,
    #[error("invalid sampler config: {0}")]
    InvalidSamplerConfig(String),
    #[error("invalid token budget: {0}")]
    InvalidBudget(String),
}

/// Geometry and capture time of one video frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSpec {
    pub width: u32,
    pub height: u32,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResizeBranch {
    /// Each side rounded to the nearest multiple of 112 and the result was
    /// already inside the patch range.
    Minimal,
    /// The frame had to be rescaled into the patch range.
    Rescaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResizePlan {
    pub out_width: u32,
    pub out_height: u32,
    pub patch_rows: u32,
    pub patch_cols: u32,
    pub tokens_after_unshuffle: u64,
    pub branch: ResizeBranch,
}

impl ResizePlan {
    fn from_grid(cols_align: u32, rows_align: u32, branch: ResizeBranch) -> Self {
        let out_width = cols_align * DIM_ALIGN;
        let out_height = rows_align * DIM_ALIGN;
        let patch_cols = out_width / PATCH_SIZE;
        let patch_rows = out_height / PATCH_SIZE;
        Self {
            out_width,
            out_height,
            patch_rows,
            patch_cols,
            tokens_after_unshuffle: patch_rows as u64 * patch_cols as u64 / UNSHUFFLE_FACTOR,
            branch,
        }
    }

    pub fn patch_count(&self) -> u64 {
        self.patch_rows as u64 * self.patch_cols as u64
    }
}

fn round_to_align(dim: u32) -> u32 {
    // nearest multiple, ties round up
    (dim + DIM_ALIGN / 2) / DIM_ALIGN
}

fn patches_in_range(cols_align: u64, rows_align: u64) -> bool {
    let patches = cols_align * PATCHES_PER_ALIGN * rows_align * PATCHES_PER_ALIGN;
    (MIN_PATCHES..=MAX_PATCHES).contains(&patches)
}

/// `max(x, y) / min(x, y)` as an exact fraction; the symmetric distortion
/// between two positive quantities.
fn distortion(x: u128, y: u128) -> (u128, u128) {
    if x >= y {
        (x, y)
    } else {
        (y, x)
    }
}

fn cmp_frac(lhs: (u128, u128), rhs: (u128, u128)) -> Ordering {
    (lhs.0 * rhs.1).cmp(&(rhs.0 * lhs.1))
}

/// Plans the output geometry for a frame of `width x height` pixels.
///
/// If rounding both sides to the nearest multiple of 112 already lands in the
/// 576..=5832 patch range, that rounded size is used as-is. Otherwise every
/// 112-aligned grid inside the range is considered and the one with the
/// smallest aspect-ratio distortion wins; ties go to the grid whose area is
/// closest to the source area, then to the larger patch count, then to the
/// wider grid.
///
/// # Panics
///
/// If either dimension is zero.
pub fn plan_resize(width: u32, height: u32) -> ResizePlan {
    assert!(width >= 1 && height >= 1, "frame dimensions must be positive");

    let cols = round_to_align(width);
    let rows = round_to_align(height);
    if patches_in_range(cols as u64, rows as u64) {
        return ResizePlan::from_grid(cols, rows, ResizeBranch::Minimal);
    }

    let (w, h) = (width as u128, height as u128);
    let src_area = w * h;
    let align_area = (DIM_ALIGN as u128) * (DIM_ALIGN as u128);
    let max_cells = MAX_PATCHES / (PATCHES_PER_ALIGN * PATCHES_PER_ALIGN);

    let mut best: Option<(u32, u32)> = None;
    for a in 1..=max_cells as u32 {
        for b in 1..=(max_cells as u32 / a) {
            if !patches_in_range(a as u64, b as u64) {
                continue;
            }
            best = Some(match best {
                None => (a, b),
                Some((ba, bb)) => {
                    let aspect = cmp_frac(
                        distortion(a as u128 * h, b as u128 * w),
                        distortion(ba as u128 * h, bb as u128 * w),
                    );
                    let area = cmp_frac(
                        distortion(a as u128 * b as u128 * align_area, src_area),
                        distortion(ba as u128 * bb as u128 * align_area, src_area),
                    );
                    let key = aspect
                        .then(area)
                        .then((ba * bb).cmp(&(a * b)))
                        .then(ba.cmp(&a));
                    if key == Ordering::Less {
                        (a, b)
                    } else {
                        (ba, bb)
                    }
                }
            });
        }
    }
    let (a, b) = best.expect("patch range admits at least one aligned grid");
    ResizePlan::from_grid(a, b, ResizeBranch::Rescaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub default_fps: u32,
    pub min_frames: u32,
    pub max_frames: u32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            default_fps: 2,
            min_frames: 16,
            max_frames: 256,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), VisionError> {
        if self.default_fps == 0 {
            return Err(VisionError::InvalidSamplerConfig(
                "default_fps must be positive".into(),
            ));
        }
        if self.min_frames == 0 {
            return Err(VisionError::InvalidSamplerConfig(
                "min_frames must be positive".into(),
            ));
        }
        if self.max_frames < self.min_frames {
            return Err(VisionError::InvalidSamplerConfig(format!(
                "max_frames ({}) must be >= min_frames ({})",
                self.max_frames, self.min_frames
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingRegime {
    DefaultRate,
    MinFrames,
    Capped,
}

/// Selected frame times for one video.
///
/// Times are in microseconds so that the minimum-frame rule can place
/// distinct frames even in videos only a few milliseconds long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPlan {
    pub frame_times_us: Vec<u64>,
    pub effective_fps: Ratio<u64>,
    pub capped: bool,
    pub regime: SamplingRegime,
}

impl SamplingPlan {
    pub fn frame_count(&self) -> usize {
        self.frame_times_us.len()
    }

    /// Frame times rounded down to whole milliseconds.
    pub fn frame_times_ms(&self) -> Vec<u64> {
        self.frame_times_us.iter().map(|t| t / 1000).collect()
    }
}

fn uniform_times(duration_us: u64, count: u64) -> Vec<u64> {
    (0..count)
        .map(|k| ((k as u128 * duration_us as u128) / count as u128) as u64)
        .collect()
}

/// Chooses which frames of a `duration_ms` video to feed the encoder.
///
/// Frames exist at `k / default_fps` seconds for every such time strictly
/// inside the video. That set is used unless it is smaller than `min_frames`
/// (rate raised to hit exactly `min_frames`) or larger than `max_frames`
/// (exactly `max_frames` spread uniformly).
pub fn plan_sampling(duration_ms: u64, config: &SamplerConfig) -> Result<SamplingPlan, VisionError> {
    if duration_ms == 0 {
        return Err(VisionError::ZeroDuration);
    }
    config.validate()?;

    let fps = config.default_fps as u64;
    let duration_us = duration_ms * 1000;
    let at_default = (duration_ms * fps).div_ceil(1000);

    let plan = if at_default < config.min_frames as u64 {
        let n = config.min_frames as u64;
        SamplingPlan {
            frame_times_us: uniform_times(duration_us, n),
            effective_fps: Ratio::new(n * 1000, duration_ms),
            capped: false,
            regime: SamplingRegime::MinFrames,
        }
    } else if at_default > config.max_frames as u64 {
        let n = config.max_frames as u64;
        SamplingPlan {
            frame_times_us: uniform_times(duration_us, n),
            effective_fps: Ratio::new(n * 1000, duration_ms),
            capped: true,
            regime: SamplingRegime::Capped,
        }
    } else {
        SamplingPlan {
            frame_times_us: (0..at_default).map(|k| k * 1_000_000 / fps).collect(),
            effective_fps: Ratio::from_integer(fps),
            capped: false,
            regime: SamplingRegime::DefaultRate,
        }
    };
    Ok(plan)
}

/// Number of temporal groups left after a stride-2 temporal convolution.
/// An odd trailing frame is paired with a copy of itself.
pub fn compress_temporal(frame_count: usize) -> usize {
    frame_count.div_ceil(2)
}

/// The frame-index pairs each temporal group is built from.
pub fn temporal_groups(frame_count: usize) -> Vec<(usize, usize)> {
    (0..compress_temporal(frame_count))
        .map(|g| (2 * g, (2 * g + 1).min(frame_count - 1)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenBudget {
    pub per_frame_limit: u64,
    pub sequence_limit: u64,
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            per_frame_limit: MAX_PATCHES / UNSHUFFLE_FACTOR,
            sequence_limit: 16384,
        }
    }
}

impl TokenBudget {
    pub fn new(per_frame_limit: u64, sequence_limit: u64) -> Result<Self, VisionError> {
        let budget = Self {
            per_frame_limit,
            sequence_limit,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn validate(&self) -> Result<(), VisionError> {
        if self.per_frame_limit == 0 || self.sequence_limit == 0 {
            return Err(VisionError::InvalidBudget("limits must be positive".into()));
        }
        if self.sequence_limit < self.per_frame_limit {
            return Err(VisionError::InvalidBudget(format!(
                "sequence_limit ({}) is below per_frame_limit ({})",
                self.sequence_limit, self.per_frame_limit
            )));
        }
        Ok(())
    }
}

/// Token count after interpolative downsampling against the sequence limit.
pub fn downsample_tokens(token_count: u64, budget: &TokenBudget) -> u64 {
    token_count.min(budget.sequence_limit)
}

/// Indices kept when squeezing `token_count` tokens into `limit` slots:
/// nearest-index selection spread uniformly over `[0, token_count)`.
pub fn downsample_indices(token_count: usize, limit: usize) -> Vec<usize> {
    if token_count <= limit {
        return (0..token_count).collect();
    }
    (0..limit)
        .map(|i| ((i as u128 * token_count as u128) / limit as u128) as usize)
        .collect()
}

/// Visual tokens a single frame contributes once resized, unshuffled and
/// capped by the per-frame limit.
pub fn frame_token_count(width: u32, height: u32, budget: &TokenBudget) -> u64 {
    plan_resize(width, height)
        .tokens_after_unshuffle
        .min(budget.per_frame_limit)
}
