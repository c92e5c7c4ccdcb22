//! Synthetic feature sequences with exact annotations.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, streams};

use super::annotations::{ActionInstance, VideoAnnotation};
use super::features::{FeatureSequence, DEFAULT_FPS, DEFAULT_STRIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "SynthConfig::num_videos")]
    pub num_videos: usize,
    #[serde(default = "SynthConfig::num_classes")]
    pub num_classes: usize,
    #[serde(rename = "D_in", default = "SynthConfig::d_in")]
    pub d_in: usize,
    #[serde(default = "SynthConfig::noise_level")]
    pub noise_level: f64,
    /// Frames per video; rounded up to the feature stride.
    #[serde(default = "SynthConfig::num_frames")]
    pub num_frames: usize,
    /// Instance length in feature steps: `min_len + Exp(mean_extra_len)`,
    /// capped at `max_len`.
    #[serde(default = "SynthConfig::min_len")]
    pub min_len: usize,
    #[serde(default = "SynthConfig::max_len")]
    pub max_len: usize,
    #[serde(default = "SynthConfig::mean_extra_len")]
    pub mean_extra_len: f64,
    /// When set, no instance crosses a multiple of this many frames.
    #[serde(default = "SynthConfig::segment_frames")]
    pub segment_frames: Option<usize>,
}

impl SynthConfig {
    fn num_videos() -> usize {
        4
    }
    fn num_classes() -> usize {
        17
    }
    fn d_in() -> usize {
        32
    }
    fn noise_level() -> f64 {
        0.1
    }
    fn num_frames() -> usize {
        640
    }
    fn min_len() -> usize {
        2
    }
    fn max_len() -> usize {
        80
    }
    fn mean_extra_len() -> f64 {
        4.0
    }
    fn segment_frames() -> Option<usize> {
        Some(128)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be at least 1"));
        }
        if self.num_classes > self.d_in {
            return Err(Error::config(
                "num_classes",
                format!("K = {} exceeds D_in = {}", self.num_classes, self.d_in),
            ));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::config("noise_level", "must be finite and non-negative"));
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::config("max_len", "need 1 <= min_len <= max_len"));
        }
        if !(self.mean_extra_len > 0.0) || !self.mean_extra_len.is_finite() {
            return Err(Error::config("mean_extra_len", "must be positive"));
        }
        if self.num_frames < DEFAULT_STRIDE as usize {
            return Err(Error::config("num_frames", "shorter than one feature step"));
        }
        if let Some(s) = self.segment_frames {
            if s % DEFAULT_STRIDE as usize != 0 || s / (DEFAULT_STRIDE as usize) < self.min_len {
                return Err(Error::config(
                    "segment_frames",
                    "must be a multiple of the stride holding at least min_len steps",
                ));
            }
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: Self::num_videos(),
            num_classes: Self::num_classes(),
            d_in: Self::d_in(),
            noise_level: Self::noise_level(),
            num_frames: Self::num_frames(),
            min_len: Self::min_len(),
            max_len: Self::max_len(),
            mean_extra_len: Self::mean_extra_len(),
            segment_frames: Self::segment_frames(),
        }
    }
}

/// Class template value at relative position `x ∈ [0, 1)` of an instance.
/// Every profile stays at or above 0.5 so both boundaries are visible.
pub fn class_profile(class_id: usize, x: f64) -> f64 {
    match class_id % 3 {
        0 => 1.0,
        1 => 0.5 + 0.5 * x,
        _ => 0.5 + 0.5 * (std::f64::consts::PI * x).sin(),
    }
}

fn gen_video<R: Rng>(cfg: &SynthConfig, id: String, rng: &mut R) -> (FeatureSequence, VideoAnnotation) {
    let stride = DEFAULT_STRIDE as usize;
    let steps = cfg.num_frames.div_ceil(stride);
    let segment = cfg.segment_frames.map_or(steps, |s| s / stride);
    let max_len = cfg.max_len.min(segment);
    let extra = Exp::new(1.0 / cfg.mean_extra_len).expect("validated rate");

    let mut spans = Vec::new();
    let mut cursor = rng.random_range(1..=6usize);
    loop {
        let len = (cfg.min_len + extra.sample(rng).floor() as usize).min(max_len);
        let class_id = rng.random_range(0..cfg.num_classes);
        let seg_end = (cursor / segment + 1) * segment;
        if cursor + len > seg_end {
            cursor = seg_end + rng.random_range(0..=2usize);
        }
        if cursor + len > steps {
            break;
        }
        spans.push((cursor, cursor + len, class_id));
        cursor += len + rng.random_range(2..=10usize);
    }

    let mut data = vec![0.0f32; steps * cfg.d_in];
    for &(s, e, c) in &spans {
        let len = (e - s) as f64;
        for t in s..e {
            data[t * cfg.d_in + c] += class_profile(c, (t - s) as f64 / len) as f32;
        }
    }
    if cfg.noise_level > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_level).expect("validated std");
        for v in &mut data {
            *v += noise.sample(rng) as f32;
        }
    }

    let seq = FeatureSequence {
        video_id: id.clone(),
        steps,
        width: cfg.d_in,
        fps: DEFAULT_FPS,
        stride: DEFAULT_STRIDE,
        data,
    };
    let ann = VideoAnnotation {
        video_id: id,
        fps: DEFAULT_FPS,
        num_frames: steps * stride,
        instances: spans
            .iter()
            .map(|&(s, e, c)| ActionInstance::ground_truth((s * stride) as f64, (e * stride) as f64, c))
            .collect(),
    };
    (seq, ann)
}

/// Deterministic per `seed`. Video ids are `synth_000`, `synth_001`, ...
pub fn synth_generate(seed: u64, cfg: &SynthConfig) -> Result<Vec<(FeatureSequence, VideoAnnotation)>> {
    cfg.validate()?;
    let mut rng = stream(seed, streams::DATA);
    Ok((0..cfg.num_videos)
        .map(|i| gen_video(cfg, format!("synth_{i:03}"), &mut rng))
        .collect())
}
