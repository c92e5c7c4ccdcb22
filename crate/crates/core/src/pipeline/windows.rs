//! Sliding windows over a video and the frame/feature-grid coordinate maps.

use crate::error::{Error, Result};

use super::annotations::ActionInstance;

/// A fixed-length chunk of a video. Frames past `valid_frames` are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpec {
    pub video_id: String,
    pub start_frame: usize,
    /// Window length β in frames.
    pub length: usize,
    /// Frames of real video inside the window (`< length` only when padded).
    pub valid_frames: usize,
    pub feature_start: usize,
    pub feature_len: usize,
}

impl WindowSpec {
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.length
    }

    pub fn to_local(&self, global_frame: f64) -> f64 {
        global_frame - self.start_frame as f64
    }

    pub fn to_global(&self, local_frame: f64) -> f64 {
        local_frame + self.start_frame as f64
    }
}

pub fn frames_to_grid(frame: f64, stride: usize) -> f64 {
    frame / stride as f64
}

pub fn grid_to_frames(grid: f64, stride: usize) -> f64 {
    grid * stride as f64
}

/// Fraction of a window's span that is an overlap with its successor.
pub fn validate_overlap(overlap: f64) -> Result<()> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::config("overlap", format!("must lie in [0, 1), got {overlap}")));
    }
    Ok(())
}

pub fn validate_beta(beta: usize, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::config("stride", "must be at least 1"));
    }
    if beta < stride || beta % stride != 0 {
        return Err(Error::config("beta", format!("{beta} must be a positive multiple of the feature stride {stride}")));
    }
    Ok(())
}

/// Windows of `beta` frames starting at 0 and advancing by `beta·(1−overlap)`
/// (rounded to the feature stride). The last window ends exactly at
/// `t_frames`; a video shorter than `beta` gets one zero-padded window.
pub fn make_windows(video_id: &str, t_frames: usize, beta: usize, overlap: f64, stride: usize) -> Result<Vec<WindowSpec>> {
    validate_beta(beta, stride)?;
    validate_overlap(overlap)?;
    if t_frames == 0 {
        return Ok(Vec::new());
    }
    let advance = ((beta as f64 * (1.0 - overlap) / stride as f64).round() as usize).max(1) * stride;
    let window = |start: usize| WindowSpec {
        video_id: video_id.to_string(),
        start_frame: start,
        length: beta,
        valid_frames: beta.min(t_frames - start),
        feature_start: start / stride,
        feature_len: beta / stride,
    };
    if t_frames <= beta {
        return Ok(vec![window(0)]);
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + beta < t_frames {
        out.push(window(start));
        start += advance;
    }
    let last = (t_frames - beta).div_ceil(stride) * stride;
    if out.last().map(|w| w.start_frame) != Some(last) {
        out.push(window(last));
    }
    Ok(out)
}

/// Window-local ground truth: an instance is kept when its overlap with the
/// window's real frames covers at least half of the instance or at least
/// three quarters of the window; kept instances are clipped and re-based.
pub fn assign_labels(annotations: &[ActionInstance], w: &WindowSpec) -> Vec<ActionInstance> {
    let lo = w.start_frame as f64;
    let hi = (w.start_frame + w.valid_frames) as f64;
    annotations
        .iter()
        .filter_map(|a| {
            let s = a.start_frame.max(lo);
            let e = a.end_frame.min(hi);
            let overlap = e - s;
            if overlap <= 0.0 {
                return None;
            }
            let keep = overlap >= 0.5 * a.len() || overlap >= 0.75 * w.length as f64;
            keep.then(|| ActionInstance::new(w.to_local(s), w.to_local(e), a.class_id, a.score))
        })
        .collect()
}
