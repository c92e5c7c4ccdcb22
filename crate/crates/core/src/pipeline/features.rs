//! Per-timestep feature sequences and their binary file format.
//!
//! Layout (little-endian): magic `MGFT`, `u16` version (1), `u32` timesteps,
//! `u32` width, `u16` fps, `u16` stride, then `timesteps × width` `f32`
//! values, row-major by timestep.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::windows::WindowSpec;

pub const MAGIC: [u8; 4] = *b"MGFT";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 2 + 2;

pub const DEFAULT_FPS: u16 = 10;
/// Frames per feature step of the encoder.
pub const DEFAULT_STRIDE: u16 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub steps: usize,
    pub width: usize,
    pub fps: u16,
    pub stride: u16,
    /// `steps × width`, row-major.
    pub data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, steps: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let seq = Self {
            video_id: video_id.into(),
            steps,
            width,
            fps: DEFAULT_FPS,
            stride: DEFAULT_STRIDE,
            data,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.width == 0 {
            return Err(Error::config("features", "T' and D_in must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("features.stride", "must be at least 1"));
        }
        if self.data.len() != self.steps * self.width {
            return Err(Error::BadTensor {
                shape: vec![self.steps, self.width],
                values: self.data.len(),
                expected: self.steps * self.width,
            });
        }
        if let Some(k) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "features of {} at timestep {}, channel {}",
                self.video_id,
                k / self.width,
                k % self.width
            )));
        }
        Ok(())
    }

    /// Frame count covered by the sequence.
    pub fn num_frames(&self) -> usize {
        self.steps * self.stride as usize
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    /// Features of a window as a `feature_len × width` tensor, zero-padded
    /// past the end of the sequence.
    pub fn window_tensor(&self, w: &WindowSpec) -> Tensor {
        let mut data = vec![0.0; w.feature_len * self.width];
        for t in 0..w.feature_len {
            let src = w.feature_start + t;
            if src >= self.steps {
                break;
            }
            for (dst, &v) in data[t * self.width..(t + 1) * self.width].iter_mut().zip(self.row(src)) {
                *dst = v as f64;
            }
        }
        Tensor::from_parts(vec![w.feature_len, self.width], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.steps as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        out.extend_from_slice(&self.stride.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(video_id: impl Into<String>, bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(Error::BadMagic { path: path.into(), found: bytes[..4].try_into().unwrap() });
            }
            return Err(Error::Truncated { path: path.into(), expected: HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { path: path.into(), found: magic });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::BadVersion { path: path.into(), version });
        }
        let steps = u32_at(6) as usize;
        let width = u32_at(10) as usize;
        let fps = u16_at(14);
        let stride = u16_at(16);
        if steps == 0 {
            return Err(Error::EmptyFeatureFile { path: path.into() });
        }
        if width == 0 || stride == 0 {
            return Err(Error::config("features", format!("{}: zero width or stride", path.display())));
        }
        let expected = HEADER_LEN + steps * width * 4;
        if bytes.len() != expected {
            return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() });
        }
        let mut data = Vec::with_capacity(steps * width);
        for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFiniteFeature { path: path.into(), timestep: k / width, channel: k % width });
            }
            data.push(v);
        }
        Ok(Self { video_id: video_id.into(), steps, width, fps, stride, data })
    }
}

/// Reads a feature file; the video id is the file stem.
pub fn ingest_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    FeatureSequence::from_bytes(id, &bytes, path)
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    seq.validate()?;
    fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}
