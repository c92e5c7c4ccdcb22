use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A detected or annotated instance on the global frame axis, half-open
/// `[start_frame, end_frame)`. Ground truth carries score 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionInstance {
    pub start_frame: f64,
    pub end_frame: f64,
    pub class_id: usize,
    pub score: f64,
}

impl ActionInstance {
    pub fn new(start_frame: f64, end_frame: f64, class_id: usize, score: f64) -> Self {
        Self { start_frame, end_frame, class_id, score }
    }

    pub fn ground_truth(start_frame: f64, end_frame: f64, class_id: usize) -> Self {
        Self::new(start_frame, end_frame, class_id, 1.0)
    }

    pub fn len(&self) -> f64 {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }

    /// Temporal intersection over union, in `[0, 1]`.
    pub fn tiou(&self, other: &ActionInstance) -> f64 {
        let inter = (self.end_frame.min(other.end_frame) - self.start_frame.max(other.start_frame)).max(0.0);
        let union = self.len() + other.len() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    start_frame: f64,
    end_frame: f64,
    class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoRecord {
    video_id: String,
    fps: u16,
    num_frames: usize,
    instances: Vec<InstanceRecord>,
}

/// Instances of one video plus its frame metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub fps: u16,
    pub num_frames: usize,
    pub instances: Vec<ActionInstance>,
}

impl VideoAnnotation {
    fn to_record(&self, with_scores: bool) -> VideoRecord {
        VideoRecord {
            video_id: self.video_id.clone(),
            fps: self.fps,
            num_frames: self.num_frames,
            instances: self
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    start_frame: i.start_frame,
                    end_frame: i.end_frame,
                    class_id: i.class_id,
                    score: with_scores.then_some(i.score),
                })
                .collect(),
        }
    }

    fn from_record(r: VideoRecord) -> Self {
        Self {
            video_id: r.video_id,
            fps: r.fps,
            num_frames: r.num_frames,
            instances: r
                .instances
                .into_iter()
                .map(|i| ActionInstance::new(i.start_frame, i.end_frame, i.class_id, i.score.unwrap_or(1.0)))
                .collect(),
        }
    }
}

fn write_videos(path: &Path, videos: &[VideoAnnotation], with_scores: bool) -> Result<()> {
    let records: Vec<VideoRecord> = videos.iter().map(|v| v.to_record(with_scores)).collect();
    let text = serde_json::to_string_pretty(&records).map_err(|source| Error::Json { path: path.into(), source })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Ground-truth file: no `score` keys.
pub fn write_annotations(path: &Path, videos: &[VideoAnnotation]) -> Result<()> {
    write_videos(path, videos, false)
}

/// Prediction file: every instance carries `score`.
pub fn write_predictions(path: &Path, videos: &[VideoAnnotation]) -> Result<()> {
    write_videos(path, videos, true)
}

/// Reads either file flavour; a missing `score` reads as 1.
pub fn read_annotations(path: &Path) -> Result<Vec<VideoAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<VideoRecord> =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
    Ok(records.into_iter().map(VideoAnnotation::from_record).collect())
}
