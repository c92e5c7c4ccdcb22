//! Training windows cut from feature sequences with their re-based targets.

use super::matching::Target;
use crate::error::Result;
use crate::numerics::Tensor;
use crate::pipeline::{assign_labels, frames_to_grid, make_windows, ActionInstance, FeatureSequence, VideoAnnotation, WindowSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub window: WindowSpec,
    /// `T' × D_in`.
    pub features: Tensor,
    pub targets: Vec<Target>,
}

/// Window-local frame instances as feature-step targets.
pub fn targets_from_instances(instances: &[ActionInstance], stride: usize) -> Vec<Target> {
    instances
        .iter()
        .map(|a| Target {
            start: frames_to_grid(a.start_frame, stride),
            end: frames_to_grid(a.end_frame, stride),
            class_id: a.class_id,
        })
        .collect()
}

/// Every window of every video, in video then window order. Windows without
/// targets are kept.
pub fn build_samples(videos: &[(FeatureSequence, VideoAnnotation)], beta: usize, overlap: f64) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (features, ann) in videos {
        let stride = features.stride as usize;
        for window in make_windows(&features.video_id, features.num_frames(), beta, overlap, stride)? {
            let local = assign_labels(&ann.instances, &window);
            out.push(TrainSample {
                features: features.window_tensor(&window),
                targets: targets_from_instances(&local, stride),
                window,
            });
        }
    }
    Ok(out)
}
