//! Data plumbing around the detector: feature files, annotations, synthetic
//! data, sliding windows and video-level merging.

pub mod annotations;
pub mod features;
pub mod merge;
pub mod synth;
pub mod windows;

pub use annotations::{read_annotations, write_annotations, write_predictions, ActionInstance, VideoAnnotation};
pub use features::{ingest_features, write_features, FeatureSequence};
pub use merge::{merge_predictions, nms, NMS_TIOU};
pub use synth::{synth_generate, SynthConfig};
pub use windows::{assign_labels, frames_to_grid, grid_to_frames, make_windows, WindowSpec};
