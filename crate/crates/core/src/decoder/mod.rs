//! The stacked action decoder and its stage operations.

pub mod config;
pub mod extract;
pub mod heads;
pub mod mix;
pub mod model;
pub mod points;

pub use config::DecoderConfig;
pub use extract::{deform_sample, deform_sample_values, PointExtractor, NUM_OFFSETS};
pub use heads::{decode_instances, ClassHead, RawPrediction, CLASS_PRIOR};
pub use mix::InstanceMixer;
pub use model::{Decoder, DecoderLayer, LayerOutput, QueryState};
pub use points::{init_points, point_bounds, refine_points, refine_points_tape, PointFfn, MIN_SPAN};
