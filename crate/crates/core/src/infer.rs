//! Sliding-window inference: disjoint windows, last-layer decoding and
//! video-level merging.

use rayon::prelude::*;

use crate::decoder::{decode_instances, Decoder};
use crate::error::Result;
use crate::numerics::ParamStore;
use crate::pipeline::{make_windows, merge_predictions, ActionInstance, FeatureSequence, VideoAnnotation};

/// Window overlap used at inference.
pub const INFER_OVERLAP: f64 = 0.0;

/// Detections for one video on the global frame axis, after NMS. Windows
/// are decoded in parallel and merged in window order.
pub fn infer_video(decoder: &Decoder, store: &ParamStore, features: &FeatureSequence, beta: usize) -> Result<Vec<ActionInstance>> {
    let stride = features.stride as usize;
    let windows = make_windows(&features.video_id, features.num_frames(), beta, INFER_OVERLAP, stride)?;
    let per_window = windows
        .par_iter()
        .map(|w| {
            let preds = decoder.predict(store, &features.window_tensor(w))?;
            let last = preds.last().expect("decoder has at least one layer");
            Ok(decode_instances(last, w, stride, decoder.cfg.score_thresh))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_predictions(per_window))
}

pub fn infer_corpus(decoder: &Decoder, store: &ParamStore, videos: &[FeatureSequence], beta: usize) -> Result<Vec<VideoAnnotation>> {
    videos
        .iter()
        .map(|f| {
            Ok(VideoAnnotation {
                video_id: f.video_id.clone(),
                fps: f.fps,
                num_frames: f.num_frames(),
                instances: infer_video(decoder, store, f, beta)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::rng::stream;

    fn model() -> (Decoder, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { score_thresh: 0.0, ..DecoderConfig::tiny() };
        let dec = Decoder::new(&mut store, &cfg, &mut stream(2, 1)).unwrap();
        (dec, store)
    }

    #[test]
    fn detections_stay_inside_video_and_repeat_exactly() {
        let (dec, store) = model();
        let data: Vec<f32> = (0..50 * 5).map(|k| ((k * 37 % 11) as f32) * 0.1).collect();
        let f = FeatureSequence::new("v", 50, 5, data).unwrap();
        let a = infer_video(&dec, &store, &f, 64).unwrap();
        assert!(!a.is_empty());
        for d in &a {
            assert!(d.start_frame >= 0.0 && d.end_frame <= 200.0 && d.end_frame > d.start_frame);
        }
        assert_eq!(a, infer_video(&dec, &store, &f, 64).unwrap());
    }

    #[test]
    fn empty_corpus() {
        let (dec, store) = model();
        assert!(infer_corpus(&dec, &store, &[], 64).unwrap().is_empty());
    }
}
