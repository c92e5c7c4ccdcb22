use super::annotations::ActionInstance;

pub const NMS_TIOU: f64 = 0.5;

/// Descending score, then ascending start and class for a stable order.
pub(crate) fn by_score_desc(a: &ActionInstance, b: &ActionInstance) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_frame.total_cmp(&b.start_frame))
        .then(a.class_id.cmp(&b.class_id))
        .then(a.end_frame.total_cmp(&b.end_frame))
}

/// Per-class greedy NMS: an instance survives unless a kept instance of the
/// same class overlaps it with tIoU above `threshold`.
pub fn nms(mut instances: Vec<ActionInstance>, threshold: f64) -> Vec<ActionInstance> {
    instances.sort_by(by_score_desc);
    let mut kept: Vec<ActionInstance> = Vec::with_capacity(instances.len());
    for inst in instances {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == inst.class_id && k.tiou(&inst) > threshold);
        if !suppressed {
            kept.push(inst);
        }
    }
    kept
}

/// Concatenates per-window detections (global frames) and applies NMS.
pub fn merge_predictions(per_window: Vec<Vec<ActionInstance>>) -> Vec<ActionInstance> {
    nms(per_window.into_iter().flatten().collect(), NMS_TIOU)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_kept() {
        let a = ActionInstance::new(0.0, 10.0, 0, 0.5);
        let b = ActionInstance::new(20.0, 30.0, 0, 0.9);
        assert_eq!(merge_predictions(vec![vec![a], vec![b]]), vec![b, a]);
    }

    #[test]
    fn overlapping_same_class_suppressed() {
        // tIoU 0.9: [0, 100) vs [0, 90)
        let a = ActionInstance::new(0.0, 100.0, 3, 0.8);
        let b = ActionInstance::new(0.0, 90.0, 3, 0.6);
        assert!((a.tiou(&b) - 0.9).abs() < 1e-12);
        assert_eq!(merge_predictions(vec![vec![b, a]]), vec![a]);
    }

    #[test]
    fn different_classes_both_kept() {
        let a = ActionInstance::new(0.0, 10.0, 0, 0.8);
        let b = ActionInstance::new(0.0, 10.0, 1, 0.7);
        assert_eq!(merge_predictions(vec![vec![a, b]]).len(), 2);
    }
}
