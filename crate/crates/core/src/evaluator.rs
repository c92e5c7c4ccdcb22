//! Detection metric: greedy tIoU matching, precision, recall and F1 pooled
//! across videos.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{read_annotations, ActionInstance, VideoAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "defaults::tiou_threshold")]
    pub tiou_threshold: f64,
    #[serde(default = "defaults::require_class_match")]
    pub require_class_match: bool,
    /// Multiplier applied to precision, recall and F1 in reports.
    #[serde(default = "defaults::report_scale")]
    pub report_scale: f64,
}

mod defaults {
    pub fn tiou_threshold() -> f64 {
        0.5
    }
    pub fn require_class_match() -> bool {
        true
    }
    pub fn report_scale() -> f64 {
        100.0
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tiou_threshold: defaults::tiou_threshold(),
            require_class_match: defaults::require_class_match(),
            report_scale: defaults::report_scale(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tiou_threshold > 0.0 && self.tiou_threshold <= 1.0) {
            return Err(Error::config("eval.tiou_threshold", format!("must lie in (0, 1], got {}", self.tiou_threshold)));
        }
        if !(self.report_scale > 0.0 && self.report_scale <= 100.0) {
            return Err(Error::config("eval.report_scale", format!("must lie in (0, 100], got {}", self.report_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

/// `2PR / (P + R)`, and 0 when `P + R = 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn tiou(a: &ActionInstance, b: &ActionInstance) -> f64 {
    a.tiou(b)
}

/// Result of matching one video: pooled counts and counts per class
/// (predictions by their class, misses by the ground-truth class).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matching {
    pub counts: Counts,
    pub per_class: BTreeMap<usize, Counts>,
    /// `(prediction, ground truth)` index pairs of true positives.
    pub pairs: Vec<(usize, usize)>,
}

/// Predictions in descending score order each take the unconsumed ground
/// truth with the highest tIoU that clears the threshold (and shares the
/// class when required); the rest are false positives. Unconsumed ground
/// truth are false negatives.
pub fn match_detections(preds: &[ActionInstance], gts: &[ActionInstance], cfg: &EvalConfig) -> Matching {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| crate::pipeline::merge::by_score_desc(&preds[a], &preds[b]).then(a.cmp(&b)));
    let mut consumed = vec![false; gts.len()];
    let mut m = Matching::default();
    for pi in order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if consumed[gi] || (cfg.require_class_match && g.class_id != p.class_id) {
                continue;
            }
            let iou = p.tiou(g);
            if iou >= cfg.tiou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                consumed[gi] = true;
                m.counts.tp += 1;
                m.per_class.entry(gts[gi].class_id).or_default().tp += 1;
                m.pairs.push((pi, gi));
            }
            None => {
                m.counts.fp += 1;
                m.per_class.entry(p.class_id).or_default().fp += 1;
            }
        }
    }
    for (gi, g) in gts.iter().enumerate() {
        if !consumed[gi] {
            m.counts.fn_ += 1;
            m.per_class.entry(g.class_id).or_default().fn_ += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pooled (micro-averaged) counts and scores; precision, recall and F1 are
/// multiplied by `report_scale`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean of per-class F1 over classes present in predictions or ground truth.
    pub macro_f1: f64,
    /// Mean of per-video F1.
    pub video_mean_f1: f64,
    pub num_videos: usize,
    pub tiou_threshold: f64,
    pub per_class: BTreeMap<String, ClassReport>,
}

fn class_report(c: Counts, scale: f64) -> ClassReport {
    ClassReport {
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        precision: c.precision() * scale,
        recall: c.recall() * scale,
        f1: c.f1() * scale,
    }
}

/// Evaluates predictions against ground truth over the same set of videos.
pub fn evaluate_corpus(preds: &[VideoAnnotation], gts: &[VideoAnnotation], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let index = |videos: &[VideoAnnotation], what: &str| -> Result<HashMap<String, usize>> {
        let mut map = HashMap::new();
        for (i, v) in videos.iter().enumerate() {
            if map.insert(v.video_id.clone(), i).is_some() {
                return Err(Error::config("video_id", format!("duplicate id {:?} in {what}", v.video_id)));
            }
        }
        Ok(map)
    };
    let pred_ids = index(preds, "predictions")?;
    let gt_ids = index(gts, "ground truth")?;
    let pk: BTreeSet<&String> = pred_ids.keys().collect();
    let gk: BTreeSet<&String> = gt_ids.keys().collect();
    if pk != gk {
        return Err(Error::VideoMismatch {
            only_preds: pk.difference(&gk).map(|s| s.to_string()).collect(),
            only_gts: gk.difference(&pk).map(|s| s.to_string()).collect(),
        });
    }
    let per_video: Vec<Matching> = gts
        .par_iter()
        .map(|g| match_detections(&preds[pred_ids[&g.video_id]].instances, &g.instances, cfg))
        .collect();

    let mut total = Counts::default();
    let mut per_class: BTreeMap<usize, Counts> = BTreeMap::new();
    for m in &per_video {
        total += m.counts;
        for (&k, &c) in &m.per_class {
            *per_class.entry(k).or_default() += c;
        }
    }
    let scale = cfg.report_scale;
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(Counts::f1).sum::<f64>() / per_class.len() as f64
    };
    let video_mean_f1 = if per_video.is_empty() {
        0.0
    } else {
        per_video.iter().map(|m| m.counts.f1()).sum::<f64>() / per_video.len() as f64
    };
    Ok(EvalReport {
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision: total.precision() * scale,
        recall: total.recall() * scale,
        f1: total.f1() * scale,
        macro_f1: macro_f1 * scale,
        video_mean_f1: video_mean_f1 * scale,
        num_videos: gts.len(),
        tiou_threshold: cfg.tiou_threshold,
        per_class: per_class.into_iter().map(|(k, c)| (k.to_string(), class_report(c, scale))).collect(),
    })
}

/// Reads prediction and annotation files and evaluates them.
pub fn evaluate_files(pred_path: &Path, gt_path: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate_corpus(&read_annotations(pred_path)?, &read_annotations(gt_path)?, cfg)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}
