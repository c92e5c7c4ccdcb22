//! Dataset directories: one feature file per video, a ground-truth file and a
//! manifest listing both.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qptad_core::pipeline::{ingest_features, read_annotations, write_annotations, write_features, FeatureSequence, SynthConfig, VideoAnnotation};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const FEATURES_DIR: &str = "features";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub video_id: String,
    /// Relative to the dataset directory.
    pub features: String,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub synth: SynthConfig,
    pub annotations: String,
    pub videos: Vec<VideoEntry>,
}

impl Manifest {
    /// Every file the dataset consists of, relative to its directory.
    pub fn files(&self) -> Vec<String> {
        let mut out = vec![MANIFEST_FILE.to_string(), self.annotations.clone()];
        out.extend(self.videos.iter().map(|v| v.features.clone()));
        out
    }
}

pub fn write_dataset(dir: &Path, seed: u64, synth: &SynthConfig, videos: &[(FeatureSequence, VideoAnnotation)]) -> Result<Manifest> {
    fs::create_dir_all(dir.join(FEATURES_DIR)).with_context(|| format!("creating {}", dir.display()))?;
    let mut entries = Vec::new();
    for (features, _) in videos {
        let rel = format!("{FEATURES_DIR}/{}.mgft", features.video_id);
        write_features(features, &dir.join(&rel))?;
        entries.push(VideoEntry { video_id: features.video_id.clone(), features: rel, num_frames: features.num_frames() });
    }
    let annotations: Vec<VideoAnnotation> = videos.iter().map(|(_, a)| a.clone()).collect();
    write_annotations(&dir.join(ANNOTATIONS_FILE), &annotations)?;
    let manifest = Manifest { seed, synth: synth.clone(), annotations: ANNOTATIONS_FILE.into(), videos: entries };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Features paired with their ground truth, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(FeatureSequence, VideoAnnotation)>> {
    let manifest = read_manifest(dir)?;
    let mut gts: HashMap<String, VideoAnnotation> =
        read_annotations(&dir.join(&manifest.annotations))?.into_iter().map(|a| (a.video_id.clone(), a)).collect();
    manifest
        .videos
        .iter()
        .map(|v| {
            let features = load_features(dir, v)?;
            let Some(ann) = gts.remove(&v.video_id) else {
                bail!("{}: no ground truth for video {}", manifest.annotations, v.video_id);
            };
            Ok((features, ann))
        })
        .collect()
}

/// Feature sequences only, in manifest order.
pub fn load_features_only(dir: &Path) -> Result<Vec<FeatureSequence>> {
    read_manifest(dir)?.videos.iter().map(|v| load_features(dir, v)).collect()
}

fn load_features(dir: &Path, v: &VideoEntry) -> Result<FeatureSequence> {
    let mut f = ingest_features(&dir.join(&v.features))?;
    f.video_id = v.video_id.clone();
    if f.num_frames() != v.num_frames {
        bail!("{}: {} frames on disk, manifest says {}", v.features, f.num_frames(), v.num_frames);
    }
    Ok(f)
}
