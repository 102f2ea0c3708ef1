//! Video records and the JSON manifest that describes a dataset on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file;
use super::vocab::{detokenize, tokenize};
use crate::autograd::Mat;
use crate::error::{DvcError, Result};

/// Event boundaries in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeStamp {
    pub start: f64,
    pub end: f64,
}

impl TimeStamp {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthEvent {
    pub timestamp: TimeStamp,
    pub caption: Vec<String>,
    pub labels: BTreeSet<usize>,
}

/// One video: per-modality frame features plus annotated events.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub duration: f64,
    /// Modality names, in the fixed order used for fusion.
    pub modality_names: Vec<String>,
    /// One `T_raw × d_m` matrix per modality.
    pub modality_features: Vec<Mat>,
    pub events: Vec<GroundTruthEvent>,
}

impl VideoRecord {
    pub fn new(
        id: String,
        duration: f64,
        modality_names: Vec<String>,
        modality_features: Vec<Mat>,
        mut events: Vec<GroundTruthEvent>,
    ) -> Self {
        sort_events(&mut events);
        Self { id, duration, modality_names, modality_features, events }
    }

    pub fn frame_count(&self) -> usize {
        self.modality_features.first().map(|m| m.nrows()).unwrap_or(0)
    }

    /// Frames per second implied by frame count and duration.
    pub fn fps(&self) -> f64 {
        self.frame_count() as f64 / self.duration
    }

    pub fn validate(&self, label_space: usize) -> Result<()> {
        let id = &self.id;
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(DvcError::Validation(format!("video {id}: duration must be positive")));
        }
        if self.modality_features.is_empty() {
            return Err(DvcError::Validation(format!("video {id}: no modalities")));
        }
        let counts: Vec<usize> = self.modality_features.iter().map(|m| m.nrows()).collect();
        if counts.iter().any(|&c| c != counts[0]) {
            return Err(DvcError::Validation(format!("video {id}: modality frame counts differ {counts:?}")));
        }
        if counts[0] == 0 {
            return Err(DvcError::Validation(format!("video {id}: zero frames")));
        }
        if let Some(m) = self.modality_features.iter().position(|m| m.ncols() == 0) {
            return Err(DvcError::Validation(format!("video {id}: modality {m} has zero feature dimension")));
        }
        for (i, ev) in self.events.iter().enumerate() {
            let ts = ev.timestamp;
            if ts.start > ts.end {
                return Err(DvcError::Validation(format!("video {id} event {i}: start {} > end {}", ts.start, ts.end)));
            }
            if ts.start < 0.0 || ts.end > self.duration {
                return Err(DvcError::Validation(format!(
                    "video {id} event {i}: [{}, {}] outside [0, {}]",
                    ts.start, ts.end, self.duration
                )));
            }
            if ev.caption.is_empty() {
                return Err(DvcError::Validation(format!("video {id} event {i}: empty caption")));
            }
            if let Some(&l) = ev.labels.iter().find(|&&l| l >= label_space) {
                return Err(DvcError::Validation(format!(
                    "video {id} event {i}: label {l} outside label space {label_space}"
                )));
            }
        }
        Ok(())
    }
}

fn sort_events(events: &mut [GroundTruthEvent]) {
    events.sort_by(|a, b| {
        a.timestamp.start.total_cmp(&b.timestamp.start).then(a.timestamp.end.total_cmp(&b.timestamp.end))
    });
}

/// One manifest entry, as stored in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub duration: f64,
    pub timestamps: Vec<[f64; 2]>,
    pub sentences: Vec<String>,
    #[serde(default)]
    pub labels: Vec<Vec<usize>>,
    pub features: BTreeMap<String, PathBuf>,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Load and validate every video in a manifest. Feature paths are resolved
/// relative to the manifest's directory. Videos come back ordered by id.
pub fn load_dataset(manifest_path: &Path, label_space: usize) -> Result<Vec<VideoRecord>> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.into_iter().map(|(id, entry)| load_entry(base, id, entry, label_space)).collect()
}

fn load_entry(base: &Path, id: String, entry: ManifestEntry, label_space: usize) -> Result<VideoRecord> {
    let n = entry.timestamps.len();
    if entry.sentences.len() != n || (!entry.labels.is_empty() && entry.labels.len() != n) {
        return Err(DvcError::Validation(format!(
            "video {id}: {} timestamps, {} sentences, {} label sets",
            n,
            entry.sentences.len(),
            entry.labels.len()
        )));
    }
    if entry.features.is_empty() {
        return Err(DvcError::Validation(format!("video {id}: no feature files")));
    }
    let mut names = Vec::new();
    let mut features = Vec::new();
    for (name, rel) in &entry.features {
        let path = base.join(rel);
        if !path.is_file() {
            return Err(DvcError::MissingFeature { video: id.clone(), path });
        }
        names.push(name.clone());
        features.push(tensor_file::read_tensor(&path)?);
    }
    let events = (0..n)
        .map(|i| GroundTruthEvent {
            timestamp: TimeStamp::new(entry.timestamps[i][0], entry.timestamps[i][1]),
            caption: tokenize(&entry.sentences[i]),
            labels: entry.labels.get(i).map(|l| l.iter().copied().collect()).unwrap_or_default(),
        })
        .collect::<Vec<_>>();
    // Validate in manifest order so error indices match the file.
    let unsorted = VideoRecord {
        id: id.clone(),
        duration: entry.duration,
        modality_names: names.clone(),
        modality_features: features.clone(),
        events: events.clone(),
    };
    unsorted.validate(label_space)?;
    Ok(VideoRecord::new(id, entry.duration, names, features, events))
}

/// Write records as `manifest.json` plus `features/<id>.<modality>.dvct`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, records: &[VideoRecord]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let mut manifest = Manifest::new();
    for rec in records {
        let mut features = BTreeMap::new();
        for (name, m) in rec.modality_names.iter().zip(&rec.modality_features) {
            let rel = PathBuf::from("features").join(format!("{}.{}.dvct", rec.id, name));
            tensor_file::write_tensor(&dir.join(&rel), m)?;
            features.insert(name.clone(), rel);
        }
        manifest.insert(
            rec.id.clone(),
            ManifestEntry {
                duration: rec.duration,
                timestamps: rec.events.iter().map(|e| [e.timestamp.start, e.timestamp.end]).collect(),
                sentences: rec.events.iter().map(|e| detokenize(&e.caption)).collect(),
                labels: rec.events.iter().map(|e| e.labels.iter().copied().collect()).collect(),
                features,
            },
        );
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
