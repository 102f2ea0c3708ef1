//! Concept vocabulary, frame-level concept targets and the frame-level
//! concept detector.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::nn::Mlp;
use crate::autograd::{sigmoid, Adam, Graph, Mat, ParamStore};
use crate::data::{PosLexicon, PosTag, VideoRecord};
use crate::error::{DvcError, Result};

/// Ordered concept words; position is the concept index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptVocabulary {
    concepts: Vec<String>,
    index: HashMap<String, usize>,
}

impl ConceptVocabulary {
    pub fn new(concepts: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(concepts.len());
        for (i, w) in concepts.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(DvcError::Vocabulary(format!("duplicate concept {w:?}")));
            }
        }
        Ok(Self { concepts, index })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.concepts
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.concepts)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// The `count` most frequent nouns and verbs of all captions, ties broken
/// lexicographically.
pub fn build_concept_vocabulary(
    records: &[VideoRecord],
    lexicon: &PosLexicon,
    count: usize,
) -> Result<ConceptVocabulary> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in records.iter().flat_map(|r| &r.events).flat_map(|e| &e.caption) {
        if matches!(lexicon.get(tok), Some(PosTag::Noun | PosTag::Verb)) {
            *freq.entry(tok.as_str()).or_default() += 1;
        }
    }
    if freq.len() < count {
        return Err(DvcError::NotEnoughConcepts { requested: count, available: freq.len() });
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ConceptVocabulary::new(ranked.into_iter().take(count).map(|(w, _)| w.to_string()).collect())
}

/// Per-frame binary targets (`frames × N_c`) and a mask of frames that lie
/// inside at least one event.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTargets {
    pub targets: Mat,
    pub mask: Vec<bool>,
}

/// Frame `t` covers `[t/fps, (t+1)/fps)` and belongs to an event when its
/// midpoint lies in the event interval. Frames in several events take the
/// union of their concepts.
pub fn assign_concept_targets(record: &VideoRecord, vocab: &ConceptVocabulary, fps: f64) -> ConceptTargets {
    let frames = record.frame_count();
    let mut targets = Array2::zeros((frames, vocab.len()));
    let mut mask = vec![false; frames];
    for event in &record.events {
        let present: Vec<usize> = event.caption.iter().filter_map(|w| vocab.index_of(w)).collect();
        for (t, m) in mask.iter_mut().enumerate() {
            if event.timestamp.contains((t as f64 + 0.5) / fps) {
                *m = true;
                for &i in &present {
                    targets[[t, i]] = 1.0;
                }
            }
        }
    }
    ConceptTargets { targets, mask }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub concepts: usize,
}

/// MLP from a frame feature to concept logits.
#[derive(Clone, Debug)]
pub struct ConceptDetector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct DetectorTraining {
    pub gamma: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorTraining {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25, epochs: 50, lr: 1e-3, batch_size: 64, seed: 0 }
    }
}

impl ConceptDetector {
    pub fn new(config: DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden);
        dims.push(config.concepts);
        let mlp = Mlp::new(&mut store, "detector", &dims, &mut rng);
        Self { config, store, mlp }
    }

    fn check_dim(&self, features: &Mat) -> Result<()> {
        if features.ncols() != self.config.input_dim {
            return Err(DvcError::Shape(format!(
                "detector expects {}-dimensional frames, got {}",
                self.config.input_dim,
                features.ncols()
            )));
        }
        Ok(())
    }

    /// Mean focal loss over masked frames, one value per epoch.
    pub fn train(&mut self, features: &Mat, targets: &Mat, mask: &[bool], opts: &DetectorTraining) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        if targets.dim() != (features.nrows(), self.config.concepts) || mask.len() != features.nrows() {
            return Err(DvcError::Shape("features, targets and mask disagree on frame count".into()));
        }
        let rows: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
        if rows.is_empty() {
            return Err(DvcError::InvalidArgument("no event frames to train the concept detector on".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = Adam::new(opts.lr);
        let mut order = rows;
        let mut curve = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(opts.batch_size.max(1)) {
                let x = features.select(Axis(0), batch);
                let y = targets.select(Axis(0), batch);
                let mut g = Graph::new();
                let xv = g.constant(x);
                let logits = self.mlp.forward(&mut g, &self.store, xv);
                let p = g.sigmoid(logits);
                let loss = g.focal_loss(p, y, opts.gamma, opts.alpha);
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(DvcError::NonFiniteLoss { component: "concept", value });
                }
                total += value * batch.len() as f64;
                let grads = g.backward(loss);
                adam.step(&mut self.store, &g.param_grads(&grads));
            }
            curve.push(total / order.len() as f64);
        }
        Ok(curve)
    }

    /// Concept probabilities for every frame, `frames × N_c`.
    pub fn detect(&self, features: &Mat) -> Result<Mat> {
        self.check_dim(features)?;
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let logits = self.mlp.forward(&mut g, &self.store, x);
        Ok(g.value(logits).mapv(sigmoid))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        std::fs::write(dir.join("detector.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: DetectorConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("detector.json"))?)?;
        let mut det = Self::new(config, 0);
        det.store.load_into(dir)?;
        Ok(det)
    }
}

/// Stack the detector inputs and targets of several videos.
pub fn collect_training_frames(
    records: &[VideoRecord],
    vocab: &ConceptVocabulary,
    modality: usize,
) -> Result<(Mat, Mat, Vec<bool>)> {
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for r in records {
        let m = r
            .modality_features
            .get(modality)
            .ok_or_else(|| DvcError::InvalidArgument(format!("video {} has no modality {modality}", r.id)))?;
        let t = assign_concept_targets(r, vocab, r.fps());
        feats.push(m.view());
        targets.push(t.targets);
        mask.extend(t.mask);
    }
    if feats.is_empty() {
        return Err(DvcError::InvalidArgument("no videos to train the concept detector on".into()));
    }
    let features = ndarray::concatenate(Axis(0), &feats).map_err(|e| DvcError::Shape(e.to_string()))?;
    let tviews: Vec<_> = targets.iter().map(|t| t.view()).collect();
    let targets = ndarray::concatenate(Axis(0), &tviews).map_err(|e| DvcError::Shape(e.to_string()))?;
    Ok((features, targets, mask))
}

/// Micro-averaged F1 of `probs ≥ threshold` against binary targets over masked rows.
pub fn micro_f1(probs: &Mat, targets: &Mat, mask: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (t, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for (p, y) in probs.slice(s![t, ..]).iter().zip(targets.slice(s![t, ..])) {
            match (*p >= threshold, *y > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GroundTruthEvent, TimeStamp};
    use std::collections::BTreeSet;

    fn record(captions: &[(&str, f64, f64)], frames: usize) -> VideoRecord {
        let events = captions
            .iter()
            .map(|(c, s, e)| GroundTruthEvent {
                timestamp: TimeStamp::new(*s, *e),
                caption: crate::data::tokenize(c),
                labels: BTreeSet::new(),
            })
            .collect();
        VideoRecord::new("v".into(), frames as f64, vec!["m".into()], vec![Array2::zeros((frames, 2))], events)
    }

    fn lexicon() -> PosLexicon {
        [
            ("apply", PosTag::Verb),
            ("lipstick", PosTag::Noun),
            ("lips", PosTag::Noun),
            ("blush", PosTag::Noun),
            ("brush", PosTag::Noun),
            ("on", PosTag::Other),
        ]
        .into_iter()
        .map(|(w, t)| (w.to_string(), t))
        .collect()
    }

    #[test]
    fn vocabulary_by_frequency_then_lexicographic() {
        let r = record(&[("apply lipstick on lips", 0.0, 1.0), ("apply blush", 1.0, 2.0)], 2);
        let v = build_concept_vocabulary(&[r], &lexicon(), 3).unwrap();
        assert_eq!(v.words(), ["apply", "blush", "lips"]);
    }

    #[test]
    fn vocabulary_too_large_reports_available() {
        let r = record(&[("apply lipstick on lips", 0.0, 1.0)], 2);
        match build_concept_vocabulary(&[r], &lexicon(), 100) {
            Err(DvcError::NotEnoughConcepts { requested: 100, available: 3 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn targets_follow_event_midpoints() {
        let vocab = ConceptVocabulary::new(vec!["apply".into(), "blush".into(), "brush".into()]).unwrap();
        let r = record(&[("apply blush", 1.0, 3.0)], 5);
        let t = assign_concept_targets(&r, &vocab, 1.0);
        assert_eq!(t.mask, vec![false, true, true, false, false]);
        assert_eq!(t.targets.row(1).to_vec(), vec![1.0, 1.0, 0.0]);
        assert_eq!(t.targets.row(0).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn overlapping_events_take_the_union() {
        let vocab = ConceptVocabulary::new(vec!["apply".into(), "blush".into(), "brush".into()]).unwrap();
        let a = record(&[("apply blush", 0.0, 3.0), ("brush", 2.0, 4.0)], 4);
        let b = record(&[("brush", 2.0, 4.0), ("apply blush", 0.0, 3.0)], 4);
        let ta = assign_concept_targets(&a, &vocab, 1.0);
        assert_eq!(ta.targets.row(2).to_vec(), vec![1.0, 1.0, 1.0]);
        assert_eq!(ta, assign_concept_targets(&b, &vocab, 1.0));
    }

    #[test]
    fn detector_rejects_wrong_dimension_and_empty_mask() {
        let mut det = ConceptDetector::new(DetectorConfig { input_dim: 3, hidden: vec![4], concepts: 2 }, 0);
        assert!(det.detect(&Array2::zeros((2, 4))).is_err());
        let err = det.train(&Array2::zeros((2, 3)), &Array2::zeros((2, 2)), &[false, false], &Default::default());
        assert!(err.is_err());
    }

    #[test]
    fn zero_frames_give_identical_outputs_in_range() {
        let det = ConceptDetector::new(DetectorConfig { input_dim: 3, hidden: vec![4], concepts: 2 }, 0);
        let p = det.detect(&Array2::zeros((100, 3))).unwrap();
        assert_eq!(p.dim(), (100, 2));
        assert!(p.rows().into_iter().all(|r| r == p.row(0)));
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn detection_is_independent_of_batching() {
        let det = ConceptDetector::new(DetectorConfig { input_dim: 3, hidden: vec![5], concepts: 4 }, 1);
        let x = Array2::from_shape_fn((7, 3), |(r, c)| (r * 3 + c) as f64 * 0.1 - 1.0);
        let whole = det.detect(&x).unwrap();
        let top = det.detect(&x.slice(s![..3, ..]).to_owned()).unwrap();
        let bottom = det.detect(&x.slice(s![3.., ..]).to_owned()).unwrap();
        assert_eq!(whole.slice(s![..3, ..]), top);
        assert_eq!(whole.slice(s![3.., ..]), bottom);
    }

    #[test]
    fn save_and_load_preserve_predictions() {
        let det = ConceptDetector::new(DetectorConfig { input_dim: 3, hidden: vec![5], concepts: 4 }, 9);
        let dir = tempfile::tempdir().unwrap();
        det.save(dir.path()).unwrap();
        let back = ConceptDetector::load(dir.path()).unwrap();
        let x = Array2::from_elem((2, 3), 0.3);
        assert_eq!(det.detect(&x).unwrap(), back.detect(&x).unwrap());
    }

    #[test]
    fn micro_f1_counts() {
        let p = ndarray::array![[0.9, 0.1], [0.6, 0.7], [0.9, 0.9]];
        let y = ndarray::array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        // masked row 2 ignored: tp=2 fp=1 fn=0
        assert!((micro_f1(&p, &y, &[true, true, false], 0.5) - 0.8).abs() < 1e-12);
    }
}
