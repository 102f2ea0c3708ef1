//! Confidence ranking, top-K selection and prediction files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat};
use crate::data::{detokenize, TextVocabulary};
use crate::error::Result;
use crate::heads::{classification_confidence, CaptionOutput, CounterOutput, LocalizationOutput};
use crate::model::{DvcModel, PreparedVideo};

/// Labels with probability at or above this are reported.
pub const LABEL_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventPrediction {
    pub query: usize,
    /// Seconds, within `[0, duration]`.
    pub timestamp: [f64; 2],
    pub sentence: String,
    pub labels: Vec<usize>,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvcResult {
    pub video_id: String,
    pub events: Vec<EventPrediction>,
    pub k_num: Vec<f64>,
    pub k: usize,
}

/// Indices of the `k` highest confidences, descending, ties to the lower index.
/// `k` larger than the candidate count is clamped with a warning.
pub fn select_top_k(confidences: &[f64], k: usize) -> Vec<usize> {
    let mut k = k;
    if k > confidences.len() {
        log::warn!("event count {k} exceeds {} queries; clamping", confidences.len());
        k = confidences.len();
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Head outputs of one video, as values.
pub struct HeadValues<'a> {
    pub localization: &'a LocalizationOutput,
    pub captions: &'a [CaptionOutput],
    /// `N × labels`, absent when the classification head is disabled.
    pub cls: Option<&'a Mat>,
    pub counter: &'a CounterOutput,
}

/// Confidence = max label probability + caption confidence; keep the top `K`.
pub fn rank_and_select(
    video_id: &str,
    heads: &HeadValues<'_>,
    vocab: &TextVocabulary,
    extent: f64,
    duration: f64,
) -> DvcResult {
    let n = heads.localization.intervals.len();
    let cls_conf = heads.cls.map(classification_confidence).unwrap_or_else(|| vec![0.0; n]);
    let confidences: Vec<f64> = (0..n).map(|i| cls_conf[i] + heads.captions[i].confidence()).collect();
    let events = select_top_k(&confidences, heads.counter.k)
        .into_iter()
        .map(|i| {
            let [s, e] = heads.localization.intervals[i];
            let labels = heads
                .cls
                .map(|p| (0..p.ncols()).filter(|&l| p[[i, l]] >= LABEL_THRESHOLD).collect())
                .unwrap_or_default();
            EventPrediction {
                query: i,
                timestamp: [(s * extent).clamp(0.0, duration), (e * extent).clamp(0.0, duration)],
                sentence: detokenize(&vocab.decode(&heads.captions[i].tokens)),
                labels,
                confidence: confidences[i],
            }
        })
        .collect();
    DvcResult { video_id: video_id.to_string(), events, k_num: heads.counter.k_num.clone(), k: heads.counter.k.min(n) }
}

/// Full inference for one prepared video.
pub fn predict_video(model: &DvcModel, video: &PreparedVideo, vocab: &TextVocabulary) -> Result<DvcResult> {
    let mut g = Graph::new();
    let heads = model.forward(&mut g, video)?;
    let localization = LocalizationOutput::from_mat(g.value(heads.intervals));
    let captions = model.caption.greedy(&model.store, g.value(heads.hidden));
    let counter = CounterOutput::from_probs(g.value(heads.counter.probs).row(0).to_vec());
    let values = HeadValues {
        localization: &localization,
        captions: &captions,
        cls: heads.cls.map(|c| g.value(c)),
        counter: &counter,
    };
    Ok(rank_and_select(&video.id, &values, vocab, video.extent, video.duration))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub sentence: String,
    pub timestamp: [f64; 2],
    pub labels: Vec<usize>,
    pub score: f64,
}

/// `{videoId: [entry, ...]}`, entries in ranked order.
pub type Predictions = BTreeMap<String, Vec<PredictionEntry>>;

pub fn to_predictions(results: &[DvcResult]) -> Predictions {
    results
        .iter()
        .map(|r| {
            let entries = r
                .events
                .iter()
                .map(|e| PredictionEntry {
                    sentence: e.sentence.clone(),
                    timestamp: e.timestamp,
                    labels: e.labels.clone(),
                    score: e.confidence,
                })
                .collect();
            (r.video_id.clone(), entries)
        })
        .collect()
}

pub fn write_predictions(path: &Path, predictions: &Predictions) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(predictions)?)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn top_k_by_confidence() {
        assert_eq!(select_top_k(&[0.9, 1.4, 1.1], 2), vec![1, 2]);
        assert_eq!(select_top_k(&[0.5, 0.7, 0.7, 0.1], 3), vec![1, 2, 0]);
        assert_eq!(select_top_k(&[0.5, 0.7], 5), vec![1, 0]);
        assert!(select_top_k(&[0.5], 0).is_empty());
    }

    #[test]
    fn rank_and_select_denormalises_and_labels() {
        let vocab = TextVocabulary::from_words(["apply".to_string(), "blush".to_string()]);
        let loc = LocalizationOutput { intervals: vec![[0.0, 0.5], [0.25, 0.75], [0.5, 1.0]] };
        let captions = vec![
            CaptionOutput { tokens: vec![4], log_probs: vec![-0.1, -0.1] },
            CaptionOutput { tokens: vec![4, 5], log_probs: vec![-0.1, -0.1, -0.1] },
            CaptionOutput { tokens: vec![], log_probs: vec![-3.0] },
        ];
        let cls = array![[0.2, 0.1], [0.6, 0.9], [0.1, 0.1]];
        let counter = CounterOutput::from_probs(vec![0.1, 0.1, 0.8]);
        let heads = HeadValues { localization: &loc, captions: &captions, cls: Some(&cls), counter: &counter };
        let r = rank_and_select("v", &heads, &vocab, 120.0, 100.0);
        assert_eq!(r.k, 2);
        assert_eq!(r.events.len(), 2);
        assert_eq!(r.events[0].query, 1);
        assert_eq!(r.events[0].sentence, "apply blush");
        assert_eq!(r.events[0].labels, vec![0, 1]);
        assert_eq!(r.events[0].timestamp, [30.0, 90.0]);
        assert!((r.events[0].confidence - (0.9 + (-0.1f64).exp())).abs() < 1e-12);
        assert_eq!(r.events[1].query, 0);
        assert!(r.events[0].confidence >= r.events[1].confidence);
    }

    #[test]
    fn timestamps_are_clamped_to_duration() {
        let vocab = TextVocabulary::from_words(Vec::<String>::new());
        let loc = LocalizationOutput { intervals: vec![[0.9, 1.0]] };
        let captions = vec![CaptionOutput { tokens: vec![], log_probs: vec![-1.0] }];
        let counter = CounterOutput::from_probs(vec![0.0, 1.0]);
        let heads = HeadValues { localization: &loc, captions: &captions, cls: None, counter: &counter };
        let r = rank_and_select("v", &heads, &vocab, 200.0, 150.0);
        assert_eq!(r.events[0].timestamp, [150.0, 150.0]);
        assert!((r.events[0].confidence - (-1.0f64).exp()).abs() < 1e-15);
    }
}
