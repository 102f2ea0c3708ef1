//! Dense-captioning evaluation: temporal IoU, localization precision/recall
//! and caption metrics over tIoU-matched pairs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::dataset::read_manifest;
use crate::data::{tokenize, VideoRecord};
use crate::error::Result;
use crate::inference::Predictions;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

/// Intersection over union of two ordered intervals; 0 when the union is empty.
pub fn tiou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub timestamp: [f64; 2],
    pub sentence: String,
}

/// Ground truth per video id.
pub type GroundTruth = BTreeMap<String, Vec<EvalEvent>>;

pub fn ground_truth_from_records(records: &[VideoRecord]) -> GroundTruth {
    records
        .iter()
        .map(|r| {
            let events = r
                .events
                .iter()
                .map(|e| EvalEvent { timestamp: [e.timestamp.start, e.timestamp.end], sentence: e.caption.join(" ") })
                .collect();
            (r.id.clone(), events)
        })
        .collect()
}

/// Ground truth straight from a manifest; feature files are not touched.
pub fn read_ground_truth(manifest: &Path) -> Result<GroundTruth> {
    Ok(read_manifest(manifest)?
        .into_iter()
        .map(|(id, entry)| {
            let events = entry
                .timestamps
                .iter()
                .zip(&entry.sentences)
                .map(|(&timestamp, s)| EvalEvent { timestamp, sentence: s.clone() })
                .collect();
            (id, events)
        })
        .collect())
}

/// Per-threshold localization precision and recall, averaged over thresholds
/// and then over videos. A video with ground truth but no predictions scores
/// 0/0; videos without ground truth do not enter recall.
pub fn localization_pr(
    predictions: &BTreeMap<String, Vec<[f64; 2]>>,
    ground_truth: &BTreeMap<String, Vec<[f64; 2]>>,
    thresholds: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut precision = vec![0.0; thresholds.len()];
    let mut recall = vec![0.0; thresholds.len()];
    let (mut n_prec, mut n_rec) = (0usize, 0usize);
    let empty = Vec::new();
    for (id, gts) in ground_truth {
        let preds = predictions.get(id).unwrap_or(&empty);
        if preds.is_empty() && gts.is_empty() {
            continue;
        }
        n_prec += 1;
        if !gts.is_empty() {
            n_rec += 1;
        }
        for (k, &t) in thresholds.iter().enumerate() {
            if !preds.is_empty() {
                let hits = preds.iter().filter(|p| gts.iter().any(|g| tiou(**p, *g) >= t)).count();
                precision[k] += hits as f64 / preds.len() as f64;
            }
            if !gts.is_empty() {
                let found = gts.iter().filter(|g| preds.iter().any(|p| tiou(*p, **g) >= t)).count();
                recall[k] += found as f64 / gts.len() as f64;
            }
        }
    }
    for p in &mut precision {
        *p /= n_prec.max(1) as f64;
    }
    for r in &mut recall {
        *r /= n_rec.max(1) as f64;
    }
    (precision, recall)
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.as_ref()).collect()).or_default() += 1;
        }
    }
    out
}

/// Sentence BLEU-4 against one reference, no smoothing.
pub fn bleu4<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let c = ngrams(candidate, n);
        let r = ngrams(reference, n);
        let total: usize = c.values().sum();
        let clipped: usize = c.iter().map(|(g, &k)| k.min(*r.get(g).unwrap_or(&0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

/// Exact-match METEOR: greedy left-to-right unigram alignment,
/// `F = 10PR / (R + 9P)`, fragmentation penalty `0.5 · (chunks / matches)³`.
pub fn meteor_exact<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<usize> = Vec::new();
    for c in candidate {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j].as_ref() == c.as_ref()) {
            used[j] = true;
            alignment.push(j);
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment.windows(2).filter(|w| w[1] != w[0] + 1).count();
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    f_mean * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

/// tf-idf CIDEr over n = 1..4 with idf from a fixed reference corpus.
#[derive(Clone, Debug)]
pub struct CiderScorer {
    doc_freq: HashMap<Vec<String>, f64>,
    log_docs: f64,
    variant: CiderVariant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CiderVariant {
    /// Plain cosine similarity of tf-idf vectors.
    Plain,
    /// Clipped products and a Gaussian length penalty (σ = 6), as in the
    /// commonly distributed captioning scorer.
    D,
}

struct TfIdf {
    vecs: Vec<HashMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    length: f64,
}

impl CiderScorer {
    /// Each reference is one document for document frequency.
    pub fn new<S: AsRef<str>>(references: &[Vec<S>], variant: CiderVariant) -> Self {
        let mut doc_freq: HashMap<Vec<String>, f64> = HashMap::new();
        for r in references {
            for n in 1..=4 {
                for g in ngrams(r, n).into_keys() {
                    *doc_freq.entry(g.into_iter().map(str::to_string).collect()).or_default() += 1.0;
                }
            }
        }
        Self { doc_freq, log_docs: (references.len().max(1) as f64).ln(), variant }
    }

    fn vectorise<S: AsRef<str>>(&self, tokens: &[S]) -> TfIdf {
        let mut vecs = Vec::with_capacity(4);
        let mut norms = Vec::with_capacity(4);
        for n in 1..=4 {
            let mut v = HashMap::new();
            let mut norm = 0.0;
            for (g, tf) in ngrams(tokens, n) {
                let key: Vec<String> = g.into_iter().map(str::to_string).collect();
                let df = self.doc_freq.get(&key).copied().unwrap_or(0.0).max(1.0).ln();
                let w = tf as f64 * (self.log_docs - df);
                norm += w * w;
                v.insert(key, w);
            }
            vecs.push(v);
            norms.push(norm.sqrt());
        }
        // the reference scorer measures length in bigrams
        let length = tokens.len().saturating_sub(1) as f64;
        TfIdf { vecs, norms, length }
    }

    pub fn score<S: AsRef<str>>(&self, candidate: &[S], reference: &[S]) -> f64 {
        let c = self.vectorise(candidate);
        let r = self.vectorise(reference);
        let mut total = 0.0;
        for n in 0..4 {
            let mut dot = 0.0;
            for (g, &w) in &c.vecs[n] {
                let wr = r.vecs[n].get(g).copied().unwrap_or(0.0);
                dot += match self.variant {
                    CiderVariant::Plain => w * wr,
                    CiderVariant::D => w.min(wr) * wr,
                };
            }
            if c.norms[n] != 0.0 && r.norms[n] != 0.0 {
                dot /= c.norms[n] * r.norms[n];
            }
            if self.variant == CiderVariant::D {
                let delta = c.length - r.length;
                dot *= (-(delta * delta) / (2.0 * 36.0)).exp();
            }
            total += dot;
        }
        10.0 * total / 4.0
    }
}

/// Mean CIDEr of paired candidates and references, idf from `references`.
pub fn cider<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let scorer = CiderScorer::new(references, CiderVariant::Plain);
    candidates.iter().zip(references).map(|(c, r)| scorer.score(c, r)).sum::<f64>() / candidates.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ThresholdScores {
    pub tiou: f64,
    pub precision: f64,
    pub recall: f64,
    pub bleu4: f64,
    pub meteor_exact: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub bleu4: f64,
    pub meteor_exact: f64,
    pub cider: f64,
    pub per_threshold: Vec<ThresholdScores>,
}

impl EvalReport {
    /// Plain-text table with columns P, R, B4, M-exact, C (scaled by 100).
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "tIoU", "P", "R", "B4", "M-exact", "C");
        let row = |out: &mut String, label: &str, p: f64, r: f64, b: f64, m: f64, c: f64| {
            let _ = writeln!(
                out,
                "{label:>8} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                100.0 * p,
                100.0 * r,
                100.0 * b,
                100.0 * m,
                100.0 * c
            );
        };
        for t in &self.per_threshold {
            row(&mut out, &format!("{:.1}", t.tiou), t.precision, t.recall, t.bleu4, t.meteor_exact, t.cider);
        }
        row(&mut out, "mean", self.precision, self.recall, self.bleu4, self.meteor_exact, self.cider);
        out
    }
}

/// Caption scores pair every prediction with its highest-tIoU ground truth in
/// the same video when that tIoU reaches the threshold; unmatched predictions
/// score 0 and the mean runs over all predictions. CIDEr idf comes from every
/// ground-truth sentence. All metrics are averaged over thresholds.
pub fn evaluate_dvc(predictions: &Predictions, ground_truth: &GroundTruth, thresholds: &[f64]) -> EvalReport {
    let pred_iv: BTreeMap<String, Vec<[f64; 2]>> = ground_truth
        .keys()
        .map(|id| {
            (id.clone(), predictions.get(id).map(|p| p.iter().map(|e| e.timestamp).collect()).unwrap_or_default())
        })
        .collect();
    let gt_iv: BTreeMap<String, Vec<[f64; 2]>> =
        ground_truth.iter().map(|(id, evs)| (id.clone(), evs.iter().map(|e| e.timestamp).collect())).collect();
    let (precision, recall) = localization_pr(&pred_iv, &gt_iv, thresholds);

    let gt_tokens: BTreeMap<&str, Vec<Vec<String>>> = ground_truth
        .iter()
        .map(|(id, evs)| (id.as_str(), evs.iter().map(|e| tokenize(&e.sentence)).collect()))
        .collect();
    let corpus: Vec<Vec<String>> = gt_tokens.values().flatten().cloned().collect();
    let scorer = CiderScorer::new(&corpus, CiderVariant::Plain);

    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for (k, &t) in thresholds.iter().enumerate() {
        let (mut b, mut m, mut c, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (id, gts) in ground_truth {
            let Some(preds) = predictions.get(id) else { continue };
            for p in preds {
                count += 1;
                let best = gts.iter().enumerate().map(|(j, g)| (j, tiou(p.timestamp, g.timestamp))).fold(
                    None::<(usize, f64)>,
                    |acc, x| match acc {
                        Some(a) if a.1 >= x.1 => Some(a),
                        _ => Some(x),
                    },
                );
                if let Some((j, v)) = best {
                    if v >= t {
                        let cand = tokenize(&p.sentence);
                        let reference = &gt_tokens[id.as_str()][j];
                        b += bleu4(&cand, reference);
                        m += meteor_exact(&cand, reference);
                        c += scorer.score(&cand, reference);
                    }
                }
            }
        }
        let denom = count.max(1) as f64;
        per_threshold.push(ThresholdScores {
            tiou: t,
            precision: precision[k],
            recall: recall[k],
            bleu4: b / denom,
            meteor_exact: m / denom,
            cider: c / denom,
        });
    }
    let mean =
        |f: fn(&ThresholdScores) -> f64| per_threshold.iter().map(f).sum::<f64>() / per_threshold.len().max(1) as f64;
    EvalReport {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        bleu4: mean(|s| s.bleu4),
        meteor_exact: mean(|s| s.meteor_exact),
        cider: mean(|s| s.cider),
        per_threshold,
    }
}
