//! The four parallel heads over decoded event representations: timestamps,
//! captions, attribute labels and the event count. Each consumes only the
//! decoder output.

use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::autograd::nn::{Linear, Mlp};
use crate::autograd::{log_softmax_rows, sigmoid, Graph, Mat, ParamId, ParamStore, Var};
use crate::data::vocab::{BOS, EOS, PAD};
use crate::error::{DvcError, Result};

/// Normalised `[start, end]` per query, `0 ≤ start ≤ end ≤ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationOutput {
    pub intervals: Vec<[f64; 2]>,
}

impl LocalizationOutput {
    pub fn from_mat(m: &Mat) -> Self {
        Self { intervals: m.rows().into_iter().map(|r| [r[0], r[1]]).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionOutput {
    /// Emitted word ids, without the end token.
    pub tokens: Vec<usize>,
    /// Log-probability of every emitted id, including a final end token if one was produced.
    pub log_probs: Vec<f64>,
}

impl CaptionOutput {
    /// `exp` of the mean per-step log-probability.
    pub fn confidence(&self) -> f64 {
        if self.log_probs.is_empty() {
            return 0.0;
        }
        (self.log_probs.iter().sum::<f64>() / self.log_probs.len() as f64).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationOutput {
    /// `N × labels` probabilities.
    pub probs: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterOutput {
    pub k_num: Vec<f64>,
    pub k: usize,
}

impl CounterOutput {
    pub fn from_probs(k_num: Vec<f64>) -> Self {
        let k = argmax(&k_num);
        Self { k_num, k }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// MLP → sigmoid → (center, width) → clamped `[start, end]`.
#[derive(Clone, Debug)]
pub struct LocalizationHead {
    pub mlp: Mlp,
}

impl LocalizationHead {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { mlp: Mlp::new(store, "head.loc", &[dim, dim, 2], rng) }
    }

    /// Returns an `N × 2` node of `[start, end]` rows.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Var {
        let raw = self.mlp.forward(g, store, hidden);
        interval_from_raw(g, raw)
    }
}

/// `(center, width) = sigmoid(raw)`, `start = clamp(c − w/2)`, `end = clamp(c + w/2)`.
pub fn interval_from_raw(g: &mut Graph, raw: Var) -> Var {
    let cw = g.sigmoid(raw);
    let center = g.slice_cols(cw, 0, 1);
    let width = g.slice_cols(cw, 1, 2);
    let half = g.scale(width, 0.5);
    let start = g.sub(center, half);
    let end = g.add(center, half);
    let start = g.clamp(start, 0.0, 1.0);
    let end = g.clamp(end, 0.0, 1.0);
    g.concat_cols(&[start, end])
}

/// Multi-label attribute head: MLP → per-label sigmoid.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub mlp: Mlp,
    pub labels: usize,
}

impl ClassificationHead {
    pub fn new(store: &mut ParamStore, dim: usize, labels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { mlp: Mlp::new(store, "head.cls", &[dim, dim, labels], rng), labels }
    }

    /// `N × labels` probabilities.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Var {
        let logits = self.mlp.forward(g, store, hidden);
        g.sigmoid(logits)
    }
}

/// Max-pool over queries, one linear layer, softmax over `0..=max_events`.
#[derive(Clone, Debug)]
pub struct EventCounter {
    pub fc: Linear,
    pub max_events: usize,
}

pub struct CounterVars {
    pub probs: Var,
    pub log_probs: Var,
}

impl EventCounter {
    pub fn new(store: &mut ParamStore, dim: usize, max_events: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { fc: Linear::new(store, "head.counter", dim, max_events + 1, rng), max_events }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> CounterVars {
        let pooled = g.max_rows(hidden);
        let logits = self.fc.forward(g, store, pooled);
        CounterVars { probs: g.softmax_rows(logits), log_probs: g.log_softmax_rows(logits) }
    }
}

/// LSTM captioner. Every step sees `[previous word embedding, event representation]`.
#[derive(Clone, Debug)]
pub struct CaptionHead {
    pub embed: ParamId,
    pub gates: Linear,
    pub out: Linear,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

/// Teacher-forced outputs for a batch of captions, stacked step-major.
pub struct TeacherForced {
    /// `(steps · batch) × vocab` log-probabilities.
    pub log_probs: Var,
    /// Target id of every row; `None` rows are padding.
    pub targets: Vec<Option<usize>>,
}

impl CaptionHead {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let embed = store.add_uniform("head.cap.embed", vocab_size, embed_dim, rng);
        let gates = Linear::new(store, "head.cap.gates", embed_dim + dim + hidden_dim, 4 * hidden_dim, rng);
        // forget-gate bias starts at 1
        store.value_mut(gates.bias).slice_mut(s![.., hidden_dim..2 * hidden_dim]).fill(1.0);
        let out = Linear::new(store, "head.cap.out", hidden_dim, vocab_size, rng);
        Self { embed, gates, out, hidden_dim, vocab_size, max_len }
    }

    /// Input/target id sequences for one caption (words without markers).
    /// Targets end with the end token and hold at most `max_len` ids.
    pub fn teacher_sequence(&self, words: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let keep = words.len().min(self.max_len.saturating_sub(1));
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&words[..keep]);
        let mut targets = words[..keep].to_vec();
        targets.push(EOS);
        (inputs, targets)
    }

    fn cell(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.hidden_dim;
        let z_in = g.concat_cols(&[x, h]);
        let z = self.gates.forward(g, store, z_in);
        let i = g.slice_cols(z, 0, hd);
        let f = g.slice_cols(z, hd, 2 * hd);
        let o = g.slice_cols(z, 2 * hd, 3 * hd);
        let u = g.slice_cols(z, 3 * hd, 4 * hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let u = g.tanh(u);
        let fc = g.mul(f, c);
        let iu = g.mul(i, u);
        let c = g.add(fc, iu);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        (h, c)
    }

    /// Teacher forcing over `hidden: B × d` with one word-id caption per row.
    pub fn teacher_forcing(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        captions: &[Vec<usize>],
    ) -> Result<TeacherForced> {
        let b = g.shape(hidden).0;
        if b != captions.len() {
            return Err(DvcError::Shape(format!("{b} representations for {} captions", captions.len())));
        }
        if let Some(&bad) = captions.iter().flatten().find(|&&t| t >= self.vocab_size) {
            return Err(DvcError::InvalidArgument(format!(
                "token index {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let seqs: Vec<_> = captions.iter().map(|c| self.teacher_sequence(c)).collect();
        let steps = seqs.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
        let embed = g.param(store, self.embed);
        let mut h = g.constant(Array2::zeros((b, self.hidden_dim)));
        let mut c = g.constant(Array2::zeros((b, self.hidden_dim)));
        let mut rows = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * b);
        for t in 0..steps {
            let ids = seqs.iter().map(|(inp, _)| Some(*inp.get(t).unwrap_or(&PAD))).collect();
            let emb = g.gather_rows(embed, ids);
            let x = g.concat_cols(&[emb, hidden]);
            (h, c) = self.cell(g, store, x, h, c);
            let logits = self.out.forward(g, store, h);
            rows.push(g.log_softmax_rows(logits));
            targets.extend(seqs.iter().map(|(_, tg)| tg.get(t).copied()));
        }
        let log_probs = g.concat_rows(&rows);
        Ok(TeacherForced { log_probs, targets })
    }

    /// Greedy decoding for every row of `hidden` (values only, no tape).
    /// Pad and begin ids are never emitted.
    pub fn greedy(&self, store: &ParamStore, hidden: &Mat) -> Vec<CaptionOutput> {
        let b = hidden.nrows();
        let hd = self.hidden_dim;
        let embed = store.value(self.embed);
        let (gw, gb) = (store.value(self.gates.weight), store.value(self.gates.bias));
        let (ow, ob) = (store.value(self.out.weight), store.value(self.out.bias));
        let mut h = Array2::<f64>::zeros((b, hd));
        let mut c = Array2::<f64>::zeros((b, hd));
        let mut prev = vec![BOS; b];
        let mut outputs: Vec<CaptionOutput> =
            (0..b).map(|_| CaptionOutput { tokens: Vec::new(), log_probs: Vec::new() }).collect();
        let mut done = vec![false; b];
        for _ in 0..self.max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let emb = embed.select(Axis(0), &prev);
            let x = ndarray::concatenate(Axis(1), &[emb.view(), hidden.view(), h.view()]).expect("rows agree");
            let z = x.dot(gw) + gb;
            for r in 0..b {
                for k in 0..hd {
                    let i = sigmoid(z[[r, k]]);
                    let f = sigmoid(z[[r, hd + k]]);
                    let o = sigmoid(z[[r, 2 * hd + k]]);
                    let u = z[[r, 3 * hd + k]].tanh();
                    c[[r, k]] = f * c[[r, k]] + i * u;
                    h[[r, k]] = o * c[[r, k]].tanh();
                }
            }
            let lp = log_softmax_rows(&(h.dot(ow) + ob));
            for r in 0..b {
                if done[r] {
                    continue;
                }
                let row = lp.row(r);
                let mut best = None::<usize>;
                for (i, &v) in row.iter().enumerate() {
                    if i == PAD || i == BOS {
                        continue;
                    }
                    if best.is_none_or(|bi| v > row[bi]) {
                        best = Some(i);
                    }
                }
                let tok = best.expect("vocabulary has a word");
                outputs[r].log_probs.push(row[tok]);
                if tok == EOS {
                    done[r] = true;
                } else {
                    outputs[r].tokens.push(tok);
                }
                prev[r] = tok;
            }
        }
        outputs
    }
}

/// Per-query caption confidences plus `N × labels` probabilities: the row max.
pub fn classification_confidence(probs: &Mat) -> Vec<f64> {
    probs.rows().into_iter().map(|r| r.fold(0.0f64, |a, &b| a.max(b))).collect()
}
