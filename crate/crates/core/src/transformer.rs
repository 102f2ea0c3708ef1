//! 1-D multi-scale deformable attention, the encoder over the fused sequence,
//! and the decoder over learned event queries.
//!
//! For every query, head, level and sampling point the attention predicts an
//! offset and a logit from the query. The sample sits at
//! `ref × len_level + offset` inside its level and reads the value sequence by
//! linear interpolation, clamped to the level. Logits are soft-maxed over all
//! (level, point) pairs of a head.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autograd::nn::{LayerNorm, Linear};
use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{DvcError, Result};
use crate::pyramid::{LevelLayout, MultiScaleFeature};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformableAttentionConfig {
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub model_dim: usize,
}

impl DeformableAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(DvcError::InvalidArgument(format!(
                "model dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.points == 0 || self.levels == 0 {
            return Err(DvcError::InvalidArgument("points and levels must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Sampling points per head across all levels.
    pub fn samples_per_head(&self) -> usize {
        self.levels * self.points
    }
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    rows: [usize; 2],
    interp: [f64; 2],
    level_len: f64,
    valid: bool,
    /// Position lies strictly inside the level with both neighbours valid.
    differentiable: bool,
}

/// Resolved sampling locations and normalised weights for one attention call.
#[derive(Clone, Debug)]
pub struct SamplePlan {
    n: usize,
    heads: usize,
    head_dim: usize,
    per_head: usize,
    samples: Vec<Sample>,
    weights: Vec<f64>,
}

pub(crate) struct SampleGrads {
    pub value: Mat,
    pub offsets: Mat,
    pub logits: Mat,
    pub refs: Mat,
}

impl SamplePlan {
    /// Column `((h · levels) + l) · points + p` of `offsets` / `logits`
    /// belongs to head `h`, level `l`, point `p`.
    pub fn build(
        offsets: &Mat,
        logits: &Mat,
        refs: &Mat,
        layout: &LevelLayout,
        mask: &[bool],
        config: &DeformableAttentionConfig,
    ) -> Result<Self> {
        let n = refs.nrows();
        let per_head = config.samples_per_head();
        let cols = config.heads * per_head;
        if offsets.dim() != (n, cols) || logits.dim() != (n, cols) || refs.ncols() != 1 {
            return Err(DvcError::Shape(format!(
                "offsets {:?} / logits {:?} / refs {:?} for {n} queries and {cols} samples",
                offsets.dim(),
                logits.dim(),
                refs.dim()
            )));
        }
        if layout.num_levels() != config.levels {
            return Err(DvcError::Shape(format!(
                "value sequence has {} levels, attention expects {}",
                layout.num_levels(),
                config.levels
            )));
        }
        if let Some(r) = refs.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(DvcError::InvalidArgument(format!("reference point {r} outside [0, 1]")));
        }
        let lengths = layout.lengths();
        let level_offsets = layout.offsets();
        let mut samples = Vec::with_capacity(n * cols);
        let mut weights = vec![0.0; n * cols];
        for q in 0..n {
            for h in 0..config.heads {
                let base = h * per_head;
                for l in 0..config.levels {
                    let len = lengths[l];
                    for p in 0..config.points {
                        let c = base + l * config.points + p;
                        let pos = refs[[q, 0]] * len as f64 + offsets[[q, c]];
                        samples.push(resolve(pos, len, level_offsets[l], mask));
                    }
                }
                let row = q * cols + base;
                let hs = &samples[row..row + per_head];
                let max = hs
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.valid)
                    .map(|(i, _)| logits[[q, base + i]])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max.is_finite() {
                    let mut total = 0.0;
                    for (i, s) in hs.iter().enumerate() {
                        if s.valid {
                            let e = (logits[[q, base + i]] - max).exp();
                            weights[row + i] = e;
                            total += e;
                        }
                    }
                    weights[row..row + per_head].iter_mut().for_each(|w| *w /= total);
                }
            }
        }
        Ok(Self { n, heads: config.heads, head_dim: config.head_dim(), per_head, samples, weights })
    }

    /// Normalised weights of one head of one query (zero for masked samples).
    pub fn head_weights(&self, query: usize, head: usize) -> &[f64] {
        let start = (query * self.heads + head) * self.per_head;
        &self.weights[start..start + self.per_head]
    }

    pub(crate) fn gather(&self, value: &Mat) -> Mat {
        let mut out = Array2::zeros((self.n, self.heads * self.head_dim));
        for q in 0..self.n {
            for h in 0..self.heads {
                let cols = h * self.head_dim..(h + 1) * self.head_dim;
                for i in 0..self.per_head {
                    let k = (q * self.heads + h) * self.per_head + i;
                    let w = self.weights[k];
                    if w == 0.0 {
                        continue;
                    }
                    let s = &self.samples[k];
                    for (side, &row) in s.rows.iter().enumerate() {
                        let a = w * s.interp[side];
                        if a == 0.0 {
                            continue;
                        }
                        for c in cols.clone() {
                            out[[q, c]] += a * value[[row, c]];
                        }
                    }
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, value: &Mat, dout: &Mat) -> SampleGrads {
        let cols_total = self.heads * self.per_head;
        let mut d_value = Array2::zeros(value.dim());
        let mut d_offsets = Array2::zeros((self.n, cols_total));
        let mut d_logits = Array2::zeros((self.n, cols_total));
        let mut d_refs = Array2::zeros((self.n, 1));
        let mut dw = vec![0.0; self.per_head];
        for q in 0..self.n {
            for h in 0..self.heads {
                let cols = h * self.head_dim..(h + 1) * self.head_dim;
                let base = (q * self.heads + h) * self.per_head;
                let mut weighted = 0.0;
                for i in 0..self.per_head {
                    let k = base + i;
                    let s = &self.samples[k];
                    let w = self.weights[k];
                    dw[i] = 0.0;
                    if !s.valid {
                        continue;
                    }
                    let mut slope = 0.0;
                    for c in cols.clone() {
                        let g = dout[[q, c]];
                        let v0 = value[[s.rows[0], c]];
                        let v1 = value[[s.rows[1], c]];
                        dw[i] += g * (s.interp[0] * v0 + s.interp[1] * v1);
                        slope += g * (v1 - v0);
                        d_value[[s.rows[0], c]] += w * s.interp[0] * g;
                        d_value[[s.rows[1], c]] += w * s.interp[1] * g;
                    }
                    weighted += w * dw[i];
                    if s.differentiable {
                        let dpos = w * slope;
                        d_offsets[[q, h * self.per_head + i]] = dpos;
                        d_refs[[q, 0]] += dpos * s.level_len;
                    }
                }
                for i in 0..self.per_head {
                    let w = self.weights[base + i];
                    if w > 0.0 {
                        d_logits[[q, h * self.per_head + i]] = w * (dw[i] - weighted);
                    }
                }
            }
        }
        SampleGrads { value: d_value, offsets: d_offsets, logits: d_logits, refs: d_refs }
    }
}

/// Interpolation endpoints of a continuous position inside one level.
/// Masked endpoints hand their share to the valid neighbour; a sample with
/// no valid endpoint is dropped from the softmax.
fn resolve(pos: f64, len: usize, level_offset: usize, mask: &[bool]) -> Sample {
    let upper = (len - 1) as f64;
    let clamped = pos.clamp(0.0, upper);
    let i0 = (clamped.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let frac = clamped - i0 as f64;
    let rows = [level_offset + i0, level_offset + i1];
    let ok = [mask[rows[0]], mask[rows[1]]];
    let (interp, valid) = match ok {
        [true, true] => ([1.0 - frac, frac], true),
        [true, false] => ([1.0, 0.0], true),
        [false, true] => ([0.0, 1.0], true),
        [false, false] => ([0.0, 0.0], false),
    };
    let differentiable = ok == [true, true] && pos > 0.0 && pos < upper && i1 != i0;
    Sample { rows, interp, level_len: len as f64, valid, differentiable }
}

/// Multi-scale deformable attention block.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub config: DeformableAttentionConfig,
    offsets: Linear,
    logits: Linear,
    value_proj: Linear,
    out_proj: Linear,
}

impl DeformableAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: DeformableAttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let cols = config.heads * config.samples_per_head();
        let offsets = Linear::zeros(store, &format!("{name}.offsets"), d, cols);
        // Heads alternate direction; points fan out 1, 2, ... frames from the reference.
        let bias = store.value_mut(offsets.bias);
        for h in 0..config.heads {
            let dir = if h % 2 == 0 { 1.0 } else { -1.0 };
            let scale = (h / 2 + 1) as f64 * 0.5;
            for l in 0..config.levels {
                for p in 0..config.points {
                    bias[[0, (h * config.levels + l) * config.points + p]] = dir * scale * (p + 1) as f64;
                }
            }
        }
        let logits = Linear::zeros(store, &format!("{name}.logits"), d, cols);
        let value_proj = Linear::new(store, &format!("{name}.value"), d, d, rng);
        let out_proj = Linear::new(store, &format!("{name}.out"), d, d, rng);
        Ok(Self { config, offsets, logits, value_proj, out_proj })
    }

    /// Parameters of the offset and logit predictors.
    pub fn sampling_params(&self) -> [ParamId; 4] {
        [self.offsets.weight, self.offsets.bias, self.logits.weight, self.logits.bias]
    }

    pub fn projection_biases(&self) -> [ParamId; 2] {
        [self.value_proj.bias, self.out_proj.bias]
    }

    /// `queries: n × d`, `refs: n × 1` in `[0, 1]`. Returns `n × d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        refs: Var,
        value: &MultiScaleFeature,
    ) -> Result<Var> {
        let (out, _) = self.forward_with_plan(g, store, queries, refs, value)?;
        Ok(out)
    }

    /// Like [`DeformableAttention::forward`], also returning the sampling node.
    pub fn forward_with_plan(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        refs: Var,
        value: &MultiScaleFeature,
    ) -> Result<(Var, Var)> {
        let offsets = self.offsets.forward(g, store, queries);
        let logits = self.logits.forward(g, store, queries);
        let v = self.value_proj.forward(g, store, value.data);
        let plan = SamplePlan::build(
            g.value(offsets),
            g.value(logits),
            g.value(refs),
            &value.layout,
            &value.mask,
            &self.config,
        )?;
        let sampled = g.deform_sample(v, offsets, logits, refs, plan);
        Ok((self.out_proj.forward(g, store, sampled), sampled))
    }
}

/// Standard scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl MultiHeadSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let d = g.shape(x).1;
        let hd = d / self.heads;
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, x);
        let v = self.v.forward(g, store, x);
        let scale = 1.0 / (hd as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * hd, (h + 1) * hd);
                let kh = g.slice_cols(k, h * hd, (h + 1) * hd);
                let vh = g.slice_cols(v, h * hd, (h + 1) * hd);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                g.matmul(attn, vh)
            })
            .collect();
        let cat = g.concat_cols(&heads);
        self.out.forward(g, store, cat)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

fn residual_norm(g: &mut Graph, store: &ParamStore, norm: &LayerNorm, x: Var, update: Var) -> Var {
    let sum = g.add(x, update);
    norm.forward(g, store, sum)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: DeformableAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

/// Stack of self-deformable-attention layers over the fused sequence.
#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
}

/// Each row's own normalised position within its level: `j / len`.
pub fn encoder_reference_points(layout: &LevelLayout) -> Mat {
    let lengths = layout.lengths();
    let refs: Vec<f64> = layout.positions().map(|(l, j)| j as f64 / lengths[l] as f64).collect();
    Array2::from_shape_vec((refs.len(), 1), refs).expect("column")
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        num_layers: usize,
        config: DeformableAttentionConfig,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = config.model_dim;
        let layers = (0..num_layers)
            .map(|i| {
                let name = format!("encoder.{i}");
                Ok(EncoderLayer {
                    attn: DeformableAttention::new(store, &format!("{name}.attn"), config, rng)?,
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_dim, rng),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `pos` is added to the queries only; values stay position-free.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: &MultiScaleFeature,
        pos: Var,
    ) -> Result<MultiScaleFeature> {
        let refs = g.constant(encoder_reference_points(&fused.layout));
        let mut x = fused.data;
        for layer in &self.layers {
            let q = g.add(x, pos);
            let value = MultiScaleFeature { data: x, layout: fused.layout.clone(), mask: fused.mask.clone() };
            let a = layer.attn.forward(g, store, q, refs, &value)?;
            x = residual_norm(g, store, &layer.norm1, x, a);
            let f = layer.ffn.forward(g, store, x);
            x = residual_norm(g, store, &layer.norm2, x, f);
        }
        Ok(MultiScaleFeature { data: x, layout: fused.layout.clone(), mask: fused.mask.clone() })
    }
}

/// Learned event queries with self-located reference points.
#[derive(Clone, Debug)]
pub struct EventQuerySet {
    pub embeddings: ParamId,
    ref_proj: Linear,
    pub count: usize,
}

impl EventQuerySet {
    pub fn new(store: &mut ParamStore, count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let embeddings = store.add_uniform("queries.embed", count, dim, rng);
        let ref_proj = Linear::new(store, "queries.ref", dim, 1, rng);
        Self { embeddings, ref_proj, count }
    }

    /// Query embeddings and the logits of their initial reference points.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore) -> (Var, Var) {
        let q = g.param(store, self.embeddings);
        let r = self.ref_proj.forward(g, store, q);
        (q, r)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadSelfAttention,
    norm1: LayerNorm,
    cross_attn: DeformableAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
    ref_update: Linear,
}

pub struct DecoderOutput {
    /// `N × d` event representations.
    pub hidden: Var,
    /// `N × 1` reference points in (0, 1) after the last refinement.
    pub refs: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        num_layers: usize,
        config: DeformableAttentionConfig,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = config.model_dim;
        let layers = (0..num_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadSelfAttention::new(store, &format!("{name}.self"), d, config.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    cross_attn: DeformableAttention::new(store, &format!("{name}.cross"), config, rng)?,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_dim, rng),
                    norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
                    ref_update: Linear::zeros(store, &format!("{name}.ref"), d, 1),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `queries: N × d`; `ref_logits: N × 1` (pre-sigmoid reference points).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        ref_logits: Var,
        encoded: &MultiScaleFeature,
    ) -> Result<DecoderOutput> {
        let mut x = queries;
        let mut ref_logits = ref_logits;
        for layer in &self.layers {
            let sa = layer.self_attn.forward(g, store, x);
            x = residual_norm(g, store, &layer.norm1, x, sa);
            let refs = g.sigmoid(ref_logits);
            let ca = layer.cross_attn.forward(g, store, x, refs, encoded)?;
            x = residual_norm(g, store, &layer.norm2, x, ca);
            let f = layer.ffn.forward(g, store, x);
            x = residual_norm(g, store, &layer.norm3, x, f);
            let delta = layer.ref_update.forward(g, store, x);
            ref_logits = g.add(ref_logits, delta);
        }
        let refs = g.sigmoid(ref_logits);
        Ok(DecoderOutput { hidden: x, refs })
    }
}
