//! Fixed-length resampling, per-modality temporal pyramids and multi-modal fusion.
//!
//! A pyramid with `L` levels turns `T` frames into `T' = Σ_{l=0}^{L} ⌈T/2^l⌉`
//! rows: the projected input followed by `L` stride-2 convolutions, each
//! consuming the level before it, concatenated along time.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::nn::{LayerNorm, Linear};
use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{DvcError, Result};

/// `Σ_{l=0}^{levels} ⌈t / 2^l⌉`.
pub fn pyramid_length(t: usize, levels: usize) -> usize {
    LevelLayout::new(t, levels).total()
}

/// Row count of each pyramid level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    lengths: Vec<usize>,
}

impl LevelLayout {
    pub fn new(t: usize, levels: usize) -> Self {
        let mut lengths = Vec::with_capacity(levels + 1);
        let mut len = t;
        lengths.push(len);
        for _ in 0..levels {
            len = len.div_ceil(2);
            lengths.push(len);
        }
        Self { lengths }
    }

    pub fn from_lengths(lengths: Vec<usize>) -> Self {
        Self { lengths }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn num_levels(&self) -> usize {
        self.lengths.len()
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// `(level, index within level)` for every row, in order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lengths.iter().enumerate().flat_map(|(l, &n)| (0..n).map(move |j| (l, j)))
    }
}

/// Concatenated multi-level sequence living on a graph.
#[derive(Clone, Debug)]
pub struct MultiScaleFeature {
    pub data: Var,
    pub layout: LevelLayout,
    /// Validity of every row; padding rows are `false`.
    pub mask: Vec<bool>,
}

/// Resample along time to `target` rows.
///
/// Longer inputs are linearly interpolated (end points aligned). Shorter
/// inputs are zero-padded at the end. The mask marks original rows as valid.
pub fn resize_to_fixed_length(seq: &Mat, target: usize) -> Result<(Mat, Vec<bool>)> {
    let (t_raw, d) = seq.dim();
    if t_raw == 0 {
        return Err(DvcError::InvalidArgument("cannot resize an empty sequence".into()));
    }
    if target == 0 {
        return Err(DvcError::InvalidArgument("resize target must be ≥ 1".into()));
    }
    if t_raw == target {
        return Ok((seq.clone(), vec![true; target]));
    }
    if t_raw < target {
        let mut out = Array2::zeros((target, d));
        out.slice_mut(ndarray::s![..t_raw, ..]).assign(seq);
        let mask = (0..target).map(|i| i < t_raw).collect();
        return Ok((out, mask));
    }
    let step = if target > 1 { (t_raw - 1) as f64 / (target - 1) as f64 } else { 0.0 };
    let mut out = Array2::zeros((target, d));
    for i in 0..target {
        let x = i as f64 * step;
        let i0 = (x.floor() as usize).min(t_raw - 1);
        let i1 = (i0 + 1).min(t_raw - 1);
        let frac = x - i0 as f64;
        for c in 0..d {
            out[[i, c]] = seq[[i0, c]] * (1.0 - frac) + seq[[i1, c]] * frac;
        }
    }
    Ok((out, vec![true; target]))
}

/// Input rows read by output row `k` of a kernel-3, stride-2, padding-1 convolution.
fn conv_taps(len: usize) -> [Vec<Option<usize>>; 3] {
    let out_len = len.div_ceil(2);
    let tap = |shift: isize| {
        (0..out_len)
            .map(|k| {
                let i = 2 * k as isize + shift;
                (i >= 0 && (i as usize) < len).then_some(i as usize)
            })
            .collect()
    };
    [tap(-1), tap(0), tap(1)]
}

/// Max-pool a validity mask with the convolution's window and stride.
pub fn pool_mask(mask: &[bool]) -> Vec<bool> {
    let taps = conv_taps(mask.len());
    (0..mask.len().div_ceil(2)).map(|k| taps.iter().any(|t| t[k].is_some_and(|i| mask[i]))).collect()
}

#[derive(Clone, Debug)]
pub struct TemporalPyramid {
    input_proj: Linear,
    convs: Vec<Linear>,
    norms: Vec<LayerNorm>,
    out_dim: usize,
}

impl TemporalPyramid {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        levels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input_proj = Linear::new(store, &format!("{name}.in"), in_dim, out_dim, rng);
        let convs =
            (0..levels).map(|l| Linear::new(store, &format!("{name}.conv{l}"), 3 * out_dim, out_dim, rng)).collect();
        let norms = (0..levels).map(|l| LayerNorm::new(store, &format!("{name}.norm{l}"), out_dim)).collect();
        Self { input_proj, convs, norms, out_dim }
    }

    pub fn levels(&self) -> usize {
        self.convs.len()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> MultiScaleFeature {
        let t = g.shape(x).0;
        assert_eq!(mask.len(), t, "mask length must equal frame count");
        let mut level = self.input_proj.forward(g, store, x);
        let mut level_mask = mask.to_vec();
        let mut parts = vec![level];
        let mut full_mask = level_mask.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let len = g.shape(level).0;
            let [left, mid, right] = conv_taps(len);
            let cols = [left, mid, right].map(|taps| g.gather_rows(level, taps));
            let stacked = g.concat_cols(&cols);
            let h = conv.forward(g, store, stacked);
            let h = norm.forward(g, store, h);
            level = g.relu(h);
            level_mask = pool_mask(&level_mask);
            full_mask.extend_from_slice(&level_mask);
            parts.push(level);
        }
        let data = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        MultiScaleFeature { data, layout: LevelLayout::new(t, self.levels()), mask: full_mask }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Early,
    Late,
}

impl std::str::FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "early" => Ok(Self::Early),
            "late" => Ok(Self::Late),
            other => Err(format!("unknown fusion mode {other:?} (expected early|late)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub proj_dim: usize,
    pub model_dim: usize,
    pub levels: usize,
}

/// Fuses `M` modality streams and an optional concept stream into one
/// `T' × d_model` multi-scale sequence. Stream order is the order given at
/// construction and must be kept at call time.
#[derive(Clone, Debug)]
pub struct FeatureFusion {
    config: FusionConfig,
    input_dims: Vec<usize>,
    has_concepts: bool,
    kind: FusionKind,
}

#[derive(Clone, Debug)]
enum FusionKind {
    Late { pyramids: Vec<TemporalPyramid>, out_proj: Linear },
    Early { projections: Vec<Linear>, pyramid: TemporalPyramid },
}

impl FeatureFusion {
    pub fn new(
        store: &mut ParamStore,
        config: FusionConfig,
        modality_dims: &[usize],
        concept_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut input_dims = modality_dims.to_vec();
        input_dims.extend(concept_dim);
        let streams = input_dims.len();
        let p = config.proj_dim;
        let name = |i: usize| {
            if i < modality_dims.len() {
                format!("fusion.modality{i}")
            } else {
                "fusion.concepts".to_string()
            }
        };
        let kind = match config.mode {
            FusionMode::Late => {
                let pyramids = input_dims
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| TemporalPyramid::new(store, &name(i), d, p, config.levels, rng))
                    .collect();
                let out_proj = Linear::new(store, "fusion.out", streams * p, config.model_dim, rng);
                FusionKind::Late { pyramids, out_proj }
            }
            FusionMode::Early => {
                let projections = input_dims
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| Linear::new(store, &format!("{}.proj", name(i)), d, p, rng))
                    .collect();
                let pyramid =
                    TemporalPyramid::new(store, "fusion.pyramid", streams * p, config.model_dim, config.levels, rng);
                FusionKind::Early { projections, pyramid }
            }
        };
        Self { config, input_dims, has_concepts: concept_dim.is_some(), kind }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        modalities: &[Var],
        concepts: Option<Var>,
        mask: &[bool],
    ) -> Result<MultiScaleFeature> {
        let mut streams = modalities.to_vec();
        match (concepts, self.has_concepts) {
            (Some(c), true) => streams.push(c),
            (None, false) => {}
            _ => return Err(DvcError::InvalidArgument("concept stream presence does not match fusion setup".into())),
        }
        if streams.len() != self.input_dims.len() {
            return Err(DvcError::Shape(format!(
                "expected {} feature streams, got {}",
                self.input_dims.len(),
                streams.len()
            )));
        }
        let t = g.shape(streams[0]).0;
        for (i, (&s, &d)) in streams.iter().zip(&self.input_dims).enumerate() {
            let (rows, cols) = g.shape(s);
            if rows != t {
                return Err(DvcError::Shape(format!("stream {i} has {rows} frames, stream 0 has {t}")));
            }
            if cols != d {
                return Err(DvcError::Shape(format!("stream {i} has dimension {cols}, expected {d}")));
            }
        }
        if mask.len() != t {
            return Err(DvcError::Shape(format!("mask length {} != frame count {t}", mask.len())));
        }
        match &self.kind {
            FusionKind::Late { pyramids, out_proj } => {
                let mut outs = Vec::with_capacity(streams.len());
                let mut layout = None;
                let mut out_mask = Vec::new();
                for (pyr, &s) in pyramids.iter().zip(&streams) {
                    let msf = pyr.forward(g, store, s, mask);
                    outs.push(msf.data);
                    layout = Some(msf.layout);
                    out_mask = msf.mask;
                }
                let cat = g.concat_cols(&outs);
                let data = out_proj.forward(g, store, cat);
                Ok(MultiScaleFeature { data, layout: layout.expect("at least one stream"), mask: out_mask })
            }
            FusionKind::Early { projections, pyramid } => {
                let projected: Vec<Var> =
                    projections.iter().zip(&streams).map(|(p, &s)| p.forward(g, store, s)).collect();
                let cat = g.concat_cols(&projected);
                Ok(pyramid.forward(g, store, cat, mask))
            }
        }
    }
}

/// Sinusoidal encoding of each row's normalised position within its level.
/// Even columns carry sines, odd columns cosines.
pub fn sinusoid_level_encoding(layout: &LevelLayout, dim: usize) -> Mat {
    let mut out = Array2::zeros((layout.total(), dim));
    for (row, (level, j)) in layout.positions().enumerate() {
        let x = j as f64 / layout.lengths()[level] as f64 * std::f64::consts::TAU;
        for k in 0..dim.div_ceil(2) {
            let freq = 10000f64.powf(2.0 * k as f64 / dim as f64);
            out[[row, 2 * k]] = (x / freq).sin();
            if 2 * k + 1 < dim {
                out[[row, 2 * k + 1]] = (x / freq).cos();
            }
        }
    }
    out
}

/// Sinusoidal position plus a learned per-level embedding.
#[derive(Clone, Debug)]
pub struct PositionalLevelEncoding {
    table: ParamId,
    dim: usize,
}

impl PositionalLevelEncoding {
    pub fn new(store: &mut ParamStore, num_levels: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = store.add_uniform("pos.level_embed", num_levels, dim, rng);
        Self { table, dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, layout: &LevelLayout) -> Var {
        let sin = g.constant(sinusoid_level_encoding(layout, self.dim));
        let table = g.param(store, self.table);
        let idx = layout.positions().map(|(l, _)| Some(l)).collect();
        let levels = g.gather_rows(table, idx);
        g.add(sin, levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn length_identity_examples() {
        assert_eq!(pyramid_length(1024, 3), 1920);
        assert_eq!(pyramid_length(7, 2), 13);
        assert_eq!(pyramid_length(9, 0), 9);
        assert_eq!(LevelLayout::new(7, 2).offsets(), vec![0, 7, 11]);
    }

    #[test]
    fn resize_cases() {
        let m = Array2::from_shape_fn((1024, 2), |(r, c)| (r + c) as f64);
        let (out, mask) = resize_to_fixed_length(&m, 1024).unwrap();
        assert_eq!(out, m);
        assert!(mask.iter().all(|&v| v));

        let constant = Array2::from_elem((2048, 3), 0.7);
        let (out, _) = resize_to_fixed_length(&constant, 1024).unwrap();
        assert_eq!(out.nrows(), 1024);
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let short = Array2::from_elem((1000, 2), 1.0);
        let (out, mask) = resize_to_fixed_length(&short, 1024).unwrap();
        assert_eq!(mask.iter().filter(|&&v| v).count(), 1000);
        assert!(out.slice(ndarray::s![1000.., ..]).iter().all(|&v| v == 0.0));
        assert!(!mask[1000] && mask[999]);

        assert!(resize_to_fixed_length(&Array2::zeros((0, 2)), 8).is_err());
    }

    #[test]
    fn interpolation_keeps_end_points() {
        let m = Array2::from_shape_fn((11, 1), |(r, _)| r as f64);
        let (out, _) = resize_to_fixed_length(&m, 6).unwrap();
        let got: Vec<f64> = out.column(0).to_vec();
        assert_eq!(got, vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn pyramid_shapes_and_masks() {
        let mut store = ParamStore::new();
        let pyr = TemporalPyramid::new(&mut store, "p", 3, 4, 2, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(Array2::from_elem((7, 3), 0.5));
        let mask = vec![true, true, true, true, true, false, false];
        let msf = pyr.forward(&mut g, &store, x, &mask);
        assert_eq!(g.shape(msf.data), (13, 4));
        assert_eq!(msf.layout.lengths(), &[7, 4, 2]);
        // level 1 windows: {-,0,1} {1,2,3} {3,4,5} {5,6,-}
        assert_eq!(&msf.mask[7..11], &[true, true, true, false]);
        assert_eq!(&msf.mask[11..13], &[true, true]);
    }

    #[test]
    fn empty_pyramid_is_the_projection() {
        let mut store = ParamStore::new();
        let pyr = TemporalPyramid::new(&mut store, "p", 3, 5, 0, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(Array2::from_elem((6, 3), 1.0));
        let msf = pyr.forward(&mut g, &store, x, &[true; 6]);
        assert_eq!(g.shape(msf.data), (6, 5));
        let expected = pyr.input_proj.forward(&mut g, &store, x);
        assert_eq!(g.value(msf.data), g.value(expected));
    }

    #[test]
    fn fusion_modes_share_the_layout() {
        for mode in [FusionMode::Early, FusionMode::Late] {
            let cfg = FusionConfig { mode, proj_dim: 4, model_dim: 6, levels: 3 };
            let mut store = ParamStore::new();
            let fusion = FeatureFusion::new(&mut store, cfg, &[3, 2], Some(5), &mut rng());
            let mut g = Graph::new();
            let a = g.constant(Array2::from_elem((64, 3), 0.1));
            let b = g.constant(Array2::from_elem((64, 2), 0.2));
            let c = g.constant(Array2::from_elem((64, 5), 0.3));
            let msf = fusion.forward(&mut g, &store, &[a, b], Some(c), &[true; 64]).unwrap();
            assert_eq!(g.shape(msf.data), (120, 6));
            assert_eq!(msf.layout.lengths(), &[64, 32, 16, 8]);

            let bad = g.constant(Array2::zeros((63, 2)));
            assert!(fusion.forward(&mut g, &store, &[a, bad], Some(c), &[true; 64]).is_err());
        }
    }

    #[test]
    fn dropping_the_concept_stream_keeps_model_dim() {
        let cfg = FusionConfig { mode: FusionMode::Late, proj_dim: 4, model_dim: 6, levels: 1 };
        let mut store = ParamStore::new();
        let fusion = FeatureFusion::new(&mut store, cfg, &[3], None, &mut rng());
        let mut g = Graph::new();
        let a = g.constant(Array2::from_elem((10, 3), 0.1));
        let msf = fusion.forward(&mut g, &store, &[a], None, &[true; 10]).unwrap();
        assert_eq!(g.shape(msf.data), (15, 6));
    }

    #[test]
    fn single_stream_late_fusion_is_projected_pyramid() {
        let cfg = FusionConfig { mode: FusionMode::Late, proj_dim: 4, model_dim: 6, levels: 2 };
        let mut store = ParamStore::new();
        let fusion = FeatureFusion::new(&mut store, cfg, &[3], None, &mut rng());
        let FusionKind::Late { pyramids, out_proj } = &fusion.kind else { unreachable!() };
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((9, 3), |(r, c)| (r * 3 + c) as f64 * 0.1));
        let fused = fusion.forward(&mut g, &store, &[x], None, &[true; 9]).unwrap();
        let direct = pyramids[0].forward(&mut g, &store, x, &[true; 9]);
        let projected = out_proj.forward(&mut g, &store, direct.data);
        assert_eq!(g.value(fused.data), g.value(projected));
    }

    #[test]
    fn sinusoid_structure() {
        let layout = LevelLayout::new(8, 2);
        let enc = sinusoid_level_encoding(&layout, 6);
        assert_eq!(enc.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // row 4 of level 0 (4/8) and row 2 of level 1 (2/4) share a normalised position
        assert_eq!(enc.row(4), enc.row(8 + 2));
        let mut store = ParamStore::new();
        let pe = PositionalLevelEncoding::new(&mut store, 3, 6, &mut rng());
        let mut g = Graph::new();
        let full = pe.forward(&mut g, &store, &layout);
        let v = g.value(full);
        let diff = &v.row(4) - &v.row(10);
        let table = store.value(pe.table);
        let level_diff = &table.row(0) - &table.row(1);
        for (a, b) in diff.iter().zip(level_diff.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn layout_matches_ceiling_sum(t in 1usize..=4096, levels in 0usize..=6) {
            let expected: usize = (0..=levels).map(|l| t.div_ceil(1 << l)).sum();
            prop_assert_eq!(pyramid_length(t, levels), expected);
            prop_assert_eq!(pool_mask(&vec![true; t]).len(), t.div_ceil(2));
        }
    }
}
