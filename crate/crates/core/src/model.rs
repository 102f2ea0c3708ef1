//! The assembled captioning model and the per-video tensors it consumes.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamStore, Var};
use crate::concepts::ConceptDetector;
use crate::data::{TextVocabulary, VideoRecord};
use crate::error::{DvcError, Result};
use crate::heads::{CaptionHead, ClassificationHead, CounterVars, EventCounter, LocalizationHead};
use crate::pyramid::{resize_to_fixed_length, FeatureFusion, FusionConfig, FusionMode, PositionalLevelEncoding};
use crate::transformer::{Decoder, DeformableAttentionConfig, Encoder, EventQuerySet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelConfig {
    pub fusion: FusionMode,
    pub levels: usize,
    pub model_dim: usize,
    pub proj_dim: usize,
    pub ffn_dim: usize,
    pub resize_length: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub queries: usize,
    pub caption_max_len: usize,
    pub caption_embed_dim: usize,
    pub caption_hidden_dim: usize,
    pub labels: usize,
    pub classification: bool,
    pub max_events: usize,
    /// Concept count when the concept stream is enabled.
    pub concepts: Option<usize>,
    pub modality_dims: Vec<usize>,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn attention(&self) -> DeformableAttentionConfig {
        DeformableAttentionConfig {
            heads: self.heads,
            points: self.points,
            levels: self.levels + 1,
            model_dim: self.model_dim,
        }
    }
}

/// Everything one video contributes to a forward pass, already resized to
/// the model's fixed length. Normalised time `u ∈ [0, 1]` maps to `u · extent` seconds.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub id: String,
    pub duration: f64,
    pub extent: f64,
    pub modalities: Vec<Mat>,
    pub concepts: Option<Mat>,
    pub mask: Vec<bool>,
    /// `G × 2` normalised ground-truth intervals.
    pub gt_intervals: Mat,
    pub gt_captions: Vec<Vec<usize>>,
    /// `G × labels` binary label targets.
    pub gt_labels: Mat,
}

impl PreparedVideo {
    pub fn num_events(&self) -> usize {
        self.gt_intervals.nrows()
    }
}

/// Resize features (and detected concepts) to `resize_length` and normalise
/// ground truth onto the resized time axis.
pub fn prepare_video(
    record: &VideoRecord,
    config: &ModelConfig,
    vocab: &TextVocabulary,
    detector: Option<(&ConceptDetector, usize)>,
) -> Result<PreparedVideo> {
    let t_raw = record.frame_count();
    if record.modality_features.len() != config.modality_dims.len() {
        return Err(DvcError::Shape(format!(
            "video {} has {} modalities, model expects {}",
            record.id,
            record.modality_features.len(),
            config.modality_dims.len()
        )));
    }
    let mut modalities = Vec::with_capacity(record.modality_features.len());
    let mut mask = Vec::new();
    for (m, &d) in record.modality_features.iter().zip(&config.modality_dims) {
        if m.ncols() != d {
            return Err(DvcError::Shape(format!(
                "video {}: modality dimension {} != expected {d}",
                record.id,
                m.ncols()
            )));
        }
        let (resized, mk) = resize_to_fixed_length(m, config.resize_length)?;
        modalities.push(resized);
        mask = mk;
    }
    let concepts = match (config.concepts, detector) {
        (Some(_), Some((det, modality))) => {
            let raw = record.modality_features.get(modality).ok_or_else(|| {
                DvcError::InvalidArgument(format!("concept modality {modality} missing in video {}", record.id))
            })?;
            Some(resize_to_fixed_length(&det.detect(raw)?, config.resize_length)?.0)
        }
        (None, _) => None,
        (Some(_), None) => {
            return Err(DvcError::InvalidArgument("concept stream enabled but no detector given".into()));
        }
    };
    let extent = record.duration * (config.resize_length as f64 / t_raw as f64).max(1.0);
    let g = record.events.len();
    let mut gt_intervals = Array2::zeros((g, 2));
    let mut gt_labels = Array2::zeros((g, config.labels));
    let mut gt_captions = Vec::with_capacity(g);
    for (i, e) in record.events.iter().enumerate() {
        gt_intervals[[i, 0]] = (e.timestamp.start / extent).clamp(0.0, 1.0);
        gt_intervals[[i, 1]] = (e.timestamp.end / extent).clamp(0.0, 1.0);
        for &l in &e.labels {
            if l >= config.labels {
                return Err(DvcError::Validation(format!("video {}: label {l} outside label space", record.id)));
            }
            gt_labels[[i, l]] = 1.0;
        }
        gt_captions.push(vocab.encode(&e.caption));
    }
    Ok(PreparedVideo {
        id: record.id.clone(),
        duration: record.duration,
        extent,
        modalities,
        concepts,
        mask,
        gt_intervals,
        gt_captions,
        gt_labels,
    })
}

/// Graph nodes of every head for one video.
pub struct HeadVars {
    pub hidden: Var,
    pub intervals: Var,
    pub cls: Option<Var>,
    pub counter: CounterVars,
}

#[derive(Clone, Debug)]
pub struct DvcModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    fusion: FeatureFusion,
    pos: PositionalLevelEncoding,
    encoder: Encoder,
    queries: EventQuerySet,
    decoder: Decoder,
    pub loc: LocalizationHead,
    pub cls: Option<ClassificationHead>,
    pub counter: EventCounter,
    pub caption: CaptionHead,
}

impl DvcModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let attn = config.attention();
        attn.validate()?;
        if config.queries == 0 {
            return Err(DvcError::InvalidArgument("queries.count must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let fusion = FeatureFusion::new(
            &mut store,
            FusionConfig { mode: config.fusion, proj_dim: config.proj_dim, model_dim: d, levels: config.levels },
            &config.modality_dims,
            config.concepts,
            &mut rng,
        );
        let pos = PositionalLevelEncoding::new(&mut store, config.levels + 1, d, &mut rng);
        let encoder = Encoder::new(&mut store, config.encoder_layers, attn, config.ffn_dim, &mut rng)?;
        let queries = EventQuerySet::new(&mut store, config.queries, d, &mut rng);
        let decoder = Decoder::new(&mut store, config.decoder_layers, attn, config.ffn_dim, &mut rng)?;
        let loc = LocalizationHead::new(&mut store, d, &mut rng);
        let cls = config.classification.then(|| ClassificationHead::new(&mut store, d, config.labels, &mut rng));
        let counter = EventCounter::new(&mut store, d, config.max_events, &mut rng);
        let caption = CaptionHead::new(
            &mut store,
            d,
            config.vocab_size,
            config.caption_embed_dim,
            config.caption_hidden_dim,
            config.caption_max_len,
            &mut rng,
        );
        Ok(Self { config, store, fusion, pos, encoder, queries, decoder, loc, cls, counter, caption })
    }

    pub fn forward(&self, g: &mut Graph, video: &PreparedVideo) -> Result<HeadVars> {
        let store = &self.store;
        let mods: Vec<Var> = video.modalities.iter().map(|m| g.constant(m.clone())).collect();
        let concepts = video.concepts.as_ref().map(|c| g.constant(c.clone()));
        let fused = self.fusion.forward(g, store, &mods, concepts, &video.mask)?;
        let pos = self.pos.forward(g, store, &fused.layout);
        let encoded = self.encoder.forward(g, store, &fused, pos)?;
        let (q, ref_logits) = self.queries.forward(g, store);
        let decoded = self.decoder.forward(g, store, q, ref_logits, &encoded)?;
        let hidden = decoded.hidden;
        let intervals = self.loc.forward(g, store, hidden);
        let cls = self.cls.as_ref().map(|h| h.forward(g, store, hidden));
        let counter = self.counter.forward(g, store, hidden);
        Ok(HeadVars { hidden, intervals, cls, counter })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("model.json"))
            .map_err(|e| DvcError::Checkpoint(format!("{}: {e}", dir.join("model.json").display())))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(config, 0)?;
        model.store.load_into(dir)?;
        Ok(model)
    }
}
