//! Flat JSON run configuration. Keys are dotted strings; unknown keys and
//! invalid values are reported together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{DvcError, Result};
use crate::pyramid::FusionMode;
use crate::training::{CostWeights, FocalParams, LossWeights, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(rename = "data.train")]
    pub train_manifest: PathBuf,
    #[serde(rename = "data.eval")]
    pub eval_manifest: Option<PathBuf>,
    #[serde(rename = "data.lexicon")]
    pub lexicon: PathBuf,
    #[serde(rename = "labels.size")]
    pub labels: usize,

    #[serde(rename = "concepts.enabled")]
    pub concepts_enabled: bool,
    #[serde(rename = "concepts.count")]
    pub concepts: usize,
    #[serde(rename = "concepts.modality")]
    pub concept_modality: usize,
    #[serde(rename = "concepts.hidden")]
    pub concept_hidden: Vec<usize>,
    #[serde(rename = "concepts.epochs")]
    pub concept_epochs: usize,
    #[serde(rename = "concepts.lr")]
    pub concept_lr: f64,
    #[serde(rename = "concepts.batchSize")]
    pub concept_batch: usize,

    #[serde(rename = "fusion.mode")]
    pub fusion: FusionMode,
    #[serde(rename = "fusion.projDim")]
    pub proj_dim: usize,
    #[serde(rename = "pyramid.levels")]
    pub levels: usize,
    #[serde(rename = "resize.length")]
    pub resize_length: usize,
    #[serde(rename = "model.dim")]
    pub model_dim: usize,
    #[serde(rename = "model.ffnDim")]
    pub ffn_dim: usize,
    #[serde(rename = "encoder.layers")]
    pub encoder_layers: usize,
    #[serde(rename = "decoder.layers")]
    pub decoder_layers: usize,
    #[serde(rename = "attention.heads")]
    pub heads: usize,
    #[serde(rename = "attention.points")]
    pub points: usize,
    #[serde(rename = "queries.count")]
    pub queries: usize,

    #[serde(rename = "caption.maxLen")]
    pub caption_max_len: usize,
    #[serde(rename = "caption.embedDim")]
    pub caption_embed_dim: usize,
    #[serde(rename = "caption.hiddenDim")]
    pub caption_hidden_dim: usize,
    #[serde(rename = "caption.minFreq")]
    pub caption_min_freq: usize,
    #[serde(rename = "classification.enabled")]
    pub classification: bool,
    #[serde(rename = "counter.maxEvents")]
    pub max_events: usize,

    #[serde(rename = "focal.gamma")]
    pub focal_gamma: f64,
    #[serde(rename = "focal.alpha")]
    pub focal_alpha: f64,
    #[serde(rename = "loss.caption")]
    pub w_caption: f64,
    #[serde(rename = "loss.loc")]
    pub w_loc: f64,
    #[serde(rename = "loss.cls")]
    pub w_cls: f64,
    #[serde(rename = "loss.counter")]
    pub w_counter: f64,
    #[serde(rename = "match.loc")]
    pub c_loc: f64,
    #[serde(rename = "match.cls")]
    pub c_cls: f64,

    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    #[serde(rename = "optim.gradClip")]
    pub grad_clip: Option<f64>,
}

impl Default for RunConfig {
    /// Operating point of the full-scale model.
    fn default() -> Self {
        Self {
            train_manifest: "data/manifest.json".into(),
            eval_manifest: None,
            lexicon: "data/lexicon.json".into(),
            labels: 25,
            concepts_enabled: true,
            concepts: 100,
            concept_modality: 0,
            concept_hidden: vec![256],
            concept_epochs: 50,
            concept_lr: 1e-3,
            concept_batch: 64,
            fusion: FusionMode::Late,
            proj_dim: 256,
            levels: 4,
            resize_length: 1024,
            model_dim: 256,
            ffn_dim: 1024,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 8,
            points: 4,
            queries: 35,
            caption_max_len: 20,
            caption_embed_dim: 128,
            caption_hidden_dim: 256,
            caption_min_freq: 1,
            classification: true,
            max_events: 10,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            w_caption: 1.0,
            w_loc: 2.0,
            w_cls: 1.0,
            w_counter: 0.5,
            c_loc: 2.0,
            c_cls: 1.0,
            seed: 0,
            epochs: 30,
            lr: 1e-4,
            grad_clip: Some(1.0),
        }
    }
}

fn defaults_map() -> Map<String, Value> {
    match serde_json::to_value(RunConfig::default()).expect("serialisable") {
        Value::Object(m) => m,
        _ => unreachable!("struct serialises to an object"),
    }
}

impl RunConfig {
    /// Every accepted key with its default value.
    pub fn documented_keys() -> Vec<(String, String)> {
        defaults_map().into_iter().map(|(k, v)| (k, v.to_string())).collect()
    }

    /// Overlay `overrides` on the defaults. Every unknown key, badly typed
    /// value and out-of-range setting is reported in one error.
    pub fn from_map(overrides: &Map<String, Value>) -> Result<Self> {
        let defaults = defaults_map();
        let mut problems = Vec::new();
        let mut merged = defaults.clone();
        for (k, v) in overrides {
            if !defaults.contains_key(k) {
                problems.push(format!("{k}: unknown key"));
                continue;
            }
            let mut single = defaults.clone();
            single.insert(k.clone(), v.clone());
            match serde_json::from_value::<RunConfig>(Value::Object(single)) {
                Ok(_) => {
                    merged.insert(k.clone(), v.clone());
                }
                Err(e) => problems.push(format!("{k}: {e}")),
            }
        }
        if !problems.is_empty() {
            return Err(DvcError::Config(problems));
        }
        let config: RunConfig = serde_json::from_value(Value::Object(merged))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| DvcError::Config(vec![format!("{}: {e}", path.display())]))?;
        match serde_json::from_str::<Value>(&text)? {
            Value::Object(m) => Self::from_map(&m),
            _ => Err(DvcError::Config(vec![format!("{}: expected a JSON object", path.display())])),
        }
    }

    /// Apply `key=value` overrides; values parse as JSON, falling back to strings.
    pub fn with_overrides<S: AsRef<str>>(&self, pairs: &[S]) -> Result<Self> {
        let mut map = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!("struct serialises to an object"),
        };
        let mut problems = Vec::new();
        for p in pairs {
            let p = p.as_ref();
            match p.split_once('=') {
                Some((k, v)) => {
                    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
                    map.insert(k.trim().to_string(), value);
                }
                None => problems.push(format!("{p}: expected key=value")),
            }
        }
        if !problems.is_empty() {
            return Err(DvcError::Config(problems));
        }
        Self::from_map(&map)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut positive = |key: &str, v: usize| {
            if v == 0 {
                problems.push(format!("{key}: must be ≥ 1"));
            }
        };
        positive("labels.size", self.labels);
        positive("fusion.projDim", self.proj_dim);
        positive("resize.length", self.resize_length);
        positive("model.dim", self.model_dim);
        positive("model.ffnDim", self.ffn_dim);
        positive("attention.heads", self.heads);
        positive("attention.points", self.points);
        positive("queries.count", self.queries);
        positive("caption.maxLen", self.caption_max_len);
        positive("caption.embedDim", self.caption_embed_dim);
        positive("caption.hiddenDim", self.caption_hidden_dim);
        positive("caption.minFreq", self.caption_min_freq);
        positive("counter.maxEvents", self.max_events);
        positive("concepts.batchSize", self.concept_batch);
        if self.concepts_enabled {
            positive("concepts.count", self.concepts);
        }
        if self.heads > 0 && !self.model_dim.is_multiple_of(self.heads) {
            problems.push(format!("attention.heads: {} does not divide model.dim {}", self.heads, self.model_dim));
        }
        for (key, v) in [
            ("focal.gamma", self.focal_gamma),
            ("loss.caption", self.w_caption),
            ("loss.loc", self.w_loc),
            ("loss.cls", self.w_cls),
            ("loss.counter", self.w_counter),
            ("match.loc", self.c_loc),
            ("match.cls", self.c_cls),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{key}: must be finite and ≥ 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            problems.push("focal.alpha: must lie in [0, 1]".into());
        }
        for (key, v) in [("lr", self.lr), ("concepts.lr", self.concept_lr)] {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("{key}: must be finite and > 0"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                problems.push("optim.gradClip: must be > 0 or null".into());
            }
        }
        if [self.w_caption, self.w_loc, self.w_cls, self.w_counter].iter().all(|&w| w == 0.0) {
            problems.push("loss.*: weights must not all be zero".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DvcError::Config(problems))
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            grad_clip: self.grad_clip,
            weights: LossWeights {
                caption: self.w_caption,
                loc: self.w_loc,
                cls: if self.classification { self.w_cls } else { 0.0 },
                counter: self.w_counter,
            },
            cost: CostWeights { loc: self.c_loc, cls: self.c_cls },
            focal: FocalParams { gamma: self.focal_gamma, alpha: self.focal_alpha },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("serialisable").as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
