//! End-to-end stages with their on-disk artifacts. Each stage has an
//! in-memory form (used by tests) and a directory form (used by the CLI).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concepts::{
    build_concept_vocabulary, collect_training_frames, micro_f1, ConceptDetector, ConceptVocabulary, DetectorConfig,
    DetectorTraining,
};
use crate::config::{hex_digest, RunConfig};
use crate::data::{
    build_text_vocabulary, generate_synthetic_dataset, load_dataset, read_lexicon, write_dataset, write_lexicon,
    PosLexicon, TextVocabulary, VideoRecord,
};
use crate::error::{DvcError, Result};
use crate::eval::{evaluate_dvc, read_ground_truth, EvalReport, DEFAULT_THRESHOLDS};
use crate::inference::{predict_video, read_predictions, to_predictions, write_predictions, DvcResult, Predictions};
use crate::model::{prepare_video, DvcModel, ModelConfig, PreparedVideo};
use crate::training::{train_model, LossBreakdown};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SyntheticSpec {
    pub seed: u64,
    pub videos: usize,
    pub max_events: usize,
    pub feature_dim: usize,
    pub modalities: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { seed: 0, videos: 20, max_events: 5, feature_dim: 32, modalities: 2 }
    }
}

/// Settings sized for a laptop CPU and the synthetic data.
pub fn desk_config(data_dir: &Path, label_space: usize) -> RunConfig {
    RunConfig {
        train_manifest: data_dir.join("manifest.json"),
        eval_manifest: None,
        lexicon: data_dir.join("lexicon.json"),
        labels: label_space,
        concepts: 20,
        concept_hidden: vec![256],
        proj_dim: 64,
        levels: 3,
        resize_length: 96,
        model_dim: 128,
        ffn_dim: 256,
        queries: 10,
        epochs: 200,
        lr: 5e-4,
        ..RunConfig::default()
    }
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() && !force {
        return Err(DvcError::InvalidArgument(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Write a synthetic dataset, its POS lexicon and a matching desk config.
pub fn make_synthetic(dir: &Path, spec: &SyntheticSpec, force: bool) -> Result<RunConfig> {
    ensure_empty_dir(dir, force)?;
    let data = generate_synthetic_dataset(spec.seed, spec.videos, spec.max_events, spec.feature_dim, spec.modalities)?;
    write_dataset(dir, &data.records)?;
    write_lexicon(&dir.join("lexicon.json"), &data.lexicon)?;
    std::fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&data.label_names)?)?;
    std::fs::write(dir.join("synthetic.json"), serde_json::to_string_pretty(spec)?)?;
    let config = RunConfig { seed: spec.seed, ..desk_config(Path::new("."), data.label_space()) };
    config.save(&dir.join(CONFIG_FILE))?;
    Ok(config)
}

/// Resolve a config's relative data paths against `base`.
pub fn resolve_paths(config: &RunConfig, base: &Path) -> RunConfig {
    let fix = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    RunConfig {
        train_manifest: fix(&config.train_manifest),
        eval_manifest: config.eval_manifest.as_deref().map(fix),
        lexicon: fix(&config.lexicon),
        ..config.clone()
    }
}

pub struct ConceptRun {
    pub vocab: ConceptVocabulary,
    pub detector: ConceptDetector,
    pub curve: Vec<f64>,
    /// Training-set micro-F1 at threshold 0.5.
    pub f1: f64,
}

pub fn fit_concepts(records: &[VideoRecord], lexicon: &PosLexicon, config: &RunConfig) -> Result<ConceptRun> {
    let vocab = build_concept_vocabulary(records, lexicon, config.concepts)?;
    let (features, targets, mask) = collect_training_frames(records, &vocab, config.concept_modality)?;
    let mut detector = ConceptDetector::new(
        DetectorConfig { input_dim: features.ncols(), hidden: config.concept_hidden.clone(), concepts: vocab.len() },
        config.seed,
    );
    let opts = DetectorTraining {
        gamma: config.focal_gamma,
        alpha: config.focal_alpha,
        epochs: config.concept_epochs,
        lr: config.concept_lr,
        batch_size: config.concept_batch,
        seed: config.seed,
    };
    let curve = detector.train(&features, &targets, &mask, &opts)?;
    let f1 = micro_f1(&detector.detect(&features)?, &targets, &mask, 0.5);
    detector.store.freeze_all();
    Ok(ConceptRun { vocab, detector, curve, f1 })
}

pub fn save_concepts(run: &ConceptRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.detector.save(dir)?;
    run.vocab.save(&dir.join("concepts.json"))?;
    std::fs::write(
        dir.join("curve.json"),
        serde_json::to_string_pretty(&serde_json::json!({"loss": run.curve, "microF1": run.f1}))?,
    )?;
    Ok(())
}

pub fn load_concepts(dir: &Path) -> Result<(ConceptVocabulary, ConceptDetector)> {
    let vocab = ConceptVocabulary::load(&dir.join("concepts.json"))
        .map_err(|e| DvcError::Checkpoint(format!("{}: {e}", dir.join("concepts.json").display())))?;
    let mut detector = ConceptDetector::load(dir)?;
    detector.store.freeze_all();
    Ok((vocab, detector))
}

pub fn model_config(config: &RunConfig, records: &[VideoRecord], vocab: &TextVocabulary) -> Result<ModelConfig> {
    let first = records.first().ok_or_else(|| DvcError::InvalidArgument("empty dataset".into()))?;
    Ok(ModelConfig {
        fusion: config.fusion,
        levels: config.levels,
        model_dim: config.model_dim,
        proj_dim: config.proj_dim,
        ffn_dim: config.ffn_dim,
        resize_length: config.resize_length,
        encoder_layers: config.encoder_layers,
        decoder_layers: config.decoder_layers,
        heads: config.heads,
        points: config.points,
        queries: config.queries,
        caption_max_len: config.caption_max_len,
        caption_embed_dim: config.caption_embed_dim,
        caption_hidden_dim: config.caption_hidden_dim,
        labels: config.labels,
        classification: config.classification,
        max_events: config.max_events,
        concepts: config.concepts_enabled.then_some(config.concepts),
        modality_dims: first.modality_features.iter().map(|m| m.ncols()).collect(),
        vocab_size: vocab.len(),
    })
}

pub fn prepare_all(
    records: &[VideoRecord],
    model: &ModelConfig,
    vocab: &TextVocabulary,
    detector: Option<&ConceptDetector>,
    concept_modality: usize,
) -> Result<Vec<PreparedVideo>> {
    records.iter().map(|r| prepare_video(r, model, vocab, detector.map(|d| (d, concept_modality)))).collect()
}

pub struct TrainRun {
    pub model: DvcModel,
    pub vocab: TextVocabulary,
    pub curve: Vec<LossBreakdown>,
}

pub fn fit_model(
    records: &[VideoRecord],
    config: &RunConfig,
    detector: Option<&ConceptDetector>,
    on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainRun> {
    if config.concepts_enabled && detector.is_none() {
        return Err(DvcError::InvalidArgument("concepts are enabled but no concept detector was given".into()));
    }
    let detector = if config.concepts_enabled { detector } else { None };
    if let Some(d) = detector {
        if d.config.concepts != config.concepts {
            return Err(DvcError::InvalidArgument(format!(
                "concept detector predicts {} concepts, config asks for {}",
                d.config.concepts, config.concepts
            )));
        }
    }
    let vocab = build_text_vocabulary(records, config.caption_min_freq)?;
    let mc = model_config(config, records, &vocab)?;
    let videos = prepare_all(records, &mc, &vocab, detector, config.concept_modality)?;
    let mut model = DvcModel::new(mc, config.seed)?;
    let curve = train_model(&mut model, &videos, &config.train_options(), on_epoch)?;
    Ok(TrainRun { model, vocab, curve })
}

pub fn predict_records(
    model: &DvcModel,
    vocab: &TextVocabulary,
    detector: Option<&ConceptDetector>,
    concept_modality: usize,
    records: &[VideoRecord],
) -> Result<Vec<DvcResult>> {
    let videos = prepare_all(records, &model.config, vocab, detector, concept_modality)?;
    videos.iter().map(|v| predict_video(model, v, vocab)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct CheckpointInfo {
    config_hash: String,
    parameters: usize,
    concepts: bool,
}

/// Model parameters, vocabulary, config snapshot and (if used) the frozen
/// concept detector, in one directory.
pub fn save_checkpoint(
    dir: &Path,
    run: &TrainRun,
    config: &RunConfig,
    concepts: Option<(&ConceptVocabulary, &ConceptDetector)>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.model.save(&dir.join("model"))?;
    std::fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(&run.vocab)?)?;
    config.save(&dir.join(CONFIG_FILE))?;
    std::fs::write(dir.join("curve.json"), serde_json::to_string_pretty(&run.curve)?)?;
    if let Some((vocab, det)) = concepts {
        let cdir = dir.join("concepts");
        std::fs::create_dir_all(&cdir)?;
        det.save(&cdir)?;
        vocab.save(&cdir.join("concepts.json"))?;
    }
    let info = CheckpointInfo {
        config_hash: config.hash(),
        parameters: run.model.store.num_scalars(),
        concepts: concepts.is_some(),
    };
    std::fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: DvcModel,
    pub vocab: TextVocabulary,
    pub concepts: Option<(ConceptVocabulary, ConceptDetector)>,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let info: CheckpointInfo = serde_json::from_str(
        &std::fs::read_to_string(dir.join("checkpoint.json"))
            .map_err(|e| DvcError::Checkpoint(format!("{}: {e}", dir.join("checkpoint.json").display())))?,
    )?;
    if info.config_hash != config.hash() {
        return Err(DvcError::Checkpoint(format!("{}: config does not match checkpoint hash", dir.display())));
    }
    let model = DvcModel::load(&dir.join("model"))?;
    let vocab: TextVocabulary = serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
    let concepts = if info.concepts { Some(load_concepts(&dir.join("concepts"))?) } else { None };
    Ok(Checkpoint { config, model, vocab, concepts })
}

/// `train-concepts`: fit the detector on the training manifest.
pub fn run_train_concepts(config: &RunConfig, out: &Path) -> Result<ConceptRun> {
    let records = load_dataset(&config.train_manifest, config.labels)?;
    let lexicon = read_lexicon(&config.lexicon)?;
    let run = fit_concepts(&records, &lexicon, config)?;
    save_concepts(&run, out)?;
    config.save(&out.join(CONFIG_FILE))?;
    Ok(run)
}

/// `train`: fit the captioning model, freezing a previously trained detector.
pub fn run_train(
    config: &RunConfig,
    concepts_dir: Option<&Path>,
    out: &Path,
    on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainRun> {
    let records = load_dataset(&config.train_manifest, config.labels)?;
    let concepts = match (config.concepts_enabled, concepts_dir) {
        (true, Some(dir)) => Some(load_concepts(dir)?),
        (true, None) => {
            return Err(DvcError::InvalidArgument(
                "concepts are enabled: pass a concept checkpoint or disable concepts".into(),
            ))
        }
        (false, _) => None,
    };
    let run = fit_model(&records, config, concepts.as_ref().map(|c| &c.1), on_epoch)?;
    save_checkpoint(out, &run, config, concepts.as_ref().map(|(v, d)| (v, d)))?;
    Ok(run)
}

/// `predict`: write submission-shaped predictions for `manifest`.
pub fn run_predict(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<Predictions> {
    let ck = load_checkpoint(checkpoint)?;
    let records = load_dataset(manifest, ck.config.labels)?;
    let results = predict_records(
        &ck.model,
        &ck.vocab,
        ck.concepts.as_ref().map(|c| &c.1),
        ck.config.concept_modality,
        &records,
    )?;
    let predictions = to_predictions(&results);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_predictions(out, &predictions)?;
    ck.config.save(&snapshot_path(out))?;
    Ok(predictions)
}

/// `evaluate`: score a prediction file and write `report.json`-style output.
pub fn run_evaluate(predictions: &Path, manifest: &Path, out: &Path) -> Result<EvalReport> {
    let preds = read_predictions(predictions)?;
    let gt = read_ground_truth(manifest)?;
    let report = evaluate_dvc(&preds, &gt, &DEFAULT_THRESHOLDS);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.with_extension("txt"), report.table())?;
    Ok(report)
}

/// `<file>.config.json` beside an output file.
pub fn snapshot_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    out.with_file_name(name)
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex_digest(&std::fs::read(path)?))
}
