//! Matching cost, loss composition and training-loop contracts.

use dvc_core::autograd::{Graph, Mat};
use dvc_core::config::RunConfig;
use dvc_core::data::{generate_synthetic_dataset, TextVocabulary};
use dvc_core::heads::CounterVars;
use dvc_core::model::{DvcModel, HeadVars, ModelConfig, PreparedVideo};
use dvc_core::pipeline::{desk_config, fit_concepts, fit_model};
use dvc_core::pyramid::FusionMode;
use dvc_core::training::{
    compute_losses, focal_loss, hungarian_match, matching_cost, CostWeights, FocalParams, LossWeights,
};
use dvc_core::DvcError;
use ndarray::{array, Array2};
use proptest::prelude::*;

fn tiny_config(queries: usize, labels: usize, max_events: usize, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        fusion: FusionMode::Late,
        levels: 1,
        model_dim: 8,
        proj_dim: 8,
        ffn_dim: 16,
        resize_length: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        points: 2,
        queries,
        caption_max_len: 20,
        caption_embed_dim: 4,
        caption_hidden_dim: 6,
        labels,
        classification: true,
        max_events,
        concepts: None,
        modality_dims: vec![3],
        vocab_size,
    }
}

fn video(gt_intervals: Mat, gt_labels: Mat, captions: Vec<Vec<usize>>) -> PreparedVideo {
    PreparedVideo {
        id: "fixture".into(),
        duration: 10.0,
        extent: 10.0,
        modalities: vec![Array2::zeros((8, 3))],
        concepts: None,
        mask: vec![true; 8],
        gt_intervals,
        gt_labels,
        gt_captions: captions,
    }
}

struct Fixture {
    g: Graph,
    heads: HeadVars,
}

fn constant_heads(intervals: Mat, cls: Option<Mat>, counter: Vec<f64>, dim: usize) -> Fixture {
    let mut g = Graph::new();
    let n = intervals.nrows();
    let hidden = g.constant(Array2::from_shape_fn((n, dim), |(r, c)| ((r * dim + c) as f64 * 0.37).sin()));
    let intervals = g.constant(intervals);
    let cls = cls.map(|c| g.constant(c));
    let k = counter.len();
    let probs = g.constant(Array2::from_shape_vec((1, k), counter.clone()).unwrap());
    let log_probs = g.constant(Array2::from_shape_vec((1, k), counter.iter().map(|p| p.ln()).collect()).unwrap());
    Fixture { g, heads: HeadVars { hidden, intervals, cls, counter: CounterVars { probs, log_probs } } }
}

/// Values from `oracles/loss_fixture.py`.
#[test]
fn loss_fixture_matches_oracle() {
    let intervals = array![[0.1, 0.4], [0.5, 0.9], [0.2, 0.3]];
    let cls = array![[0.8, 0.1, 0.2], [0.3, 0.7, 0.6], [0.5, 0.5, 0.5]];
    let gt = array![[0.1, 0.5], [0.6, 0.8]];
    let labels = array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]];
    let focal = FocalParams::default();
    let cost = matching_cost(&intervals, Some(&cls), &gt, &labels, CostWeights::default(), focal);
    let m = hungarian_match(&cost).unwrap();
    assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);

    let vocab = TextVocabulary::from_words(["apply", "blush", "lips"].map(String::from));
    let model = DvcModel::new(tiny_config(3, 3, 3, vocab.len()), 4).unwrap();
    let v = video(gt, labels, vec![vec![4, 5], vec![4, 6]]);
    let mut fx = constant_heads(intervals, Some(cls), vec![0.1, 0.2, 0.6, 0.1], 8);
    let weights = LossWeights::default();
    let obj = compute_losses(&mut fx.g, &model, &fx.heads, &v, &m, &weights, focal).unwrap();
    let b = obj.breakdown;
    assert!((b.loc - 0.3749999999999999).abs() < 1e-12);
    assert!((b.cls - 0.05023833387667742).abs() < 1e-12);
    assert!((b.counter - 0.5108256237659907).abs() < 1e-12);
    assert!((b.total - (b.caption + 1.0556511457596724)).abs() < 1e-12);
    assert!((b.total - b.weighted_total(&weights)).abs() < 1e-12);
    assert!(b.caption > 0.0);
}

#[test]
fn caption_loss_is_token_mean_cross_entropy() {
    let vocab = TextVocabulary::from_words(["apply", "blush", "lips"].map(String::from));
    let model = DvcModel::new(tiny_config(2, 2, 3, vocab.len()), 1).unwrap();
    let gt = array![[0.0, 0.5]];
    let v = video(gt, array![[1.0, 0.0]], vec![vec![4, 5, 6]]);
    let mut fx = constant_heads(array![[0.0, 0.5], [0.5, 1.0]], None, vec![0.25; 4], 8);
    let m = hungarian_match(&matching_cost(
        fx.g.value(fx.heads.intervals),
        None,
        &v.gt_intervals,
        &v.gt_labels,
        CostWeights::default(),
        FocalParams::default(),
    ))
    .unwrap();
    let obj =
        compute_losses(&mut fx.g, &model, &fx.heads, &v, &m, &LossWeights::default(), FocalParams::default()).unwrap();

    let mut g = Graph::new();
    let row = g.constant(fx.g.value(fx.heads.hidden).slice(ndarray::s![0..1, ..]).to_owned());
    let tf = model.caption.teacher_forcing(&mut g, &model.store, row, &[vec![4, 5, 6]]).unwrap();
    let lp = g.value(tf.log_probs);
    let targets = [4, 5, 6, 2];
    let expected = -targets.iter().enumerate().map(|(t, &id)| lp[[t, id]]).sum::<f64>() / 4.0;
    assert!((obj.breakdown.caption - expected).abs() < 1e-12);
    assert_eq!(obj.breakdown.loc, 0.0);
}

#[test]
fn counter_target_is_clamped_to_max_events() {
    let vocab = TextVocabulary::from_words(["a"].map(String::from));
    let model = DvcModel::new(tiny_config(5, 1, 3, vocab.len()), 0).unwrap();
    let gt = Array2::from_shape_fn((4, 2), |(r, c)| 0.2 * r as f64 + 0.1 * c as f64);
    let v = video(gt.clone(), Array2::zeros((4, 1)), vec![vec![4]; 4]);
    let intervals = Array2::from_shape_fn((5, 2), |(r, c)| 0.15 * r as f64 + 0.1 * c as f64);
    let mut fx = constant_heads(intervals, None, vec![0.1, 0.1, 0.1, 0.7], 8);
    let cost = matching_cost(
        fx.g.value(fx.heads.intervals),
        None,
        &gt,
        &v.gt_labels,
        CostWeights::default(),
        FocalParams::default(),
    );
    let m = hungarian_match(&cost).unwrap();
    let obj =
        compute_losses(&mut fx.g, &model, &fx.heads, &v, &m, &LossWeights::default(), FocalParams::default()).unwrap();
    assert!((obj.breakdown.counter + 0.7f64.ln()).abs() < 1e-12);
}

#[test]
fn video_without_events_only_has_label_and_counter_terms() {
    let vocab = TextVocabulary::from_words(["a"].map(String::from));
    let model = DvcModel::new(tiny_config(2, 2, 3, vocab.len()), 0).unwrap();
    let v = video(Array2::zeros((0, 2)), Array2::zeros((0, 2)), vec![]);
    let cls = array![[0.3, 0.6], [0.2, 0.1]];
    let mut fx = constant_heads(array![[0.0, 0.5], [0.5, 1.0]], Some(cls.clone()), vec![0.4, 0.2, 0.2, 0.2], 8);
    let m = hungarian_match(&Array2::zeros((2, 0))).unwrap();
    let focal = FocalParams::default();
    let obj = compute_losses(&mut fx.g, &model, &fx.heads, &v, &m, &LossWeights::default(), focal).unwrap();
    assert_eq!((obj.breakdown.caption, obj.breakdown.loc), (0.0, 0.0));
    let expected_cls = focal_loss(&cls, &Array2::zeros((2, 2)), focal.gamma, focal.alpha);
    assert!((obj.breakdown.cls - expected_cls).abs() < 1e-15);
    assert!((obj.breakdown.counter + 0.4f64.ln()).abs() < 1e-12);
}

#[test]
fn non_finite_component_is_named() {
    let vocab = TextVocabulary::from_words(["a"].map(String::from));
    let model = DvcModel::new(tiny_config(2, 2, 3, vocab.len()), 0).unwrap();
    let v = video(Array2::zeros((0, 2)), Array2::zeros((0, 2)), vec![]);
    let mut fx = constant_heads(array![[0.0, 0.5], [0.5, 1.0]], None, vec![0.0, 0.5, 0.5, 0.0], 8);
    let m = hungarian_match(&Array2::zeros((2, 0))).unwrap();
    match compute_losses(&mut fx.g, &model, &fx.heads, &v, &m, &LossWeights::default(), FocalParams::default()) {
        Err(DvcError::NonFiniteLoss { component: "counter", .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected an error"),
    }
}

#[test]
fn matched_ground_truth_without_pairs_is_an_error() {
    let vocab = TextVocabulary::from_words(["a"].map(String::from));
    let model = DvcModel::new(tiny_config(2, 1, 3, vocab.len()), 0).unwrap();
    let v = video(array![[0.1, 0.2]], array![[1.0]], vec![vec![4]]);
    let mut fx = constant_heads(array![[0.0, 0.5], [0.5, 1.0]], None, vec![0.25; 4], 8);
    let empty = hungarian_match(&Array2::zeros((2, 0))).unwrap();
    assert!(compute_losses(&mut fx.g, &model, &fx.heads, &v, &empty, &LossWeights::default(), FocalParams::default())
        .is_err());
}

fn interval() -> impl Strategy<Value = [f64; 2]> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b)| [a.min(b), a.max(b)])
}

proptest! {
    #[test]
    fn matching_cost_is_non_negative_and_scale_invariant(
        preds in prop::collection::vec((interval(), prop::collection::vec(0.01..0.99f64, 3)), 2..6),
        gts in prop::collection::vec((interval(), prop::collection::vec(prop::bool::ANY, 3)), 1..3),
        lambda in 0.1..10.0f64,
    ) {
        let n = preds.len();
        let g = gts.len().min(n);
        let intervals = Array2::from_shape_fn((n, 2), |(i, c)| preds[i].0[c]);
        let cls = Array2::from_shape_fn((n, 3), |(i, c)| preds[i].1[c]);
        let gt = Array2::from_shape_fn((g, 2), |(j, c)| gts[j].0[c]);
        let labels = Array2::from_shape_fn((g, 3), |(j, c)| if gts[j].1[c] { 1.0 } else { 0.0 });
        let focal = FocalParams::default();
        let base = CostWeights::default();
        let c1 = matching_cost(&intervals, Some(&cls), &gt, &labels, base, focal);
        prop_assert!(c1.iter().all(|&c| c >= 0.0));
        let scaled = CostWeights { loc: base.loc * lambda, cls: base.cls * lambda };
        let c2 = matching_cost(&intervals, Some(&cls), &gt, &labels, scaled, focal);
        let m1 = hungarian_match(&c1).unwrap();
        let m2 = hungarian_match(&c2).unwrap();
        prop_assert!((m2.total_cost(&c2) - lambda * m1.total_cost(&c1)).abs() < 1e-9 * (1.0 + lambda));
        prop_assert!((m1.total_cost(&c2) - m2.total_cost(&c2)).abs() < 1e-9 * (1.0 + lambda));
    }
}

fn small_run_config() -> (dvc_core::data::SyntheticDataset, RunConfig) {
    let data = generate_synthetic_dataset(7, 4, 3, 8, 1).unwrap();
    let base = desk_config(std::path::Path::new("."), data.label_space());
    let config = RunConfig {
        concepts: 10,
        concept_epochs: 5,
        model_dim: 16,
        proj_dim: 8,
        ffn_dim: 32,
        resize_length: 32,
        levels: 2,
        heads: 4,
        points: 2,
        queries: 4,
        caption_embed_dim: 8,
        caption_hidden_dim: 16,
        epochs: 6,
        lr: 1e-3,
        ..base
    };
    (data, config)
}

#[test]
fn training_is_deterministic_and_keeps_the_detector_frozen() {
    let (data, config) = small_run_config();
    let concepts = fit_concepts(&data.records, &data.lexicon, &config).unwrap();
    let before = concepts.detector.store.clone();
    let a = fit_model(&data.records, &config, Some(&concepts.detector), |_, _| {}).unwrap();
    let b = fit_model(&data.records, &config, Some(&concepts.detector), |_, _| {}).unwrap();
    assert_eq!(a.curve, b.curve);
    for id in before.ids() {
        assert_eq!(before.value(id), concepts.detector.store.value(id));
    }
    assert!(a.curve.last().unwrap().total < a.curve[0].total);
    for epoch in &a.curve {
        assert!((epoch.total - epoch.weighted_total(&config.train_options().weights)).abs() < 1e-9);
    }
}

#[test]
fn concepts_enabled_without_detector_is_rejected() {
    let (data, config) = small_run_config();
    assert!(fit_model(&data.records, &config, None, |_, _| {}).is_err());
    let off = RunConfig { concepts_enabled: false, classification: false, epochs: 1, ..config };
    let run = fit_model(&data.records, &off, None, |_, _| {}).unwrap();
    assert!(run.model.cls.is_none());
    assert_eq!(run.curve[0].cls, 0.0);
}
