//! Deterministic training loop over prepared videos, one video per step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian_match, MatchResult};
use super::objective::{
    compute_losses, matching_cost, CostWeights, FocalParams, LossBreakdown, LossWeights, Objective,
};
use crate::autograd::{clip_grad_norm, Adam, Graph};
use crate::error::{DvcError, Result};
use crate::model::{DvcModel, PreparedVideo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub weights: LossWeights,
    pub cost: CostWeights,
    pub focal: FocalParams,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-4,
            seed: 0,
            grad_clip: Some(1.0),
            weights: LossWeights::default(),
            cost: CostWeights::default(),
            focal: FocalParams::default(),
        }
    }
}

/// Forward pass, matching and loss for one video. The graph keeps the tape
/// for a subsequent backward pass.
pub fn video_objective(
    g: &mut Graph,
    model: &DvcModel,
    video: &PreparedVideo,
    opts: &TrainOptions,
) -> Result<(Objective, MatchResult)> {
    let heads = model.forward(g, video)?;
    for (component, var) in [("localization", Some(heads.intervals)), ("classification", heads.cls)] {
        if let Some(bad) = var.and_then(|v| g.value(v).iter().copied().find(|x| !x.is_finite())) {
            return Err(DvcError::NonFiniteLoss { component, value: bad });
        }
    }
    let cost = matching_cost(
        g.value(heads.intervals),
        heads.cls.map(|c| g.value(c)),
        &video.gt_intervals,
        &video.gt_labels,
        opts.cost,
        opts.focal,
    );
    let matching = hungarian_match(&cost)?;
    let objective = compute_losses(g, model, &heads, video, &matching, &opts.weights, opts.focal)?;
    Ok((objective, matching))
}

/// Mean loss over `videos` without updating parameters.
pub fn evaluate_loss(model: &DvcModel, videos: &[PreparedVideo], opts: &TrainOptions) -> Result<LossBreakdown> {
    let mut mean = LossBreakdown::default();
    for video in videos {
        let mut g = Graph::new();
        let (objective, _) = video_objective(&mut g, model, video, opts)?;
        mean.accumulate(&objective.breakdown, 1.0 / videos.len() as f64);
    }
    Ok(mean)
}

/// Adam over all non-frozen parameters. Videos are visited in a seeded
/// shuffled order each epoch; `on_epoch` sees the epoch's mean losses.
pub fn train_model(
    model: &mut DvcModel,
    videos: &[PreparedVideo],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    opts.weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut mean = LossBreakdown::default();
        for &i in &order {
            let mut g = Graph::new();
            let (objective, _) = video_objective(&mut g, model, &videos[i], opts)?;
            mean.accumulate(&objective.breakdown, 1.0 / videos.len() as f64);
            let grads = g.backward(objective.loss);
            let mut pg = g.param_grads(&grads);
            if let Some(max) = opts.grad_clip {
                clip_grad_norm(&mut pg, max);
            }
            adam.step(&mut model.store, &pg);
        }
        log::info!(
            "epoch {} total {:.5} caption {:.5} loc {:.5} cls {:.5} counter {:.5}",
            epoch + 1,
            mean.total,
            mean.caption,
            mean.loc,
            mean.cls,
            mean.counter
        );
        on_epoch(epoch, &mean);
        curve.push(mean);
    }
    Ok(curve)
}
