//! Set-matching cost and the four-part weighted training objective.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::hungarian::MatchResult;
use super::losses::{focal_loss, giou_1d};
use crate::autograd::{Graph, Mat, Var};
use crate::error::{DvcError, Result};
use crate::model::{DvcModel, HeadVars, PreparedVideo};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub caption: f64,
    pub loc: f64,
    pub cls: f64,
    pub counter: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { caption: 1.0, loc: 2.0, cls: 1.0, counter: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.caption, self.loc, self.cls, self.counter];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DvcError::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(DvcError::InvalidArgument("loss weights must not all be zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub loc: f64,
    pub cls: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { loc: 2.0, cls: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub caption: f64,
    pub loc: f64,
    pub cls: f64,
    pub counter: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.caption * self.caption + w.loc * self.loc + w.cls * self.cls + w.counter * self.counter
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.caption += other.caption * scale;
        self.loc += other.loc * scale;
        self.cls += other.cls * scale;
        self.counter += other.counter * scale;
        self.total += other.total * scale;
    }
}

/// `N × G` cost: `c_loc · (1 − gIoU) + c_cls · focal(y_i, labels_j)`.
/// Without classification probabilities only the localization term remains.
pub fn matching_cost(
    intervals: &Mat,
    cls: Option<&Mat>,
    gt_intervals: &Mat,
    gt_labels: &Mat,
    weights: CostWeights,
    focal: FocalParams,
) -> Mat {
    let (n, g) = (intervals.nrows(), gt_intervals.nrows());
    Array2::from_shape_fn((n, g), |(i, j)| {
        let pred = [intervals[[i, 0]], intervals[[i, 1]]];
        let gt = [gt_intervals[[j, 0]], gt_intervals[[j, 1]]];
        let mut c = weights.loc * (1.0 - giou_1d(pred, gt));
        if let Some(p) = cls {
            let pi = p.slice(s![i..i + 1, ..]).to_owned();
            let yj = gt_labels.slice(s![j..j + 1, ..]).to_owned();
            c += weights.cls * focal_loss(&pi, &yj, focal.gamma, focal.alpha);
        }
        c
    })
}

/// Scalar loss node and its per-component values.
pub struct Objective {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the weighted loss on the tape. Caption and localization terms use
/// matched queries only; classification covers every query with all-zero
/// targets for unmatched ones; the counter target is `min(G, max_events)`.
/// Components whose weight is zero are still reported but kept off the tape.
pub fn compute_losses(
    g: &mut Graph,
    model: &DvcModel,
    heads: &HeadVars,
    video: &PreparedVideo,
    matching: &MatchResult,
    weights: &LossWeights,
    focal: FocalParams,
) -> Result<Objective> {
    let n = g.shape(heads.hidden).0;
    if video.num_events() > 0 && matching.pairs.is_empty() {
        return Err(DvcError::Matching(format!("video {}: ground truth present but nothing matched", video.id)));
    }
    let mut parts: Vec<(f64, Var)> = Vec::new();
    let mut breakdown = LossBreakdown::default();

    if !matching.pairs.is_empty() {
        let queries: Vec<Option<usize>> = matching.pairs.iter().map(|&(q, _)| Some(q)).collect();
        let gts: Vec<usize> = matching.pairs.iter().map(|&(_, j)| j).collect();

        let matched = g.gather_rows(heads.hidden, queries.clone());
        let captions: Vec<Vec<usize>> = gts.iter().map(|&j| video.gt_captions[j].clone()).collect();
        let tf = model.caption.teacher_forcing(g, &model.store, matched, &captions)?;
        let (rows, vocab) = g.shape(tf.log_probs);
        let mut pick = Array2::zeros((rows, vocab));
        let mut tokens = 0usize;
        for (r, t) in tf.targets.iter().enumerate() {
            if let Some(t) = *t {
                pick[[r, t]] = 1.0;
                tokens += 1;
            }
        }
        let pick = g.constant(pick);
        let picked = g.mul(tf.log_probs, pick);
        let sum = g.sum(picked);
        let caption = g.scale(sum, -1.0 / tokens.max(1) as f64);
        breakdown.caption = g.scalar(caption);
        parts.push((weights.caption, caption));

        let pred = g.gather_rows(heads.intervals, queries);
        let gt = video.gt_intervals.select(Axis(0), &gts);
        let per_pair = g.giou_loss(pred, gt);
        let loc = g.mean(per_pair);
        breakdown.loc = g.scalar(loc);
        parts.push((weights.loc, loc));
    }

    if let Some(cls) = heads.cls {
        let labels = g.shape(cls).1;
        let mut targets = Array2::zeros((n, labels));
        for &(q, j) in &matching.pairs {
            targets.row_mut(q).assign(&video.gt_labels.row(j));
        }
        let l = g.focal_loss(cls, targets, focal.gamma, focal.alpha);
        breakdown.cls = g.scalar(l);
        parts.push((weights.cls, l));
    }

    let target = video.num_events().min(model.config.max_events);
    let picked = g.pick_cols(heads.counter.log_probs, vec![target]);
    let counter = g.scale(picked, -1.0);
    breakdown.counter = g.scalar(counter);
    parts.push((weights.counter, counter));

    for (name, value) in [
        ("caption", breakdown.caption),
        ("localization", breakdown.loc),
        ("classification", breakdown.cls),
        ("counter", breakdown.counter),
    ] {
        if !value.is_finite() {
            return Err(DvcError::NonFiniteLoss { component: name, value });
        }
    }

    let mut loss: Option<Var> = None;
    for (w, v) in parts {
        if w == 0.0 {
            continue;
        }
        let term = g.scale(v, w);
        loss = Some(match loss {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let loss = loss.unwrap_or_else(|| g.constant(Array2::zeros((1, 1))));
    breakdown.total = g.scalar(loss);
    Ok(Objective { loss, breakdown })
}
