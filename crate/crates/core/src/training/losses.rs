//! Scalar loss primitives shared by matching, training and the autodiff tape.

use ndarray::Zip;

use crate::autograd::Mat;

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const FOCAL_EPS: f64 = 1e-7;

/// Generalised IoU of two ordered 1-D intervals, in `[-1, 1]`.
///
/// Two zero-length intervals at the same point count as identical (1); at
/// different points they have no overlap and a full empty hull (−1).
pub fn giou_1d(pred: [f64; 2], gt: [f64; 2]) -> f64 {
    let inter = (pred[1].min(gt[1]) - pred[0].max(gt[0])).max(0.0);
    let union = (pred[1] - pred[0]) + (gt[1] - gt[0]) - inter;
    let hull = pred[1].max(gt[1]) - pred[0].min(gt[0]);
    if hull <= 0.0 {
        return 1.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

/// `(∂gIoU/∂start, ∂gIoU/∂end)` with respect to the predicted interval.
/// Ties at kinks take the predicted side.
pub fn giou_1d_grad(pred: [f64; 2], gt: [f64; 2]) -> (f64, f64) {
    let (s, e) = (pred[0], pred[1]);
    let (a, b) = (gt[0], gt[1]);
    let raw_inter = e.min(b) - s.max(a);
    let inter = raw_inter.max(0.0);
    let union = (e - s) + (b - a) - inter;
    let hull = e.max(b) - s.min(a);
    if hull <= 0.0 || union <= 0.0 {
        return (0.0, 0.0);
    }
    let overlapping = raw_inter > 0.0;
    let d_inter_ds = if overlapping && s >= a { -1.0 } else { 0.0 };
    let d_inter_de = if overlapping && e <= b { 1.0 } else { 0.0 };
    let d_union_ds = -1.0 - d_inter_ds;
    let d_union_de = 1.0 - d_inter_de;
    let d_hull_ds = if s <= a { -1.0 } else { 0.0 };
    let d_hull_de = if e >= b { 1.0 } else { 0.0 };
    // gIoU = inter/union − 1 + union/hull
    let partial =
        |di: f64, du: f64, dh: f64| di / union - inter / (union * union) * du + du / hull - union / (hull * hull) * dh;
    (partial(d_inter_ds, d_union_ds, d_hull_ds), partial(d_inter_de, d_union_de, d_hull_de))
}

fn focal_term(p: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    -alpha * y * (1.0 - p).powf(gamma) * p.ln() - (1.0 - alpha) * (1.0 - y) * p.powf(gamma) * (1.0 - p).ln()
}

/// Element-mean focal loss of probabilities against (binary) targets.
pub fn focal_loss(p: &Mat, targets: &Mat, gamma: f64, alpha: f64) -> f64 {
    assert_eq!(p.dim(), targets.dim());
    if p.is_empty() {
        return 0.0;
    }
    let total: f64 = Zip::from(p).and(targets).fold(0.0, |acc, &p, &y| acc + focal_term(p, y, gamma, alpha));
    total / p.len() as f64
}

/// Derivative of one focal term with respect to `p`. Zero where clamping is active.
pub fn focal_grad(p: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&p) {
        return 0.0;
    }
    let q = 1.0 - p;
    let pow_m1 = |x: f64| if gamma == 0.0 { 0.0 } else { gamma * x.powf(gamma - 1.0) };
    let pos = -alpha * y * (-pow_m1(q) * p.ln() + q.powf(gamma) / p);
    let neg = -(1.0 - alpha) * (1.0 - y) * (pow_m1(p) * q.ln() - p.powf(gamma) / q);
    pos + neg
}
