//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value in the graph is a 2-D matrix. Scalars are `1 × 1`, vectors are
//! single rows. Binary element-wise ops broadcast a dimension of size one.

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use crate::transformer::SamplePlan;

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowNorm { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    SumRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    Transpose(Var),
    PickCols(Var, Vec<usize>),
    Focal { p: Var, targets: Mat, gamma: f64, alpha: f64 },
    Giou { pred: Var, gt: Mat },
    DeformSample { value: Var, offsets: Var, logits: Var, refs: Var, plan: SamplePlan },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass. Build it, call [`Graph::backward`], drop it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn expand(m: &Mat, shape: (usize, usize)) -> Mat {
    if m.dim() == shape {
        m.clone()
    } else {
        m.broadcast(shape).expect("broadcastable").to_owned()
    }
}

/// Sum a gradient down to `shape` along broadcast dimensions.
fn reduce_to(mut g: Mat, shape: (usize, usize)) -> Mat {
    if g.nrows() != shape.0 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if g.ncols() != shape.1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (used for gradient checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Load a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = !store.is_frozen(id);
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(v, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Zero-mean, unit-variance per row (no affine part).
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(out, Op::RowNorm { x: a, inv_std }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `m × n → 1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(v, Op::SumRows(a), rg)
    }

    /// Column-wise max over rows: `m × n → 1 × n`. Ties go to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut argmax = vec![0usize; x.ncols()];
        let mut out = Array2::from_elem((1, x.ncols()), f64::NEG_INFINITY);
        for (r, row) in x.rows().into_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v > out[[0, c]] {
                    out[[0, c]] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::MaxRows { x: a, argmax }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    /// Pick rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((idx.len(), x.ncols()));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                v.row_mut(r).assign(&x.row(i));
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, idx), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// `out[r] = a[r, cols[r]]`, an `m × 1` column.
    pub fn pick_cols(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_fn((cols.len(), 1), |(r, _)| x[[r, cols[r]]]);
        let rg = self.rg(a);
        self.push(v, Op::PickCols(a, cols), rg)
    }

    /// Mean focal loss of probabilities `p` against binary `targets`.
    pub fn focal_loss(&mut self, p: Var, targets: Mat, gamma: f64, alpha: f64) -> Var {
        assert_eq!(self.shape(p), targets.dim(), "focal loss shape mismatch");
        let loss = crate::training::focal_loss(self.value(p), &targets, gamma, alpha);
        let rg = self.rg(p);
        self.push(Array2::from_elem((1, 1), loss), Op::Focal { p, targets, gamma, alpha }, rg)
    }

    /// Per-row `1 − gIoU` of predicted `[start, end]` rows against ground truth rows.
    pub fn giou_loss(&mut self, pred: Var, gt: Mat) -> Var {
        assert_eq!(self.shape(pred), gt.dim(), "gIoU shape mismatch");
        let p = self.value(pred);
        let v = Array2::from_shape_fn((p.nrows(), 1), |(r, _)| {
            1.0 - crate::training::giou_1d([p[[r, 0]], p[[r, 1]]], [gt[[r, 0]], gt[[r, 1]]])
        });
        let rg = self.rg(pred);
        self.push(v, Op::Giou { pred, gt }, rg)
    }

    pub(crate) fn deform_sample(&mut self, value: Var, offsets: Var, logits: Var, refs: Var, plan: SamplePlan) -> Var {
        let out = plan.gather(self.value(value));
        let rg = [value, offsets, logits, refs].iter().any(|&v| self.rg(v));
        self.push(out, Op::DeformSample { value, offsets, logits, refs, plan }, rg)
    }

    #[cfg(test)]
    pub(crate) fn sample_plan(&self, v: Var) -> Option<&SamplePlan> {
        match &self.nodes[v.0].op {
            Op::DeformSample { plan, .. } => Some(plan),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    /// Accumulated gradients for every trainable parameter that took part.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                if let Some(slot) = out.iter_mut().find(|(pid, _)| pid == id) {
                    slot.1 += g;
                } else {
                    out.push((*id, g.clone()));
                }
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &self.nodes[i].value;
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, reduce_to(g.clone(), self.shape(*a)));
                acc(*b, reduce_to(g.clone(), self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g.clone(), self.shape(*a)));
                acc(*b, reduce_to(-g, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let shape = broadcast_shape(self.shape(*a), self.shape(*b));
                if self.rg(*a) {
                    let d = g * &expand(self.value(*b), shape);
                    acc(*a, reduce_to(d, self.shape(*a)));
                }
                if self.rg(*b) {
                    let d = g * &expand(self.value(*a), shape);
                    acc(*b, reduce_to(d, self.shape(*b)));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => acc(*a, Zip::from(g).and(out).map_collect(|&g, &y| g * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, Zip::from(g).and(out).map_collect(|&g, &y| g * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, Zip::from(g).and(out).map_collect(|&g, &y| if y > 0.0 { g } else { 0.0 })),
            Op::Exp(a) => acc(*a, g * out),
            Op::Log(a) => acc(*a, g / self.value(*a)),
            Op::Clamp(a, lo, hi) => {
                let d =
                    Zip::from(g).and(self.value(*a)).map_collect(|&g, &x| if x >= *lo && x <= *hi { g } else { 0.0 });
                acc(*a, d)
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * out;
                for (mut row, y) in d.rows_mut().into_iter().zip(out.rows()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(&y).for_each(|r, &y| *r -= y * s);
                }
                acc(*a, d)
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for ((mut row, lp), gr) in d.rows_mut().into_iter().zip(out.rows()).zip(g.rows()) {
                    let s = gr.sum();
                    Zip::from(&mut row).and(&lp).for_each(|r, &lp| *r -= lp.exp() * s);
                }
                acc(*a, d)
            }
            Op::RowNorm { x, inv_std } => {
                let d = out.ncols() as f64;
                let mut dx = Array2::zeros(out.dim());
                for (r, is) in inv_std.iter().enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.sum() / d;
                    let mean_gy = gr.dot(&y) / d;
                    Zip::from(dx.row_mut(r))
                        .and(&gr)
                        .and(&y)
                        .for_each(|o, &g, &y| *o = is * (g - mean_g - y * mean_gy));
                }
                acc(*x, dx)
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
            Op::SumRows(a) => acc(*a, expand(g, self.shape(*a))),
            Op::MaxRows { x, argmax } => {
                let mut d = Array2::zeros(self.shape(*x));
                for (c, &r) in argmax.iter().enumerate() {
                    d[[r, c]] = g[[0, c]];
                }
                acc(*x, d)
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    acc(p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d)
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d)
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                }
                acc(*a, d)
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::PickCols(a, cols) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (r, &c) in cols.iter().enumerate() {
                    d[[r, c]] = g[[r, 0]];
                }
                acc(*a, d)
            }
            Op::Focal { p, targets, gamma, alpha } => {
                let n = targets.len().max(1) as f64;
                let scale = g[[0, 0]] / n;
                let d = Zip::from(self.value(*p))
                    .and(targets)
                    .map_collect(|&p, &y| scale * crate::training::focal_grad(p, y, *gamma, *alpha));
                acc(*p, d)
            }
            Op::Giou { pred, gt } => {
                let p = self.value(*pred);
                let mut d = Array2::zeros(p.dim());
                for r in 0..p.nrows() {
                    let (ds, de) = crate::training::giou_1d_grad([p[[r, 0]], p[[r, 1]]], [gt[[r, 0]], gt[[r, 1]]]);
                    d[[r, 0]] = -ds * g[[r, 0]];
                    d[[r, 1]] = -de * g[[r, 0]];
                }
                acc(*pred, d)
            }
            Op::DeformSample { value, offsets, logits, refs, plan } => {
                let back = plan.backward(self.value(*value), g);
                acc(*value, back.value);
                acc(*offsets, back.offsets);
                acc(*logits, back.logits);
                acc(*refs, back.refs);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
