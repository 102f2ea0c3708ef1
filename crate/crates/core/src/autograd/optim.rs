use ndarray::Zip;

use super::graph::Mat;
use super::params::{ParamId, ParamStore};

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: Vec<Option<(Mat, Mat)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let step_size = self.lr / bc1;
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (Mat::zeros(g.dim()), Mat::zeros(g.dim())));
            Zip::from(store.value_mut(*id)).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Mat)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|(_, g)| g.mapv_inplace(|x| x * k));
    }
    norm
}
