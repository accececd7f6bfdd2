//! SGD with momentum and decoupled-by-name weight decay, shared by both
//! training loops.

use crate::tensor::Tensor;

pub(crate) struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
    pub step: usize,
}

impl Sgd {
    pub fn new(params: &[(String, Tensor)], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            step: 0,
        }
    }

    /// One update; `grads` is aligned with `params`, `None` entries are
    /// untouched parameters. Weight decay applies to `.weight` tensors only.
    pub fn apply(&mut self, params: &mut [(String, Tensor)], grads: &[Option<Tensor>]) {
        for (i, (name, theta)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let decay = if name.ends_with(".weight") {
                self.weight_decay
            } else {
                0.0
            };
            let v = &mut self.velocity[i];
            for ((vi, ti), gi) in v
                .data_mut()
                .iter_mut()
                .zip(theta.data_mut().iter_mut())
                .zip(g.iter())
            {
                *vi = self.momentum * *vi - self.lr * (gi + decay * *ti);
                *ti += *vi;
            }
        }
        self.step += 1;
    }
}
