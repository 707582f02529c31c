//! SGD with momentum and Adam, applied to [`ViTParams`] grad slots.

use crate::vit::ViTParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ViTParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            step: 0,
            first: zeros,
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor whose name passes `update`.
    /// Tensors without a grad slot are left alone.
    pub fn step(&mut self, params: &mut ViTParams, update: impl Fn(&str) -> bool) {
        self.step += 1;
        let names = params.names();
        let lr = self.lr;
        let t = self.step as i32;
        for (i, (name, tensor)) in names.iter().zip(params.tensors_mut()).enumerate() {
            if !update(name) {
                continue;
            }
            let Some(grad) = tensor.grad.take() else {
                continue;
            };
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((p, g), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[i];
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            tensor.grad = Some(grad);
        }
    }
}
