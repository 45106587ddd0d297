//! Adam with bias correction and a warmup-then-linear-decay schedule.

use crate::graph::Gradients;
use crate::nn::ParamSet;
use crate::tensor::{Result, Tensor, TensorError};

/// Learning-rate multiplier: linear ramp from 0 to 1 over the first
/// `warmup_ratio * total` steps, then linear decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupLinear {
    pub total_steps: usize,
    pub warmup_ratio: f64,
}

impl WarmupLinear {
    pub fn new(total_steps: usize, warmup_ratio: f64) -> Self {
        Self {
            total_steps,
            warmup_ratio,
        }
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_ratio * self.total_steps as f64
    }

    /// Factor applied at (1-based) step `step`.
    pub fn factor(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        let s = step as f64;
        let total = self.total_steps as f64;
        let warm = self.warmup_steps();
        if s < warm {
            s / warm
        } else if total > warm {
            ((total - s) / (total - warm)).max(0.0)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Option<WarmupLinear>,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = |p: &ParamSet| -> Vec<Tensor> {
            p.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: None,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn with_schedule(mut self, schedule: WarmupLinear) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Learning rate that the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step + 1)
    }

    fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.schedule.map_or(1.0, |s| s.factor(step))
    }

    /// One update. Parameters without a gradient are treated as having zero
    /// gradient (their moments still decay).
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<f64> {
        let all: Vec<Option<Tensor>> = grads.params();
        self.step_with(params, &all)
    }

    pub fn step_with(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<f64> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam",
                msg: format!(
                    "{} gradients / {} moments for {} parameters",
                    grads.len(),
                    self.m.len(),
                    params.len()
                ),
            });
        }
        self.step += 1;
        let lr = self.lr_at(self.step);
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let zero;
            let g = match &grads[i] {
                Some(g) => {
                    if g.len() != m.len() {
                        return Err(TensorError::ShapeMismatch {
                            op: "adam",
                            lhs: params.get(id).shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    g.data()
                }
                None => {
                    zero = vec![0.0; m.len()];
                    &zero[..]
                }
            };
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(lr)
    }
}
