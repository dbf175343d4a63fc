use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Result, TmowError};

/// In-place `p ← p − lr·g` for each parameter/gradient pair.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TmowError::Dimension {
            op: "sgd_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (p, g) in params.iter_mut().zip(grads) {
        sgd_update(p, g.data(), lr)?;
    }
    Ok(())
}

/// Single-tensor form of [`sgd_step`] taking a raw gradient buffer.
pub fn sgd_update(param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
    if param.numel() != grad.len() {
        return Err(TmowError::Dimension {
            op: "sgd_step",
            lhs: param.shape().to_vec(),
            rhs: vec![grad.len()],
        });
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

/// Adam moments for a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// One bias-corrected step; a `None` gradient leaves that tensor and its moments alone.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<&[f64]>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TmowError::Dimension {
                op: "adam_step",
                lhs: vec![params.len(), grads.len()],
                rhs: vec![self.m.len()],
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if p.numel() != g.len() || self.m[k].len() != g.len() {
                return Err(TmowError::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p.data_mut()[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

/// Per-run optimizer state over a fixed, ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam(Adam),
}

impl OptimizerState {
    pub fn new(kind: Optimizer, sizes: &[usize]) -> Self {
        match kind {
            Optimizer::Sgd => Self::Sgd,
            Optimizer::Adam => Self::Adam(Adam::new(sizes)),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<&[f64]>], lr: f64) -> Result<()> {
        match self {
            Self::Adam(a) => a.step(params, grads, lr),
            Self::Sgd => {
                if params.len() != grads.len() {
                    return Err(TmowError::Dimension {
                        op: "sgd_step",
                        lhs: vec![params.len()],
                        rhs: vec![grads.len()],
                    });
                }
                for (p, g) in params.into_iter().zip(grads) {
                    if let Some(g) = g {
                        sgd_update(p, g, lr)?;
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

/// Linear warmup from 0 to `initial_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn cosine(initial_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self {
            initial_lr,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
            kind: ScheduleKind::Cosine,
        }
    }

    /// Steps past `total_steps` clamp to the final value.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.initial_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_span == 0 {
            return self.initial_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / decay_span as f64;
        (0.5 * self.initial_lr * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
    }
}
