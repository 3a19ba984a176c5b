use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum and L2 weight decay.
    Sgd,
    /// Adam with decoupled weight decay.
    #[default]
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup, then cosine decay to zero.
    #[default]
    Cosine,
    /// Linear warmup, then constant.
    Constant,
}

impl LrSchedule {
    /// Learning rate at `step` of `total`, with `warmup` warmup steps.
    pub fn at(self, base: f64, step: usize, total: usize, warmup: usize) -> f64 {
        if step < warmup {
            return base * (step + 1) as f64 / warmup as f64;
        }
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Leaves that receive weight decay: projection matrices only.
fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".a_log")
        || name.ends_with(".dt_bias")
        || name.ends_with("norm")
        || name == "cls_token")
}

/// Per-leaf optimizer state in [`ModelParams::visit`] order.
#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    decay: Vec<bool>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    steps: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl<S: Scalar> Optimizer<S> {
    pub fn new(
        kind: OptimizerKind,
        params: &ModelParams<Tensor<S>>,
        momentum: f64,
        weight_decay: f64,
    ) -> Self {
        let mut decay = Vec::new();
        let mut m = Vec::new();
        params.visit(&mut |name, t| {
            decay.push(decays(&name));
            m.push(vec![S::zero(); t.len()]);
        });
        let v = match kind {
            OptimizerKind::Adamw => m.clone(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            kind,
            momentum,
            weight_decay,
            decay,
            m,
            v,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<Tensor<S>>, grads: &ModelParams<Tensor<S>>, lr: f64) {
        self.steps += 1;
        let grads = grads.leaves();
        let mut leaf = 0;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        params.visit_mut(&mut |p| {
            let g = grads[leaf].data();
            let wd = if self.decay[leaf] { self.weight_decay } else { 0.0 };
            let m = &mut self.m[leaf];
            match self.kind {
                OptimizerKind::Sgd => {
                    let (mu, wd, lr) = (S::of(self.momentum), S::of(wd), S::of(lr));
                    for ((pv, &gv), mv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()) {
                        *mv = mu * *mv + gv + wd * *pv;
                        *pv -= lr * *mv;
                    }
                }
                OptimizerKind::Adamw => {
                    let v = &mut self.v[leaf];
                    let (b1, b2) = (S::of(BETA1), S::of(BETA2));
                    let (c1, c2) = (S::of(1.0 / bc1), S::of(1.0 / bc2));
                    let (lr, shrink, eps) = (S::of(lr), S::of(lr * wd), S::of(EPS));
                    for (((pv, &gv), mv), vv) in
                        p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = b1 * *mv + (S::one() - b1) * gv;
                        *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                        let update = (*mv * c1) / ((*vv * c2).sqrt() + eps);
                        *pv -= lr * update + shrink * *pv;
                    }
                }
            }
            leaf += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_with_warmup() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.at(1.0, 0, 10, 2), 0.5);
        assert_eq!(s.at(1.0, 1, 10, 2), 1.0);
        assert!((s.at(1.0, 2, 10, 2) - 1.0).abs() < 1e-12);
        assert!((s.at(1.0, 6, 10, 2) - 0.5).abs() < 1e-12);
        assert!(s.at(1.0, 10, 10, 2).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.at(0.3, 7, 10, 2), 0.3);
    }

    #[test]
    fn decay_mask() {
        assert!(decays("layers.0.in_proj.weight"));
        assert!(decays("layers.3.fwd.proj_b"));
        assert!(!decays("layers.3.fwd.a_log"));
        assert!(!decays("head.bias"));
        assert!(!decays("cls_token"));
        assert!(!decays("layers.1.norm"));
        assert!(!decays("final_norm"));
    }
}
