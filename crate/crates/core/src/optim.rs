//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use crate::model::MoeParams;
use crate::tensor::Tensor;
use std::f64::consts::PI;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// One AdamW step on a flat parameter slice.
///
/// ```text
/// θ ← θ − lr·wd·θ
/// m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
/// θ ← θ − lr · m̂ / (√v̂ + ε)
/// ```
/// `step` is the 1-based step count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= lr * weight_decay * params[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Parameter group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    ExpertsRouter,
    /// Updated outside the optimizer.
    Frozen,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name == "experts.prototype" {
        ParamGroup::Frozen
    } else if name.starts_with("encoder.") {
        ParamGroup::Encoder
    } else {
        ParamGroup::ExpertsRouter
    }
}

/// AdamW state for every optimized tensor of a [`MoeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub first_moment: MoeParams,
    pub second_moment: MoeParams,
    pub step: u64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(like: &MoeParams, weight_decay: f64) -> Self {
        let zero = |p: &MoeParams| {
            let mut z = p.clone();
            for (_, t) in z.tensors_mut() {
                t.fill(0.0);
            }
            z
        };
        Self {
            first_moment: zero(like),
            second_moment: zero(like),
            step: 0,
            weight_decay,
        }
    }

    /// Apply one update with per-group learning rates.
    pub fn update(
        &mut self,
        params: &mut MoeParams,
        grads: &MoeParams,
        lr_encoder: f64,
        lr_other: f64,
    ) {
        self.step += 1;
        let step = self.step;
        let wd = self.weight_decay;
        let grads = grads.tensors();
        let ms = self.first_moment.tensors_mut();
        let vs = self.second_moment.tensors_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in
            params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs)
        {
            let lr = match group_of(name) {
                ParamGroup::Encoder => lr_encoder,
                ParamGroup::ExpertsRouter => lr_other,
                ParamGroup::Frozen => continue,
            };
            step_tensor(p, g, m, v, step, lr, wd);
        }
    }
}

fn step_tensor(
    p: &mut Tensor,
    g: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    lr: f64,
    wd: f64,
) {
    optimizer_step(
        p.data_mut(),
        g.data(),
        m.data_mut(),
        v.data_mut(),
        step,
        lr,
        wd,
        (BETA1, BETA2),
        EPS,
    );
}

/// Cosine decay from `base` at step 0 to exactly 0 at step `total_steps - 1`.
pub fn cosine_lr(base: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let s = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    if s >= 1.0 {
        return 0.0;
    }
    0.5 * base * (1.0 + (PI * s).cos())
}
