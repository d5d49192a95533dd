//! Routing control hyperparameters and the exploration budget
//! `E = T · H / (O + B)` built from them.
//!
//! `T` is the routing temperature, `H` the entropy-bonus weight, `O` the oracle
//! weight and `B` the balance weight. Higher `E` leaves the router more room to
//! explore expert assignments; lower `E` commits it early.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Lower bound (inclusive) of the healthy phase.
pub const HEALTHY_THRESHOLD: f64 = 0.5;
/// Upper bound (inclusive) of the irreversible-collapse phase.
pub const COLLAPSE_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum HyperParamError {
    #[error("oracle + balance weight is zero; E is undefined")]
    ZeroDenominator,
    #[error("task complexity f(C) = {0} is not positive")]
    NonPositiveComplexity(f64),
    #[error("invalid hyperparameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub t_init: f64,
    pub t_end: f64,
    /// Entropy bonus weight `H`.
    pub entropy: f64,
    /// Oracle weight `O`.
    pub oracle: f64,
    /// Balance weight `B`.
    pub balance: f64,
    /// Orthogonality weight.
    pub ortho: f64,
    pub anneal_epochs: usize,
    pub warmup_epochs: usize,
    /// Share of the balance loss given to the KL part; 0.5 weighs both parts 1:1.
    pub balance_kl_frac: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            t_init: 3.0,
            t_end: 0.3,
            entropy: 0.10,
            oracle: 0.15,
            balance: 0.40,
            ortho: 0.0,
            anneal_epochs: 30,
            warmup_epochs: 15,
            balance_kl_frac: 0.5,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), HyperParamError> {
        let bad = |msg: &str| Err(HyperParamError::Invalid(msg.to_string()));
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad("t_end must be positive");
        }
        if !(self.t_init >= self.t_end && self.t_init.is_finite()) {
            return bad("t_init must be >= t_end");
        }
        for (name, w) in [
            ("h", self.entropy),
            ("o", self.oracle),
            ("b", self.balance),
            ("ortho", self.ortho),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(HyperParamError::Invalid(format!(
                    "loss weight {name} must be a finite non-negative number"
                )));
            }
        }
        if self.anneal_epochs == 0 {
            return bad("anneal_epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.balance_kl_frac) {
            return bad("balance_kl_frac must lie in [0, 1]");
        }
        Ok(())
    }

    /// `E` at the initial temperature, the value quoted for a configuration.
    pub fn nominal_e(&self) -> Result<f64, HyperParamError> {
        compute_e(self, self.t_init)
    }
}

/// The exploration budget `T · H / (O + B)` at temperature `temperature`.
pub fn compute_e(hp: &HyperParams, temperature: f64) -> Result<f64, HyperParamError> {
    let denom = hp.oracle + hp.balance;
    if denom <= 0.0 {
        return Err(HyperParamError::ZeroDenominator);
    }
    Ok(temperature * hp.entropy / denom)
}

/// Task complexity correction `f(C)` applied to `E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplexityFn {
    #[default]
    One,
    Log,
    Sqrt,
}

impl ComplexityFn {
    pub fn apply(self, n_classes: f64) -> f64 {
        match self {
            ComplexityFn::One => 1.0,
            ComplexityFn::Log => n_classes.ln(),
            ComplexityFn::Sqrt => n_classes.sqrt(),
        }
    }
}

/// `E / f(C)` for an arbitrary complexity function.
pub fn compute_e_eff_with(
    hp: &HyperParams,
    temperature: f64,
    n_classes: f64,
    f: impl Fn(f64) -> f64,
) -> Result<f64, HyperParamError> {
    let fc = f(n_classes);
    if !(fc > 0.0) {
        return Err(HyperParamError::NonPositiveComplexity(fc));
    }
    Ok(compute_e(hp, temperature)? / fc)
}

pub fn compute_e_eff(
    hp: &HyperParams,
    temperature: f64,
    n_classes: f64,
    f: ComplexityFn,
) -> Result<f64, HyperParamError> {
    compute_e_eff_with(hp, temperature, n_classes, |c| f.apply(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseLabel {
    IrreversibleCollapse,
    ReversibleSubHealth,
    Healthy,
}

/// `E >= 0.5` is healthy, `E <= 0.2` is collapse, anything between is sub-healthy.
pub fn classify_phase(e: f64) -> PhaseLabel {
    if e >= HEALTHY_THRESHOLD {
        PhaseLabel::Healthy
    } else if e > COLLAPSE_THRESHOLD {
        PhaseLabel::ReversibleSubHealth
    } else {
        PhaseLabel::IrreversibleCollapse
    }
}

/// Routing temperature at `epoch`: flat at `t_init` through warmup, cosine
/// decay to `t_end` over `anneal_epochs`, then flat at `t_end`.
pub fn temperature_at(hp: &HyperParams, epoch: usize) -> f64 {
    if epoch < hp.warmup_epochs {
        return hp.t_init;
    }
    let into = epoch - hp.warmup_epochs;
    if into >= hp.anneal_epochs {
        return hp.t_end;
    }
    let s = into as f64 / hp.anneal_epochs as f64;
    hp.t_end + 0.5 * (hp.t_init - hp.t_end) * (1.0 + (PI * s).cos())
}
