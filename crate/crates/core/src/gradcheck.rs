//! Central finite-difference check of the analytic gradient of [`total_loss`].
//!
//! Entries whose ±step perturbation changes any sample's top-2 selection are
//! skipped: the loss is only piecewise smooth in the router parameters.

use crate::data::LabeledBatch;
use crate::hyperparams::HyperParams;
use crate::losses::{total_loss, LossError, OracleAssignment};
use crate::model::{MoeModel, RoutingMode};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// `tensor[index]` of the worst entry.
    pub worst: String,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Relative error with an absolute floor: differences at or below `abs_floor` count as exact.
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn loss_and_pairs(
    model: &MoeModel,
    batch: &LabeledBatch,
    hp: &HyperParams,
    temperature: f64,
    assignment: &OracleAssignment,
    warmup: Option<&StreamRng>,
) -> Result<(f64, Vec<(usize, usize)>), LossError> {
    match warmup {
        Some(r) => {
            let mut r = r.clone();
            let ev = total_loss(
                model,
                batch,
                hp,
                temperature,
                assignment,
                RoutingMode::RandomWarmup(&mut r),
            )?;
            Ok((ev.breakdown.total, Vec::new()))
        }
        None => {
            let ev = total_loss(
                model,
                batch,
                hp,
                temperature,
                assignment,
                RoutingMode::Learned,
            )?;
            let pairs = model
                .forward(batch, temperature, RoutingMode::Learned)
                .iter()
                .map(|o| o.top2)
                .collect();
            Ok((ev.breakdown.total, pairs))
        }
    }
}

/// Compare every learnable entry's analytic gradient with `(L(θ+h) − L(θ−h)) / 2h`.
/// With `warmup`, each evaluation draws its random pairs from a clone of that
/// stream, so all evaluations route identically. The model is restored on return.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    model: &mut MoeModel,
    batch: &LabeledBatch,
    hp: &HyperParams,
    temperature: f64,
    assignment: &OracleAssignment,
    warmup: Option<&StreamRng>,
    step: f64,
    abs_floor: f64,
) -> Result<GradCheck, LossError> {
    let analytic = {
        let mut r = warmup.cloned();
        let mode = match r.as_mut() {
            Some(r) => RoutingMode::RandomWarmup(r),
            None => RoutingMode::Learned,
        };
        total_loss(model, batch, hp, temperature, assignment, mode)?.grads
    };
    let (_, base_pairs) = loss_and_pairs(model, batch, hp, temperature, assignment, warmup)?;

    let mut out = GradCheck {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let names: Vec<&str> = model.params.tensors().iter().map(|(n, _)| *n).collect();
    for (ti, name) in names.into_iter().enumerate() {
        // Prototypes are not part of the loss.
        if name == "experts.prototype" {
            continue;
        }
        let len = model.params.tensors()[ti].1.len();
        for k in 0..len {
            let orig = model.params.tensors()[ti].1.data()[k];
            model.params.tensors_mut()[ti].1.data_mut()[k] = orig + step;
            let up = loss_and_pairs(model, batch, hp, temperature, assignment, warmup);
            model.params.tensors_mut()[ti].1.data_mut()[k] = orig - step;
            let down = loss_and_pairs(model, batch, hp, temperature, assignment, warmup);
            model.params.tensors_mut()[ti].1.data_mut()[k] = orig;
            let ((up, up_pairs), (down, down_pairs)) = (up?, down?);
            if up_pairs != base_pairs || down_pairs != base_pairs {
                out.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let an = analytic.tensors()[ti].1.data()[k];
            let e = rel_err(an, numeric, abs_floor);
            out.checked += 1;
            if e > out.max_rel_err || out.worst.is_empty() {
                out.max_rel_err = out.max_rel_err.max(e);
                out.worst = format!("{name}[{k}]: analytic {an:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(out)
}
