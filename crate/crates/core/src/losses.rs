//! Training objective and its analytic gradient.
//!
//! ```text
//! total = task − H·entropy + B·balance + O·oracle + λ_o·ortho
//! ```
//!
//! * `task`: mean cross-entropy of the gate-weighted ensemble logits.
//! * `entropy`: mean routing entropy normalized by `ln N`, in `[0, 1]`. It is
//!   subtracted, so spread-out routing is rewarded.
//! * `balance`: `KL(importance ‖ uniform) + Var(count) / mean(count)²`, where
//!   importance is the batch-mean routing distribution and `count_j` the number
//!   of samples whose top-2 contains expert `j`.
//! * `oracle`: cross-entropy of the routing distribution against a fixed
//!   class→expert teacher map.
//! * `ortho`: mean squared cosine between the two selected experts' logits.
//!
//! Top-2 selection is held constant when differentiating. The router receives
//! gradient through the gate softmax over the selected pair and through the
//! entropy, balance-KL and oracle terms over its full distribution. The count
//! part of the balance loss is piecewise constant and contributes no gradient.
//! During random warmup the gates are fixed, so only the distribution terms
//! reach the router; they act on the router's own softmax, not on the uniform
//! distribution reported by the warmup forward pass.

use crate::data::LabeledBatch;
use crate::hyperparams::HyperParams;
use crate::model::{MoeModel, MoeParams, RoutingMode, SampleTrace};
use crate::tensor::{self, accumulate_affine_grad, add_transposed_matvec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss needs a non-empty batch")]
    EmptyBatch,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("oracle assignment covers {have} classes, batch has {need}")]
    AssignmentMismatch { have: usize, need: usize },
}

/// Raw loss terms and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub entropy: f64,
    pub balance: f64,
    pub oracle: f64,
    pub ortho: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(
        task: f64,
        entropy: f64,
        balance: f64,
        oracle: f64,
        ortho: f64,
        hp: &HyperParams,
    ) -> Self {
        Self {
            task,
            entropy,
            balance,
            oracle,
            ortho,
            total: task - hp.entropy * entropy
                + hp.balance * balance
                + hp.oracle * oracle
                + hp.ortho * ortho,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.task,
            self.entropy,
            self.balance,
            self.oracle,
            self.ortho,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.task += b.task;
            acc.entropy += b.entropy;
            acc.balance += b.balance;
            acc.oracle += b.oracle;
            acc.ortho += b.ortho;
            acc.total += b.total;
        }
        LossBreakdown {
            task: acc.task / n,
            entropy: acc.entropy / n,
            balance: acc.balance / n,
            oracle: acc.oracle / n,
            ortho: acc.ortho / n,
            total: acc.total / n,
        }
    }
}

/// Fixed class → teacher experts map for the oracle term. The teacher
/// distribution of a class is uniform over its experts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleAssignment {
    pub experts_of_class: Vec<Vec<usize>>,
}

impl OracleAssignment {
    /// Deal expert ids `0..n_targets` round-robin over the classes: expert `j`
    /// teaches class `j mod n_classes`. With fewer experts than classes, class
    /// `c` gets expert `c mod n_targets` instead, so every class has a teacher.
    pub fn round_robin(n_classes: usize, n_targets: usize) -> Self {
        let n_targets = n_targets.max(1);
        let experts_of_class = (0..n_classes)
            .map(|c| {
                if n_targets <= n_classes {
                    vec![c % n_targets]
                } else {
                    (c..n_targets).step_by(n_classes).collect()
                }
            })
            .collect();
        Self { experts_of_class }
    }

    /// Teacher probability of expert `k` for class `c`.
    pub fn target(&self, c: usize, k: usize) -> f64 {
        let set = &self.experts_of_class[c];
        if set.contains(&k) {
            1.0 / set.len() as f64
        } else {
            0.0
        }
    }

    /// Cross-entropy of one routing distribution (given as logs) against class `c`'s teacher.
    fn cross_entropy(&self, c: usize, log_dist: impl Fn(usize) -> f64) -> f64 {
        let set = &self.experts_of_class[c];
        -set.iter().map(|&k| log_dist(k)).sum::<f64>() / set.len() as f64
    }
}

/// Mean cross-entropy of the ensemble prediction.
pub fn task_loss<D: AsRef<[f64]>>(ensemble_logits: &[D], labels: &[usize]) -> f64 {
    let n = labels.len().max(1) as f64;
    ensemble_logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| -tensor::log_softmax_scaled(l.as_ref(), 1.0)[y])
        .sum::<f64>()
        / n
}

fn entropy_of(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mean Shannon entropy of the distributions divided by `ln N`.
pub fn entropy_raw<D: AsRef<[f64]>>(dists: &[D]) -> f64 {
    let Some(first) = dists.first() else {
        return 0.0;
    };
    let ln_n = (first.as_ref().len() as f64).ln();
    dists.iter().map(|d| entropy_of(d.as_ref())).sum::<f64>() / (dists.len() as f64 * ln_n)
}

fn importance<D: AsRef<[f64]>>(dists: &[D]) -> Vec<f64> {
    let n = dists[0].as_ref().len();
    let mut imp = vec![0.0; n];
    for d in dists {
        for (acc, p) in imp.iter_mut().zip(d.as_ref()) {
            *acc += p;
        }
    }
    let b = dists.len() as f64;
    imp.iter_mut().for_each(|v| *v /= b);
    imp
}

/// The two parts of the balance loss: `(KL(importance ‖ uniform), Var(count)/mean(count)²)`.
pub fn balance_parts<D: AsRef<[f64]>>(dists: &[D], top2s: &[(usize, usize)]) -> (f64, f64) {
    if dists.is_empty() {
        return (0.0, 0.0);
    }
    let imp = importance(dists);
    let n = imp.len() as f64;
    let kl = imp
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * n).ln())
        .sum::<f64>()
        .max(0.0);

    let mut counts = vec![0.0f64; imp.len()];
    for &(a, b) in top2s {
        counts[a] += 1.0;
        counts[b] += 1.0;
    }
    let mean = counts.iter().sum::<f64>() / n;
    let spread = if mean > 0.0 {
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
        var / (mean * mean)
    } else {
        0.0
    };
    (kl, spread)
}

/// Combine the balance parts; `kl_frac = 0.5` weighs them 1:1.
pub fn balance_mix(kl: f64, spread: f64, kl_frac: f64) -> f64 {
    2.0 * (kl_frac * kl + (1.0 - kl_frac) * spread)
}

/// Balance loss with equal weighting of its two parts.
pub fn balance_raw<D: AsRef<[f64]>>(dists: &[D], top2s: &[(usize, usize)]) -> f64 {
    let (kl, spread) = balance_parts(dists, top2s);
    kl + spread
}

/// Mean cross-entropy of each routing distribution against the teacher expert of its label.
pub fn oracle_raw<D: AsRef<[f64]>>(
    dists: &[D],
    labels: &[usize],
    assignment: &OracleAssignment,
) -> f64 {
    let n = labels.len().max(1) as f64;
    dists
        .iter()
        .zip(labels)
        .map(|(d, &y)| assignment.cross_entropy(y, |k| d.as_ref()[k].ln()))
        .sum::<f64>()
        / n
}

/// Squared cosine between two vectors, or `None` if either is zero.
pub fn cos_squared(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (tensor::norm(a), tensor::norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c = tensor::dot(a, b) / (na * nb);
    Some(c * c)
}

/// Mean squared cosine over sample pairs. Pairs containing a zero vector are
/// skipped; their count is returned alongside the mean.
pub fn ortho_raw<D: AsRef<[f64]>>(pairs: &[(D, D)]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    for (a, b) in pairs {
        if let Some(c2) = cos_squared(a.as_ref(), b.as_ref()) {
            sum += c2;
            used += 1;
        }
    }
    let skipped = pairs.len() - used;
    (if used > 0 { sum / used as f64 } else { 0.0 }, skipped)
}

/// `∂cos²(u, v)/∂u`.
fn cos_squared_grad(u: &[f64], v: &[f64]) -> Vec<f64> {
    let (nu, nv) = (tensor::norm(u), tensor::norm(v));
    let c = tensor::dot(u, v) / (nu * nv);
    u.iter()
        .zip(v)
        .map(|(&ui, &vi)| 2.0 * c * (vi / (nu * nv) - c * ui / (nu * nu)))
        .collect()
}

/// Loss value, gradients and the per-sample quantities the trainer needs.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub grads: MoeParams,
    /// Samples whose selected experts emitted a zero logit vector.
    pub degenerate_ortho: usize,
    /// Top-1 expert per sample.
    pub top1: Vec<usize>,
    /// Encoder output per sample.
    pub features: Vec<Vec<f64>>,
}

/// Evaluate the full objective on `batch` and backpropagate it into every
/// learnable tensor. Gradients are accumulated sample by sample in batch order.
pub fn total_loss(
    model: &MoeModel,
    batch: &LabeledBatch,
    hp: &HyperParams,
    temperature: f64,
    assignment: &OracleAssignment,
    mode: RoutingMode<'_>,
) -> Result<LossEval, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if !(temperature > 0.0) {
        return Err(LossError::InvalidTemperature(temperature));
    }
    if assignment.experts_of_class.len() < batch.n_classes {
        return Err(LossError::AssignmentMismatch {
            have: assignment.experts_of_class.len(),
            need: batch.n_classes,
        });
    }
    let learned = matches!(mode, RoutingMode::Learned);
    let traces = model.trace_batch(batch, temperature, mode);
    let n_experts = model.n_experts();
    let bsz = batch.len() as f64;
    let inv_b = 1.0 / bsz;

    // Forward values.
    let router_dists: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| t.log_dist.iter().map(|l| l.exp()).collect())
        .collect();
    let top2s: Vec<(usize, usize)> = traces.iter().map(|t| t.outcome.top2).collect();
    let ens: Vec<&[f64]> = traces
        .iter()
        .map(|t| t.outcome.ensemble_logits.as_slice())
        .collect();
    let task = task_loss(&ens, &batch.labels);
    let entropy = entropy_raw(&router_dists);
    let (kl, spread) = balance_parts(&router_dists, &top2s);
    let balance = balance_mix(kl, spread, hp.balance_kl_frac);
    let oracle = traces
        .iter()
        .zip(&batch.labels)
        .map(|(t, &y)| assignment.cross_entropy(y, |k| t.log_dist[k]))
        .sum::<f64>()
        * inv_b;
    let pairs: Vec<(&[f64], &[f64])> = traces
        .iter()
        .map(|t| (t.expert_out[0].as_slice(), t.expert_out[1].as_slice()))
        .collect();
    let (ortho, degenerate_ortho) = ortho_raw(&pairs);
    let ortho_used = traces.len() - degenerate_ortho;
    let breakdown = LossBreakdown::compose(task, entropy, balance, oracle, ortho, hp);

    // Balance-KL slope per expert: ln(I_j N) + 1.
    let imp = importance(&router_dists);
    let kl_slope: Vec<f64> = imp
        .iter()
        .map(|&p| {
            if p > 0.0 {
                (p * n_experts as f64).ln() + 1.0
            } else {
                0.0
            }
        })
        .collect();

    let mut grads = MoeParams::zeros(&model.dims, n_experts);
    let coef = DistCoefs {
        entropy: hp.entropy * inv_b / ((n_experts as f64).ln() * temperature),
        oracle: hp.oracle * inv_b / temperature,
        balance: hp.balance * 2.0 * hp.balance_kl_frac * inv_b / temperature,
        ortho: if ortho_used > 0 {
            hp.ortho / ortho_used as f64
        } else {
            0.0
        },
    };
    for (i, trace) in traces.iter().enumerate() {
        backprop_sample(
            model,
            batch.row(i),
            batch.labels[i],
            trace,
            &router_dists[i],
            &kl_slope,
            assignment,
            temperature,
            inv_b,
            learned,
            &coef,
            &mut grads,
        );
    }

    Ok(LossEval {
        breakdown,
        grads,
        degenerate_ortho,
        top1: top2s.iter().map(|t| t.0).collect(),
        features: traces.into_iter().map(|t| t.features).collect(),
    })
}

struct DistCoefs {
    entropy: f64,
    oracle: f64,
    balance: f64,
    ortho: f64,
}

#[allow(clippy::too_many_arguments)]
fn backprop_sample(
    model: &MoeModel,
    x: &[f64],
    label: usize,
    trace: &SampleTrace,
    dist: &[f64],
    kl_slope: &[f64],
    assignment: &OracleAssignment,
    temperature: f64,
    inv_b: f64,
    learned: bool,
    coef: &DistCoefs,
    grads: &mut MoeParams,
) {
    let p = &model.params;
    let o = &trace.outcome;
    let (a, b) = o.top2;
    let (ga, gb) = o.gates;
    let z = &trace.features;

    // Task gradient w.r.t. ensemble logits.
    let mut d_ens: Vec<f64> = tensor::log_softmax_scaled(&o.ensemble_logits, 1.0)
        .into_iter()
        .map(|l| l.exp() * inv_b)
        .collect();
    d_ens[label] -= inv_b;

    let [ya, yb] = &trace.expert_out;
    let mut dya: Vec<f64> = d_ens.iter().map(|g| ga * g).collect();
    let mut dyb: Vec<f64> = d_ens.iter().map(|g| gb * g).collect();
    if coef.ortho != 0.0 && cos_squared(ya, yb).is_some() {
        for (d, g) in dya.iter_mut().zip(cos_squared_grad(ya, yb)) {
            *d += coef.ortho * g;
        }
        for (d, g) in dyb.iter_mut().zip(cos_squared_grad(yb, ya)) {
            *d += coef.ortho * g;
        }
    }

    let mut dz = vec![0.0; z.len()];
    for (id, dy) in [(a, &dya), (b, &dyb)] {
        accumulate_affine_grad(
            grads.expert_w.row_mut(id),
            grads.expert_b.row_mut(id),
            dy,
            z,
            1.0,
        );
        add_transposed_matvec(&mut dz, p.expert_w.row(id), dy);
    }

    // Router logits.
    let mut dl = vec![0.0; dist.len()];
    if learned {
        let dga = tensor::dot(&d_ens, ya);
        let dgb = tensor::dot(&d_ens, yb);
        let c = ga * gb * (dga - dgb) / temperature;
        dl[a] += c;
        dl[b] -= c;
    }
    let ent = entropy_of(dist);
    let slope_mean: f64 = dist.iter().zip(kl_slope).map(|(p, q)| p * q).sum();
    for k in 0..dist.len() {
        let pk = dist[k];
        let mut g = coef.entropy * pk * (trace.log_dist[k] + ent);
        g += coef.oracle * (pk - assignment.target(label, k));
        g += coef.balance * pk * (kl_slope[k] - slope_mean);
        dl[k] += g;
    }

    let r = &trace.router_hidden;
    accumulate_affine_grad(
        grads.router_w2.data_mut(),
        grads.router_b2.data_mut(),
        &dl,
        r,
        1.0,
    );
    let mut dr = vec![0.0; r.len()];
    add_transposed_matvec(&mut dr, p.router_w2.data(), &dl);
    dr.iter_mut().zip(r).for_each(|(d, rv)| *d *= 1.0 - rv * rv);
    accumulate_affine_grad(
        grads.router_w1.data_mut(),
        grads.router_b1.data_mut(),
        &dr,
        z,
        1.0,
    );
    add_transposed_matvec(&mut dz, p.router_w1.data(), &dr);

    // Encoder.
    dz.iter_mut().zip(z).for_each(|(d, zv)| *d *= 1.0 - zv * zv);
    let h = &trace.hidden;
    accumulate_affine_grad(
        grads.enc_w2.data_mut(),
        grads.enc_b2.data_mut(),
        &dz,
        h,
        1.0,
    );
    let mut dh = vec![0.0; h.len()];
    add_transposed_matvec(&mut dh, p.enc_w2.data(), &dz);
    dh.iter_mut().zip(h).for_each(|(d, hv)| *d *= 1.0 - hv * hv);
    accumulate_affine_grad(
        grads.enc_w1.data_mut(),
        grads.enc_b1.data_mut(),
        &dh,
        x,
        1.0,
    );
}
