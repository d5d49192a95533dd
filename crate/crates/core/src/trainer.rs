//! The training loop.
//!
//! Per epoch: routing is random during the first `warmup_epochs` and learned
//! afterwards, the temperature follows [`temperature_at`], the training split
//! is reshuffled from the run's shuffle stream and consumed in mini-batches.
//! Each step applies AdamW with per-group learning rates that share one cosine
//! decay to zero over the whole run. Evaluation runs every `eval_every` epochs
//! (and after the last epoch) at the current temperature.
//!
//! All reductions run sequentially in sample order, so a `(seed, config)` pair
//! always produces the same bits.

use crate::data::LabeledBatch;
use crate::ecology::{self, ConfidenceThresholds, EcologyError, EcologyReport, StabilityPoint};
use crate::hyperparams::{compute_e, temperature_at, HyperParams};
use crate::losses::{self, LossBreakdown, LossError, OracleAssignment};
use crate::model::{self, MoeModel, RoutingMode};
use crate::optim::{cosine_lr, AdamW};
use crate::rng::{self, Purpose, StreamRng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prototype pull toward the mean feature of the samples an expert serves.
const PROTOTYPE_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch_index}: {breakdown:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch_index: usize,
        sample_indices: Vec<usize>,
        breakdown: LossBreakdown,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ecology(#[from] EcologyError),
    #[error("sink error: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_experts_router: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr_encoder: 1e-4,
            lr_experts_router: 1e-3,
            weight_decay: 5e-4,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.epochs > 0 && self.eval_every > self.epochs {
            return bad("eval_every must not exceed epochs");
        }
        if !(self.lr_encoder > 0.0 && self.lr_experts_router > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub warmup: bool,
    pub temperature: f64,
    /// `E` at the current temperature; `None` when `O + B = 0`.
    pub e: Option<f64>,
    /// `E` at the initial temperature.
    pub e_nominal: Option<f64>,
    /// Mean loss over the epoch's training batches.
    pub loss: LossBreakdown,
    pub report: EcologyReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrajectory {
    pub records: Vec<EpochRecord>,
}

impl RunTrajectory {
    /// `(epoch, DEAD count)` per record.
    pub fn dead_series(&self) -> Vec<(usize, usize)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.report.dead_count))
            .collect()
    }

    /// Records with `lo <= epoch <= hi`, as stability points.
    pub fn window(&self, lo: usize, hi: usize) -> Vec<StabilityPoint> {
        self.records
            .iter()
            .filter(|r| (lo..=hi).contains(&r.epoch))
            .map(|r| StabilityPoint {
                epoch: r.epoch,
                top1: r.report.top1_accuracy,
                tier_usage: r.report.tier_usage.clone(),
            })
            .collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Receives evaluation records and end-of-epoch notifications.
pub trait TrainObserver {
    fn on_record(&mut self, _record: &EpochRecord) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called after epoch `epoch` has finished; `trainer.next_epoch == epoch + 1`.
    fn on_epoch_end(&mut self, _trainer: &Trainer, _epoch: usize) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub records: Vec<EpochRecord>,
}

impl TrainObserver for Recorder {
    fn on_record(&mut self, record: &EpochRecord) -> Result<(), TrainError> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: MoeModel,
    pub optimizer: AdamW,
    pub shuffle_rng: StreamRng,
    pub routing_rng: StreamRng,
    pub next_epoch: usize,
}

impl Trainer {
    pub fn new(model: MoeModel, tc: &TrainConfig) -> Self {
        let optimizer = AdamW::new(&model.params, tc.weight_decay);
        Self {
            model,
            optimizer,
            shuffle_rng: rng::stream(tc.seed, Purpose::Shuffle),
            routing_rng: rng::stream(tc.seed, Purpose::Routing),
            next_epoch: 0,
        }
    }

    /// Train from `next_epoch` up to `tc.epochs`.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &mut self,
        train: &LabeledBatch,
        test: &LabeledBatch,
        hp: &HyperParams,
        tc: &TrainConfig,
        assignment: &OracleAssignment,
        thresholds: ConfidenceThresholds,
        observer: &mut dyn TrainObserver,
    ) -> Result<RunTrajectory, TrainError> {
        self.run_until(
            train, test, hp, tc, assignment, thresholds, tc.epochs, observer,
        )
    }

    /// Train from `next_epoch` up to `until` (capped at `tc.epochs`). Schedules
    /// and evaluation cadence still follow `tc`, so a run split into several
    /// calls, possibly with different loss weights, follows one timeline.
    #[allow(clippy::too_many_arguments)]
    pub fn run_until(
        &mut self,
        train: &LabeledBatch,
        test: &LabeledBatch,
        hp: &HyperParams,
        tc: &TrainConfig,
        assignment: &OracleAssignment,
        thresholds: ConfidenceThresholds,
        until: usize,
        observer: &mut dyn TrainObserver,
    ) -> Result<RunTrajectory, TrainError> {
        tc.validate()?;
        hp.validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if tc.epochs > 0 && (train.is_empty() || test.is_empty()) {
            return Err(TrainError::InvalidConfig("training data is empty".into()));
        }
        let steps_per_epoch = tc.steps_per_epoch(train.len());
        let total_steps = (tc.epochs * steps_per_epoch) as u64;
        let mut trajectory = RunTrajectory::default();

        while self.next_epoch < until.min(tc.epochs) {
            let epoch = self.next_epoch;
            let warmup = epoch < hp.warmup_epochs;
            let temperature = temperature_at(hp, epoch);

            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut self.shuffle_rng);

            let mut losses_seen = Vec::with_capacity(steps_per_epoch);
            for (batch_index, idx) in order.chunks(tc.batch_size).enumerate() {
                let batch = train.select(idx);
                let mode = if warmup {
                    RoutingMode::RandomWarmup(&mut self.routing_rng)
                } else {
                    RoutingMode::Learned
                };
                let eval =
                    losses::total_loss(&self.model, &batch, hp, temperature, assignment, mode)?;
                let non_finite = || TrainError::NonFiniteLoss {
                    epoch,
                    batch_index,
                    sample_indices: idx.to_vec(),
                    breakdown: eval.breakdown,
                };
                if !eval.breakdown.is_finite() || !eval.grads.is_finite() {
                    return Err(non_finite());
                }
                let step = (epoch * steps_per_epoch + batch_index) as u64;
                self.optimizer.update(
                    &mut self.model.params,
                    &eval.grads,
                    cosine_lr(tc.lr_encoder, step, total_steps),
                    cosine_lr(tc.lr_experts_router, step, total_steps),
                );
                update_prototypes(&mut self.model, &eval.top1, &eval.features);
                if !self.model.params.is_finite() {
                    return Err(non_finite());
                }
                losses_seen.push(eval.breakdown);
            }
            self.next_epoch = epoch + 1;

            if epoch % tc.eval_every == 0 || epoch + 1 == tc.epochs {
                let report = ecology::evaluate(&self.model, test, temperature, thresholds)?;
                let record = EpochRecord {
                    epoch,
                    warmup,
                    temperature,
                    e: compute_e(hp, temperature).ok(),
                    e_nominal: hp.nominal_e().ok(),
                    loss: LossBreakdown::mean(&losses_seen),
                    report,
                };
                observer.on_record(&record)?;
                trajectory.records.push(record);
            }
            observer.on_epoch_end(self, epoch)?;
        }
        Ok(trajectory)
    }
}

/// Move each expert's prototype toward the mean feature of the samples it
/// served as top-1 in this batch, then renormalize to unit length.
fn update_prototypes(model: &mut MoeModel, top1: &[usize], features: &[Vec<f64>]) {
    let f = model.dims.feature_dim;
    let n = model.n_experts();
    let mut sums = vec![0.0; n * f];
    let mut counts = vec![0usize; n];
    for (&e, z) in top1.iter().zip(features) {
        counts[e] += 1;
        sums[e * f..(e + 1) * f]
            .iter_mut()
            .zip(z)
            .for_each(|(s, v)| *s += v);
    }
    for e in (0..n).filter(|&e| counts[e] > 0) {
        let inv = 1.0 / counts[e] as f64;
        let proto = model.params.prototypes.row_mut(e);
        for (p, s) in proto.iter_mut().zip(&sums[e * f..(e + 1) * f]) {
            *p = PROTOTYPE_MOMENTUM * *p + (1.0 - PROTOTYPE_MOMENTUM) * s * inv;
        }
        model::normalize(proto);
    }
}
