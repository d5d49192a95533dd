//! Expert-ecology diagnostics.
//!
//! Everything here is computed from one evaluation pass: which expert is each
//! sample's top-1 and top-2 choice, how confident the ensemble is, and whether
//! it was right. From that we derive per-expert usage/accuracy categories,
//! tier usage, the tier-flow matrix and the easy/hard split per tier. The
//! trajectory helpers (revival, stability, phase) work on per-epoch series.

use crate::data::LabeledBatch;
use crate::hyperparams::{classify_phase, PhaseLabel};
use crate::model::{predict_label, MoeModel, RoutingMode, TierConfig};
use crate::tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Usage below this is DEAD.
pub const DEAD_USAGE: f64 = 0.01;
/// Usage at or above this is a core expert.
pub const CORE_USAGE: f64 = 0.03;

/// The temperatures of the standard sensitivity scan.
pub const DEFAULT_SCAN_TEMPS: [f64; 7] = [0.1, 0.3, 0.5, 0.7, 1.0, 2.0, 5.0];

#[derive(Debug, Error, PartialEq)]
pub enum EcologyError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("stability window needs at least 2 epochs, got {0}")]
    WindowTooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    PureCore,
    BroadCore,
    WeakCore,
    Edge,
    Noise,
    Dead,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::PureCore => "PURE_CORE",
            Category::BroadCore => "BROAD_CORE",
            Category::WeakCore => "WEAK_CORE",
            Category::Edge => "EDGE",
            Category::Noise => "NOISE",
            Category::Dead => "DEAD",
        }
    }
}

/// Taxonomy from usage `u` and accuracy `a`, both fractions. Lower bounds are inclusive.
pub fn classify_expert(u: f64, a: f64) -> Category {
    if u < DEAD_USAGE {
        Category::Dead
    } else if u < CORE_USAGE {
        if a >= 0.25 {
            Category::Edge
        } else {
            Category::Noise
        }
    } else if a >= 0.50 {
        Category::PureCore
    } else if a >= 0.30 {
        Category::BroadCore
    } else {
        Category::WeakCore
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceThresholds {
    /// Ensemble confidence strictly above this is easy.
    pub easy: f64,
    /// Ensemble confidence strictly below this is hard.
    pub hard: f64,
}

impl Default for ConfidenceThresholds {
    fn default() -> Self {
        Self {
            easy: 0.7,
            hard: 0.4,
        }
    }
}

/// One evaluated sample, reduced to what the diagnostics use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRouting {
    pub top2: (usize, usize),
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub id: usize,
    pub tier: usize,
    pub usage: f64,
    /// `None` when the expert is never a top-1 choice.
    pub accuracy: Option<f64>,
    pub category: Category,
    /// Cosine between the prototype and the mean feature of served samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_alignment: Option<f64>,
}

/// Joint distribution of (top-1 tier, top-2 tier) in percent, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierFlowMatrix {
    pub n_tiers: usize,
    pub pct: Vec<f64>,
}

impl TierFlowMatrix {
    pub fn get(&self, first: usize, second: usize) -> f64 {
        self.pct[first * self.n_tiers + second]
    }

    pub fn row_sum(&self, first: usize) -> f64 {
        self.pct[first * self.n_tiers..(first + 1) * self.n_tiers]
            .iter()
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.pct.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcologyReport {
    pub n_samples: usize,
    pub top1_accuracy: f64,
    pub experts: Vec<ExpertEntry>,
    pub dead_count: usize,
    pub active_count: usize,
    pub tier_usage: Vec<f64>,
    pub flow: TierFlowMatrix,
    /// Share of hard samples among those whose top-1 is in the tier; `None` for an unused tier.
    pub hard_ratio: Vec<Option<f64>>,
    pub easy_ratio: Vec<Option<f64>>,
    /// Hard ratio of the first tier over that of the last tier.
    pub t0_t2_hard_ratio: Option<f64>,
}

impl EcologyReport {
    /// Build the report from per-sample routing records.
    pub fn from_samples(
        tiers: &TierConfig,
        samples: &[SampleRouting],
        thresholds: ConfidenceThresholds,
    ) -> Result<Self, EcologyError> {
        if samples.is_empty() {
            return Err(EcologyError::EmptyEvaluation);
        }
        let n_experts = tiers.n_experts();
        let n_tiers = tiers.n_tiers();
        let total = samples.len() as f64;

        let mut served = vec![0usize; n_experts];
        let mut correct = vec![0usize; n_experts];
        let mut flow_counts = vec![0usize; n_tiers * n_tiers];
        let mut tier_served = vec![0usize; n_tiers];
        let mut tier_hard = vec![0usize; n_tiers];
        let mut tier_easy = vec![0usize; n_tiers];
        let mut n_correct = 0usize;
        for s in samples {
            let (first, second) = s.top2;
            served[first] += 1;
            if s.correct {
                correct[first] += 1;
                n_correct += 1;
            }
            let (ta, tb) = (tiers.tier_of(first), tiers.tier_of(second));
            flow_counts[ta * n_tiers + tb] += 1;
            tier_served[ta] += 1;
            if s.confidence < thresholds.hard {
                tier_hard[ta] += 1;
            }
            if s.confidence > thresholds.easy {
                tier_easy[ta] += 1;
            }
        }

        let experts: Vec<ExpertEntry> = (0..n_experts)
            .map(|id| {
                let usage = served[id] as f64 / total;
                let accuracy = (served[id] > 0).then(|| correct[id] as f64 / served[id] as f64);
                ExpertEntry {
                    id,
                    tier: tiers.tier_of(id),
                    usage,
                    accuracy,
                    category: classify_expert(usage, accuracy.unwrap_or(0.0)),
                    prototype_alignment: None,
                }
            })
            .collect();
        let dead_count = experts
            .iter()
            .filter(|e| e.category == Category::Dead)
            .count();

        let ratio = |num: &[usize]| -> Vec<Option<f64>> {
            (0..n_tiers)
                .map(|t| (tier_served[t] > 0).then(|| num[t] as f64 / tier_served[t] as f64))
                .collect()
        };
        let hard_ratio = ratio(&tier_hard);
        let easy_ratio = ratio(&tier_easy);
        let t0_t2_hard_ratio = match (hard_ratio[0], hard_ratio[n_tiers - 1]) {
            (Some(first), Some(last)) if last > 0.0 => Some(first / last),
            _ => None,
        };

        Ok(Self {
            n_samples: samples.len(),
            top1_accuracy: n_correct as f64 / total,
            dead_count,
            active_count: n_experts - dead_count,
            tier_usage: tier_served.iter().map(|&c| c as f64 / total).collect(),
            flow: TierFlowMatrix {
                n_tiers,
                pct: flow_counts
                    .iter()
                    .map(|&c| 100.0 * c as f64 / total)
                    .collect(),
            },
            hard_ratio,
            easy_ratio,
            t0_t2_hard_ratio,
            experts,
        })
    }

    pub fn count(&self, category: Category) -> usize {
        self.experts
            .iter()
            .filter(|e| e.category == category)
            .count()
    }
}

/// One learned-routing pass over `test` at `temperature`.
pub fn evaluate(
    model: &MoeModel,
    test: &LabeledBatch,
    temperature: f64,
    thresholds: ConfidenceThresholds,
) -> Result<EcologyReport, EcologyError> {
    if !(temperature > 0.0) {
        return Err(EcologyError::InvalidTemperature(temperature));
    }
    let traces = model.trace_batch(test, temperature, RoutingMode::Learned);
    let samples: Vec<SampleRouting> = traces
        .iter()
        .zip(&test.labels)
        .map(|(t, &y)| SampleRouting {
            top2: t.outcome.top2,
            confidence: t.outcome.confidence,
            correct: predict_label(&t.outcome) == y,
        })
        .collect();
    let mut report = EcologyReport::from_samples(&model.tiers, &samples, thresholds)?;

    let f = model.dims.feature_dim;
    let mut centroids = vec![0.0; model.n_experts() * f];
    for t in &traces {
        let c = &mut centroids[t.outcome.top2.0 * f..(t.outcome.top2.0 + 1) * f];
        c.iter_mut().zip(&t.features).for_each(|(c, z)| *c += z);
    }
    for e in &mut report.experts {
        let c = &centroids[e.id * f..(e.id + 1) * f];
        let (nc, np) = (tensor::norm(c), tensor::norm(model.expert(e.id).prototype));
        if nc > 0.0 && np > 0.0 {
            e.prototype_alignment = Some(tensor::dot(c, model.expert(e.id).prototype) / (nc * np));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub temperature: f64,
    pub top1_accuracy: f64,
    pub tier_usage: Vec<f64>,
    pub active_count: usize,
    pub dead_count: usize,
    pub t0_t2_hard_ratio: Option<f64>,
}

/// Evaluate frozen weights at each temperature.
pub fn temperature_scan(
    model: &MoeModel,
    test: &LabeledBatch,
    temps: &[f64],
    thresholds: ConfidenceThresholds,
) -> Result<Vec<ScanRow>, EcologyError> {
    if let Some(&bad) = temps.iter().find(|&&t| !(t > 0.0)) {
        return Err(EcologyError::InvalidTemperature(bad));
    }
    temps
        .iter()
        .map(|&t| {
            let r = evaluate(model, test, t, thresholds)?;
            Ok(ScanRow {
                temperature: t,
                top1_accuracy: r.top1_accuracy,
                tier_usage: r.tier_usage,
                active_count: r.active_count,
                dead_count: r.dead_count,
                t0_t2_hard_ratio: r.t0_t2_hard_ratio,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevivalStats {
    pub peak_dead: usize,
    pub final_dead: usize,
    pub revived: usize,
    pub peak_epoch: usize,
}

/// Peak and final DEAD count over `(epoch, dead)` points. The earliest epoch wins ties for the peak.
pub fn revival_stats(series: &[(usize, usize)]) -> Result<RevivalStats, EcologyError> {
    let &(_, final_dead) = series.last().ok_or(EcologyError::EmptyTrajectory)?;
    let (peak_epoch, peak_dead) =
        series
            .iter()
            .copied()
            .fold(series[0], |best, p| if p.1 > best.1 { p } else { best });
    Ok(RevivalStats {
        peak_dead,
        final_dead,
        revived: peak_dead - final_dead,
        peak_epoch,
    })
}

/// One epoch of a stability window.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityPoint {
    pub epoch: usize,
    pub top1: f64,
    pub tier_usage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub range: f64,
    /// Population standard deviation of top-1 accuracy.
    pub sigma: f64,
    /// Population variance of each tier's usage across the window.
    pub tier_usage_variance: Vec<f64>,
    /// Max minus min of each tier's usage across the window.
    pub tier_usage_range: Vec<f64>,
    pub max_tier_variation: f64,
}

pub fn stability_stats(window: &[StabilityPoint]) -> Result<StabilityStats, EcologyError> {
    if window.len() < 2 {
        return Err(EcologyError::WindowTooShort(window.len()));
    }
    let n = window.len() as f64;
    let acc: Vec<f64> = window.iter().map(|p| p.top1).collect();
    let mean = acc.iter().sum::<f64>() / n;
    let min = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sigma = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();

    let n_tiers = window.iter().map(|p| p.tier_usage.len()).min().unwrap_or(0);
    let mut tier_usage_variance = Vec::with_capacity(n_tiers);
    let mut tier_usage_range = Vec::with_capacity(n_tiers);
    for t in 0..n_tiers {
        let col: Vec<f64> = window.iter().map(|p| p.tier_usage[t]).collect();
        let m = col.iter().sum::<f64>() / n;
        tier_usage_variance.push(col.iter().map(|u| (u - m).powi(2)).sum::<f64>() / n);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        tier_usage_range.push(hi - lo);
    }
    let max_tier_variation = tier_usage_range.iter().copied().fold(0.0, f64::max);
    Ok(StabilityStats {
        mean,
        min,
        max,
        range: max - min,
        sigma,
        tier_usage_variance,
        tier_usage_range,
        max_tier_variation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub e: f64,
    pub phase: PhaseLabel,
    pub peak_dead: usize,
    pub final_dead: usize,
    /// The observed DEAD trajectory agrees with what the phase predicts.
    pub consistent: bool,
    /// Healthy by `E` yet experts are dead at the end: `E` alone does not
    /// account for the task's difficulty.
    pub task_complexity_flag: bool,
}

/// Compare the phase predicted by `e` with the observed `(epoch, dead)` series.
pub fn phase_report(series: &[(usize, usize)], e: f64) -> Result<PhaseSummary, EcologyError> {
    let rev = revival_stats(series)?;
    let phase = classify_phase(e);
    let task_complexity_flag = phase == PhaseLabel::Healthy && rev.final_dead > 0;
    let consistent = match phase {
        PhaseLabel::Healthy => !task_complexity_flag,
        PhaseLabel::ReversibleSubHealth => true,
        PhaseLabel::IrreversibleCollapse => rev.final_dead > 0,
    };
    Ok(PhaseSummary {
        e,
        phase,
        peak_dead: rev.peak_dead,
        final_dead: rev.final_dead,
        consistent,
        task_complexity_flag,
    })
}
