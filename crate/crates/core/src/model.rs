//! Hierarchical mixture-of-experts forward pass.
//!
//! The encoder and router are two-layer tanh MLPs. Each expert owns a linear
//! classifier head and a unit-length prototype. Routing is a flat softmax over
//! all experts at temperature `T`; tiers are labels on expert ids used only by
//! diagnostics.

use crate::data::LabeledBatch;
use crate::rng::{self, Purpose, StreamRng};
use crate::tensor::{self, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// Expert counts per tier, e.g. `[8, 4, 4]`, `[4, 4, 4, 4]` or `[16]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierConfig {
    tier_sizes: Vec<usize>,
    tier_of: Vec<usize>,
}

impl TierConfig {
    pub fn new(tier_sizes: Vec<usize>) -> Result<Self, ModelError> {
        if tier_sizes.is_empty() || tier_sizes.contains(&0) {
            return Err(ModelError::InvalidConfig(
                "tier_sizes must be non-empty with positive entries".into(),
            ));
        }
        let tier_of = tier_sizes
            .iter()
            .enumerate()
            .flat_map(|(t, &n)| std::iter::repeat_n(t, n))
            .collect();
        Ok(Self {
            tier_sizes,
            tier_of,
        })
    }

    pub fn flat(n_experts: usize) -> Result<Self, ModelError> {
        Self::new(vec![n_experts])
    }

    pub fn tier_sizes(&self) -> &[usize] {
        &self.tier_sizes
    }

    pub fn n_experts(&self) -> usize {
        self.tier_of.len()
    }

    pub fn n_tiers(&self) -> usize {
        self.tier_sizes.len()
    }

    /// Tier of expert `id`. Panics if `id >= n_experts()`.
    pub fn tier_of(&self, id: usize) -> usize {
        self.tier_of[id]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_features: usize,
    pub feature_dim: usize,
    pub router_hidden: usize,
    pub n_classes: usize,
}

/// Every learnable tensor of the model. Gradients use the same struct.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub enc_w1: Tensor,
    pub enc_b1: Tensor,
    pub enc_w2: Tensor,
    pub enc_b2: Tensor,
    pub router_w1: Tensor,
    pub router_b1: Tensor,
    pub router_w2: Tensor,
    pub router_b2: Tensor,
    /// `[N, C, F]`
    pub expert_w: Tensor,
    /// `[N, C]`
    pub expert_b: Tensor,
    /// `[N, F]`
    pub prototypes: Tensor,
}

/// Stable tensor names, in checkpoint order.
pub const PARAM_NAMES: [&str; 11] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "router.w1",
    "router.b1",
    "router.w2",
    "router.b2",
    "experts.classifier_w",
    "experts.classifier_b",
    "experts.prototype",
];

impl MoeParams {
    pub fn zeros(dims: &ModelDims, n_experts: usize) -> Self {
        let (d, f, r, c, n) = (
            dims.n_features,
            dims.feature_dim,
            dims.router_hidden,
            dims.n_classes,
            n_experts,
        );
        Self {
            enc_w1: Tensor::zeros(&[f, d]),
            enc_b1: Tensor::zeros(&[f]),
            enc_w2: Tensor::zeros(&[f, f]),
            enc_b2: Tensor::zeros(&[f]),
            router_w1: Tensor::zeros(&[r, f]),
            router_b1: Tensor::zeros(&[r]),
            router_w2: Tensor::zeros(&[n, r]),
            router_b2: Tensor::zeros(&[n]),
            expert_w: Tensor::zeros(&[n, c, f]),
            expert_b: Tensor::zeros(&[n, c]),
            prototypes: Tensor::zeros(&[n, f]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 11] {
        [
            (PARAM_NAMES[0], &self.enc_w1),
            (PARAM_NAMES[1], &self.enc_b1),
            (PARAM_NAMES[2], &self.enc_w2),
            (PARAM_NAMES[3], &self.enc_b2),
            (PARAM_NAMES[4], &self.router_w1),
            (PARAM_NAMES[5], &self.router_b1),
            (PARAM_NAMES[6], &self.router_w2),
            (PARAM_NAMES[7], &self.router_b2),
            (PARAM_NAMES[8], &self.expert_w),
            (PARAM_NAMES[9], &self.expert_b),
            (PARAM_NAMES[10], &self.prototypes),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 11] {
        [
            (PARAM_NAMES[0], &mut self.enc_w1),
            (PARAM_NAMES[1], &mut self.enc_b1),
            (PARAM_NAMES[2], &mut self.enc_w2),
            (PARAM_NAMES[3], &mut self.enc_b2),
            (PARAM_NAMES[4], &mut self.router_w1),
            (PARAM_NAMES[5], &mut self.router_b1),
            (PARAM_NAMES[6], &mut self.router_w2),
            (PARAM_NAMES[7], &mut self.router_b2),
            (PARAM_NAMES[8], &mut self.expert_w),
            (PARAM_NAMES[9], &mut self.expert_b),
            (PARAM_NAMES[10], &mut self.prototypes),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Read-only view of one expert.
#[derive(Debug, Clone, Copy)]
pub struct ExpertView<'a> {
    pub prototype: &'a [f64],
    /// `[C, F]` row-major.
    pub classifier_w: &'a [f64],
    pub classifier_b: &'a [f64],
    pub tier: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub dims: ModelDims,
    pub tiers: TierConfig,
    pub params: MoeParams,
}

/// How experts are selected in a forward pass.
pub enum RoutingMode<'a> {
    /// Top-2 router logits, gates from a temperature softmax over the pair.
    Learned,
    /// Two distinct experts drawn uniformly, equal gates.
    RandomWarmup(&'a mut StreamRng),
}

/// Per-sample routing decision and ensemble prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOutcome {
    pub logits: Vec<f64>,
    pub dist: Vec<f64>,
    pub top2: (usize, usize),
    pub gates: (f64, f64),
    pub ensemble_logits: Vec<f64>,
    pub confidence: f64,
}

/// Intermediate activations kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct SampleTrace {
    pub hidden: Vec<f64>,
    pub features: Vec<f64>,
    pub router_hidden: Vec<f64>,
    /// Log of the router's own temperature softmax (even during warmup).
    pub log_dist: Vec<f64>,
    pub expert_out: [Vec<f64>; 2],
    pub outcome: RoutingOutcome,
}

fn uniform_init(rng: &mut StreamRng, t: &mut Tensor, fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

impl MoeModel {
    /// Uniform `±1/√fan_in` weights and biases, unit-length Gaussian prototypes.
    pub fn init(tiers: TierConfig, dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        if dims.n_features == 0
            || dims.feature_dim == 0
            || dims.router_hidden == 0
            || dims.n_classes == 0
        {
            return Err(ModelError::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        let n = tiers.n_experts();
        if n < 2 {
            return Err(ModelError::InvalidConfig(
                "top-2 routing needs at least two experts".into(),
            ));
        }
        let mut rng = rng::stream(seed, Purpose::Weights);
        let mut p = MoeParams::zeros(&dims, n);
        let (d, f, r) = (dims.n_features, dims.feature_dim, dims.router_hidden);
        uniform_init(&mut rng, &mut p.enc_w1, d);
        uniform_init(&mut rng, &mut p.enc_b1, d);
        uniform_init(&mut rng, &mut p.enc_w2, f);
        uniform_init(&mut rng, &mut p.enc_b2, f);
        uniform_init(&mut rng, &mut p.router_w1, f);
        uniform_init(&mut rng, &mut p.router_b1, f);
        uniform_init(&mut rng, &mut p.router_w2, r);
        uniform_init(&mut rng, &mut p.router_b2, r);
        uniform_init(&mut rng, &mut p.expert_w, f);
        uniform_init(&mut rng, &mut p.expert_b, f);
        for j in 0..n {
            let row = p.prototypes.row_mut(j);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            normalize(row);
        }
        Ok(Self {
            dims,
            tiers,
            params: p,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.tiers.n_experts()
    }

    pub fn expert(&self, id: usize) -> ExpertView<'_> {
        ExpertView {
            prototype: self.params.prototypes.row(id),
            classifier_w: self.params.expert_w.row(id),
            classifier_b: self.params.expert_b.row(id),
            tier: self.tiers.tier_of(id),
        }
    }

    /// Encoder output for one input row.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encode_traced(x).1
    }

    fn encode_traced(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let mut hidden = tensor::affine(p.enc_w1.data(), p.enc_b1.data(), x);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut features = tensor::affine(p.enc_w2.data(), p.enc_b2.data(), &hidden);
        features.iter_mut().for_each(|v| *v = v.tanh());
        (hidden, features)
    }

    fn expert_logits(&self, id: usize, features: &[f64]) -> Vec<f64> {
        tensor::affine(
            self.params.expert_w.row(id),
            self.params.expert_b.row(id),
            features,
        )
    }

    pub(crate) fn trace_sample(
        &self,
        x: &[f64],
        temperature: f64,
        forced: Option<(usize, usize)>,
    ) -> SampleTrace {
        let p = &self.params;
        let (hidden, features) = self.encode_traced(x);
        let mut router_hidden = tensor::affine(p.router_w1.data(), p.router_b1.data(), &features);
        router_hidden.iter_mut().for_each(|v| *v = v.tanh());
        let logits = tensor::affine(p.router_w2.data(), p.router_b2.data(), &router_hidden);
        let log_dist = tensor::log_softmax_scaled(&logits, temperature);

        let (top2, gates, dist) = match forced {
            Some(pair) => {
                let n = logits.len();
                (pair, (0.5, 0.5), vec![1.0 / n as f64; n])
            }
            None => {
                let top2 = top_two(&logits);
                // Two-way softmax over the selected logits; first >= second by construction.
                let first = 1.0 / (1.0 + ((logits[top2.1] - logits[top2.0]) / temperature).exp());
                let gates = (first, 1.0 - first);
                (top2, gates, log_dist.iter().map(|l| l.exp()).collect())
            }
        };

        let out_a = self.expert_logits(top2.0, &features);
        let out_b = self.expert_logits(top2.1, &features);
        let ensemble_logits: Vec<f64> = out_a
            .iter()
            .zip(&out_b)
            .map(|(a, b)| gates.0 * a + gates.1 * b)
            .collect();
        let confidence = tensor::log_softmax_scaled(&ensemble_logits, 1.0)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
            .exp();

        SampleTrace {
            hidden,
            features,
            router_hidden,
            log_dist,
            expert_out: [out_a, out_b],
            outcome: RoutingOutcome {
                logits,
                dist,
                top2,
                gates,
                ensemble_logits,
                confidence,
            },
        }
    }

    pub(crate) fn trace_batch(
        &self,
        batch: &LabeledBatch,
        temperature: f64,
        mode: RoutingMode<'_>,
    ) -> Vec<SampleTrace> {
        let n = self.n_experts();
        match mode {
            RoutingMode::Learned => (0..batch.len())
                .map(|i| self.trace_sample(batch.row(i), temperature, None))
                .collect(),
            RoutingMode::RandomWarmup(rng) => (0..batch.len())
                .map(|i| {
                    let pair = random_pair(rng, n);
                    self.trace_sample(batch.row(i), temperature, Some(pair))
                })
                .collect(),
        }
    }

    /// Route every row of `batch` at `temperature`.
    pub fn forward(
        &self,
        batch: &LabeledBatch,
        temperature: f64,
        mode: RoutingMode<'_>,
    ) -> Vec<RoutingOutcome> {
        self.trace_batch(batch, temperature, mode)
            .into_iter()
            .map(|t| t.outcome)
            .collect()
    }
}

/// Indices of the two largest values, lower index first on ties.
pub fn top_two(v: &[f64]) -> (usize, usize) {
    let first = tensor::argmax(v);
    let mut second = if first == 0 { 1 } else { 0 };
    for (i, &x) in v.iter().enumerate() {
        if i != first && x > v[second] {
            second = i;
        }
    }
    (first, second)
}

fn random_pair(rng: &mut StreamRng, n: usize) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

pub(crate) fn normalize(v: &mut [f64]) {
    let norm = tensor::norm(v);
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Argmax of the ensemble logits, lowest class on ties.
pub fn predict_label(outcome: &RoutingOutcome) -> usize {
    tensor::argmax(&outcome.ensemble_logits)
}
