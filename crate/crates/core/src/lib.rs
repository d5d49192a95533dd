//! Hierarchical mixture-of-experts training with expert-ecology diagnostics.
//!
//! The exploration budget `E = T·H / (O + B)` ([`hyperparams`]) summarizes how
//! much room the router has to explore expert assignments. The crate trains a
//! small top-2 MoE classifier on synthetic or CSV data ([`data`], [`model`],
//! [`losses`], [`trainer`]) and measures the resulting expert ecology: dead and
//! core experts, tier usage and flow, revival and stability ([`ecology`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ecology;
pub mod gradcheck;
pub mod hyperparams;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{ConfigError, ExperimentConfig};
pub use data::{generate, load_csv, DataError, DatasetSpec, LabeledBatch, SyntheticDataset};
pub use ecology::{
    classify_expert, evaluate, phase_report, revival_stats, stability_stats, temperature_scan,
    Category, ConfidenceThresholds, EcologyError, EcologyReport, RevivalStats, StabilityStats,
    TierFlowMatrix,
};
pub use hyperparams::{
    classify_phase, compute_e, compute_e_eff, temperature_at, ComplexityFn, HyperParams, PhaseLabel,
};
pub use losses::{total_loss, LossBreakdown, OracleAssignment};
pub use metrics::{MetricsRecord, SCHEMA_VERSION};
pub use model::{predict_label, ModelDims, MoeModel, RoutingMode, RoutingOutcome, TierConfig};
pub use trainer::{EpochRecord, RunTrajectory, TrainConfig, TrainError, Trainer};
