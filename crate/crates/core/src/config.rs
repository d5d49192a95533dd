//! Experiment configuration.
//!
//! Configs are TOML files whose leaves are addressed by flat dotted keys such
//! as `loss.b` or `train.epochs`. Every key has a default; unknown keys are
//! rejected by name. `--set key=value` overrides use the same dotted keys and
//! TOML value syntax.

use crate::data::DatasetSpec;
use crate::ecology::{ConfidenceThresholds, DEFAULT_SCAN_TEMPS};
use crate::hyperparams::{ComplexityFn, HyperParams};
use crate::losses::OracleAssignment;
use crate::model::{ModelDims, TierConfig};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("malformed override `{0}` (expected key=value)")]
    BadOverride(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub output_dir: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            output_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_classes: usize,
    pub n_features: usize,
    pub samples_per_class: usize,
    pub n_superclasses: usize,
    pub intra_spread: f64,
    pub inter_spread: f64,
    pub source: DataSource,
    /// Training rows when `source = "csv"`.
    pub csv_path: String,
    /// Evaluation rows when `source = "csv"`; empty evaluates on the training file.
    pub csv_test_path: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_features: 16,
            samples_per_class: 200,
            n_superclasses: 4,
            intra_spread: 1.0,
            inter_spread: 1.0,
            source: DataSource::Synthetic,
            csv_path: String::new(),
            csv_test_path: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub tier_sizes: Vec<usize>,
    pub feature_dim: usize,
    pub router_hidden: usize,
    pub n_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            tier_sizes: vec![8, 4, 4],
            feature_dim: 64,
            router_hidden: 32,
            n_classes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSection {
    pub t_init: f64,
    pub t_end: f64,
    pub anneal_epochs: usize,
    pub warmup_epochs: usize,
}

impl Default for RoutingSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            t_init: hp.t_init,
            t_end: hp.t_end,
            anneal_epochs: hp.anneal_epochs,
            warmup_epochs: hp.warmup_epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub h: f64,
    pub o: f64,
    pub b: f64,
    pub ortho: f64,
    pub complexity_fn: ComplexityFn,
    pub balance_kl_frac: f64,
    pub oracle_assignment: OracleKind,
    /// Number of teacher experts classes are dealt over; 0 means all experts.
    pub oracle_experts: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            h: hp.entropy,
            o: hp.oracle,
            b: hp.balance,
            ortho: hp.ortho,
            complexity_fn: ComplexityFn::One,
            balance_kl_frac: hp.balance_kl_frac,
            oracle_assignment: OracleKind::RoundRobin,
            oracle_experts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_experts_router: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let tc = TrainConfig::default();
        Self {
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            lr_encoder: tc.lr_encoder,
            lr_experts_router: tc.lr_experts_router,
            weight_decay: tc.weight_decay,
            eval_every: tc.eval_every,
            seed: tc.seed,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcologySection {
    pub easy_threshold: f64,
    pub hard_threshold: f64,
}

impl Default for EcologySection {
    fn default() -> Self {
        let t = ConfidenceThresholds::default();
        Self {
            easy_threshold: t.easy,
            hard_threshold: t.hard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSection {
    pub temps: Vec<f64>,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            temps: DEFAULT_SCAN_TEMPS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub routing: RoutingSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub ecology: EcologySection,
    pub scan: ScanSection,
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, value) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("non-empty key");
        let mut node = &mut root;
        for p in parts {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("config sections are tables");
        }
        node.insert(leaf.to_string(), value.clone());
    }
    root
}

/// Parse an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Every known dotted key with its default value.
    pub fn known_keys() -> BTreeMap<String, Value> {
        let table = Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
        let mut out = BTreeMap::new();
        flatten("", &table, &mut out);
        out
    }

    /// Parse TOML text, apply `key=value` overrides, validate.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let table: Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            flat.insert(k.trim().to_string(), parse_value(v));
        }
        let known = Self::known_keys();
        if let Some(unknown) = flat.keys().find(|k| !known.contains_key(*k)) {
            return Err(ConfigError::UnknownKey(unknown.clone()));
        }
        let cfg: ExperimentConfig = unflatten(&flat)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Apply further overrides to an already-built config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        Self::from_toml_with_overrides(&self.to_toml(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.model.n_classes != self.data.n_classes {
            return bad(format!(
                "model.n_classes ({}) must equal data.n_classes ({})",
                self.model.n_classes, self.data.n_classes
            ));
        }
        if self.data.source == DataSource::Csv && self.data.csv_path.is_empty() {
            return bad("data.csv_path is required when data.source = \"csv\"".into());
        }
        self.hyperparams()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tier_config()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.tier_config().map(|t| t.n_experts()).unwrap_or(0) < 2 {
            return bad("model.tier_sizes must total at least 2 experts".into());
        }
        if self.loss.oracle_experts > self.tier_config().map(|t| t.n_experts()).unwrap_or(0) {
            return bad("loss.oracle_experts exceeds the expert count".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let th = self.thresholds();
        if !(0.0..=1.0).contains(&th.hard) || !(0.0..=1.0).contains(&th.easy) || th.hard > th.easy {
            return bad("ecology thresholds must satisfy 0 <= hard <= easy <= 1".into());
        }
        if self.scan.temps.iter().any(|&t| !(t > 0.0)) {
            return bad("scan.temps must all be positive".into());
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> HyperParams {
        HyperParams {
            t_init: self.routing.t_init,
            t_end: self.routing.t_end,
            entropy: self.loss.h,
            oracle: self.loss.o,
            balance: self.loss.b,
            ortho: self.loss.ortho,
            anneal_epochs: self.routing.anneal_epochs,
            warmup_epochs: self.routing.warmup_epochs,
            balance_kl_frac: self.loss.balance_kl_frac,
        }
    }

    pub fn tier_config(&self) -> Result<TierConfig, crate::model::ModelError> {
        TierConfig::new(self.model.tier_sizes.clone())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_features: self.data.n_features,
            feature_dim: self.model.feature_dim,
            router_hidden: self.model.router_hidden,
            n_classes: self.model.n_classes,
        }
    }

    /// Synthetic data is seeded from the run seed.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_classes: self.data.n_classes,
            n_features: self.data.n_features,
            samples_per_class: self.data.samples_per_class,
            n_superclasses: self.data.n_superclasses,
            intra_spread: self.data.intra_spread,
            inter_spread: self.data.inter_spread,
            seed: self.train.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr_encoder: self.train.lr_encoder,
            lr_experts_router: self.train.lr_experts_router,
            weight_decay: self.train.weight_decay,
            eval_every: self.train.eval_every,
            seed: self.train.seed,
        }
    }

    pub fn thresholds(&self) -> ConfidenceThresholds {
        ConfidenceThresholds {
            easy: self.ecology.easy_threshold,
            hard: self.ecology.hard_threshold,
        }
    }

    pub fn oracle_assignment(&self) -> OracleAssignment {
        let n_experts: usize = self.model.tier_sizes.iter().sum();
        let targets = if self.loss.oracle_experts == 0 {
            n_experts
        } else {
            self.loss.oracle_experts
        };
        match self.loss.oracle_assignment {
            OracleKind::RoundRobin => OracleAssignment::round_robin(self.model.n_classes, targets),
        }
    }

    /// Short hash of everything that affects the run's results.
    pub fn config_hash(&self) -> String {
        let mut identity = self.clone();
        identity.experiment.output_dir.clear();
        let json = serde_json::to_vec(&identity).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .take(4)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// `<name>-<hash>-s<seed>`.
    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-s{}",
            self.experiment.name,
            self.config_hash(),
            self.train.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.hyperparams(), HyperParams::default());
    }

    #[test]
    fn known_keys_are_flat_and_complete() {
        let keys = ExperimentConfig::known_keys();
        for k in [
            "routing.t_init",
            "routing.t_end",
            "routing.anneal_epochs",
            "routing.warmup_epochs",
            "loss.h",
            "loss.o",
            "loss.b",
            "loss.ortho",
            "loss.complexity_fn",
            "loss.balance_kl_frac",
            "loss.oracle_assignment",
            "data.n_classes",
            "data.n_features",
            "data.samples_per_class",
            "data.n_superclasses",
            "data.intra_spread",
            "data.inter_spread",
            "data.source",
            "data.csv_path",
            "model.tier_sizes",
            "model.feature_dim",
            "model.router_hidden",
            "model.n_classes",
            "train.epochs",
            "train.batch_size",
            "train.lr_encoder",
            "train.lr_experts_router",
            "train.weight_decay",
            "train.eval_every",
            "train.seed",
            "train.checkpoint_every",
            "experiment.name",
            "experiment.output_dir",
        ] {
            assert!(keys.contains_key(k), "missing {k}");
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml("[loss]\nbb = 1.0\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "loss.bb"));
        let err =
            ExperimentConfig::from_toml_with_overrides("", &["train.epoch=3".into()]).unwrap_err();
        assert!(err.to_string().contains("train.epoch"));
    }

    #[test]
    fn overrides_take_precedence_and_parse_types() {
        let text = "[loss]\nb = 0.85\n[model]\ntier_sizes = [4, 4]\n";
        let cfg = ExperimentConfig::from_toml_with_overrides(
            text,
            &[
                "loss.b=0.4".into(),
                "model.tier_sizes=[16]".into(),
                "loss.complexity_fn=sqrt".into(),
                "experiment.name=abc".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss.b, 0.4);
        assert_eq!(cfg.model.tier_sizes, vec![16]);
        assert_eq!(cfg.loss.complexity_fn, ComplexityFn::Sqrt);
        assert_eq!(cfg.experiment.name, "abc");
    }

    #[test]
    fn integer_where_float_expected_is_accepted() {
        let cfg = ExperimentConfig::from_toml_with_overrides("", &["loss.b=6".into()]).unwrap();
        assert_eq!(cfg.loss.b, 6.0);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(
            ExperimentConfig::from_toml_with_overrides("", &["model.n_classes=3".into()]).is_err()
        );
        assert!(
            ExperimentConfig::from_toml_with_overrides("", &["train.eval_every=0".into()]).is_err()
        );
        assert!(
            ExperimentConfig::from_toml_with_overrides("", &["routing.t_end=9".into()]).is_err()
        );
        assert!(
            ExperimentConfig::from_toml_with_overrides("", &["data.source=csv".into()]).is_err()
        );
        assert!(ExperimentConfig::from_toml_with_overrides("", &["nokey".into()]).is_err());
    }

    #[test]
    fn run_id_tracks_config_but_not_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.experiment.output_dir = "/elsewhere".into();
        assert_eq!(a.run_id(), b.run_id());
        let c = a.with_overrides(&["loss.ortho=0.1".into()]).unwrap();
        assert_ne!(a.run_id(), c.run_id());
        assert!(a.run_id().starts_with("run-") && a.run_id().ends_with("-s0"));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["train.seed=9".into(), "scan.temps=[0.5, 1.0]".into()])
            .unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn oracle_assignment_respects_teacher_count() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["loss.oracle_experts=4".into()])
            .unwrap();
        let single: Vec<Vec<usize>> = [0, 1, 2, 3, 0, 1, 2, 3].iter().map(|&e| vec![e]).collect();
        assert_eq!(cfg.oracle_assignment().experts_of_class, single);
        // Default: all 16 experts dealt over 8 classes.
        let all = ExperimentConfig::default().oracle_assignment();
        assert_eq!(all.experts_of_class[0], vec![0, 8]);
        assert_eq!(all.experts_of_class[7], vec![7, 15]);
    }
}
