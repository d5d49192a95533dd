//! JSONL metrics records: one self-contained JSON object per evaluation epoch.

use crate::ecology::{ExpertEntry, StabilityPoint};
use crate::losses::LossBreakdown;
use crate::trainer::EpochRecord;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("line {line}: schema_version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaMismatch { line: usize, found: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseTag {
    Warmup,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub epoch: usize,
    pub phase_tag: PhaseTag,
    pub temperature: f64,
    #[serde(rename = "E")]
    pub e: Option<f64>,
    #[serde(rename = "E_nominal")]
    pub e_nominal: Option<f64>,
    pub top1: f64,
    pub loss: LossBreakdown,
    pub dead_count: usize,
    pub active_count: usize,
    pub tier_sizes: Vec<usize>,
    pub tier_usage: Vec<f64>,
    /// Tier-flow matrix in percent, row-major `[top-1 tier][top-2 tier]`.
    pub flow: Vec<f64>,
    pub hard_ratio: Vec<Option<f64>>,
    pub easy_ratio: Vec<Option<f64>>,
    pub t0_t2_hard_ratio: Option<f64>,
    pub experts: Vec<ExpertEntry>,
}

impl MetricsRecord {
    pub fn from_epoch(run_id: &str, tier_sizes: &[usize], r: &EpochRecord) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.to_string(),
            epoch: r.epoch,
            phase_tag: if r.warmup {
                PhaseTag::Warmup
            } else {
                PhaseTag::Learned
            },
            temperature: r.temperature,
            e: r.e,
            e_nominal: r.e_nominal,
            top1: r.report.top1_accuracy,
            loss: r.loss,
            dead_count: r.report.dead_count,
            active_count: r.report.active_count,
            tier_sizes: tier_sizes.to_vec(),
            tier_usage: r.report.tier_usage.clone(),
            flow: r.report.flow.pct.clone(),
            hard_ratio: r.report.hard_ratio.clone(),
            easy_ratio: r.report.easy_ratio.clone(),
            t0_t2_hard_ratio: r.report.t0_t2_hard_ratio,
            experts: r.report.experts.clone(),
        }
    }

    /// Serialize as one JSON line, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics record serializes")
    }

    /// Parse one line; `line` is 1-based and only used in errors.
    pub fn parse_line(text: &str, line: usize) -> Result<Self, MetricsError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| MetricsError::Parse {
                line,
                msg: e.to_string(),
            })?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            _ => {
                return Err(MetricsError::SchemaMismatch {
                    line,
                    found: value
                        .get("schema_version")
                        .map(|v| v.to_string())
                        .unwrap_or_else(|| "missing".into()),
                })
            }
        }
        serde_json::from_value(value).map_err(|e| MetricsError::Parse {
            line,
            msg: e.to_string(),
        })
    }

    pub fn stability_point(&self) -> StabilityPoint {
        StabilityPoint {
            epoch: self.epoch,
            top1: self.top1,
            tier_usage: self.tier_usage.clone(),
        }
    }
}

/// Parse a whole metrics file, skipping blank lines.
pub fn parse_jsonl(text: &str) -> Result<Vec<MetricsRecord>, MetricsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricsRecord::parse_line(l, i + 1))
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

/// `(epoch, DEAD count)` per record.
pub fn dead_series(records: &[MetricsRecord]) -> Vec<(usize, usize)> {
    records.iter().map(|r| (r.epoch, r.dead_count)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(epoch: usize) -> MetricsRecord {
        MetricsRecord {
            schema_version: SCHEMA_VERSION,
            run_id: "r".into(),
            epoch,
            phase_tag: PhaseTag::Learned,
            temperature: 0.3,
            e: Some(0.0545),
            e_nominal: Some(0.545),
            top1: 0.5,
            loss: LossBreakdown::default(),
            dead_count: 1,
            active_count: 3,
            tier_sizes: vec![4],
            tier_usage: vec![1.0],
            flow: vec![100.0],
            hard_ratio: vec![Some(0.1)],
            easy_ratio: vec![None],
            t0_t2_hard_ratio: Some(1.0),
            experts: vec![],
        }
    }

    #[test]
    fn line_round_trip() {
        let r = minimal(3);
        let line = r.to_line();
        assert!(!line.contains('\n'));
        assert!(line.starts_with("{\"schema_version\":1"));
        assert_eq!(MetricsRecord::parse_line(&line, 1).unwrap(), r);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let line = minimal(0)
            .to_line()
            .replace("\"schema_version\":1", "\"schema_version\":2");
        assert!(matches!(
            MetricsRecord::parse_line(&line, 4),
            Err(MetricsError::SchemaMismatch { line: 4, .. })
        ));
    }

    #[test]
    fn blank_lines_are_skipped() {
        let text = format!("{}\n\n{}\n", minimal(0).to_line(), minimal(10).to_line());
        let recs = parse_jsonl(&text).unwrap();
        assert_eq!(dead_series(&recs), vec![(0, 1), (10, 1)]);
    }
}
