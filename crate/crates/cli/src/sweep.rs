//! One run per value of a single config key, executed in parallel.

use crate::run::cmd_train;
use crate::{io_err, write_atomic, CliError};
use moe_ecology::config::{ConfigError, ExperimentConfig};
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub run_id: String,
    pub status: String,
    pub final_epoch: Option<usize>,
    pub final_dead: Option<usize>,
    pub final_active: Option<usize>,
    pub final_top1: Option<f64>,
    #[serde(rename = "E")]
    pub e: Option<f64>,
    #[serde(rename = "E_nominal")]
    pub e_nominal: Option<f64>,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub key: String,
    pub rows: Vec<SweepRow>,
    pub failures: usize,
    pub csv_path: PathBuf,
}

/// Split `key=v1,v2,...`. Commas inside brackets belong to the value, so list
/// values such as `model.tier_sizes=[8,4,4],[16]` work.
pub fn parse_axis(spec: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, list) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("axis `{spec}` must look like key=v1,v2,...")))?;
    let key = key.trim().to_string();
    let mut values = Vec::new();
    let (mut depth, mut cur) = (0i32, String::new());
    for ch in list.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                values.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    values.push(cur);
    let values: Vec<String> = values
        .into_iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::Usage(format!("axis `{key}` has no values")));
    }
    Ok((key, values))
}

fn run_one(base: &ExperimentConfig, key: &str, value: &str) -> SweepRow {
    let mut row = SweepRow {
        value: value.to_string(),
        run_id: String::new(),
        status: "failed".into(),
        final_epoch: None,
        final_dead: None,
        final_active: None,
        final_top1: None,
        e: None,
        e_nominal: None,
        error: String::new(),
    };
    let cfg = match base.with_overrides(&[format!("{key}={value}")]) {
        Ok(c) => c,
        Err(e) => {
            row.error = e.to_string();
            return row;
        }
    };
    row.run_id = cfg.run_id();
    match cmd_train(&cfg, None, &mut std::io::sink()) {
        Ok(outcome) => {
            row.status = "ok".into();
            row.e_nominal = outcome.e_nominal;
            if let Some(r) = outcome.last_record {
                row.final_epoch = Some(r.epoch);
                row.final_dead = Some(r.dead_count);
                row.final_active = Some(r.active_count);
                row.final_top1 = Some(r.top1);
                row.e = r.e;
            }
        }
        Err(e) => row.error = e.to_string(),
    }
    row
}

/// Run the sweep with `jobs` worker threads and write a summary CSV to the
/// output root. Failed runs are recorded and do not stop the sweep.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    axis: &str,
    jobs: usize,
    out: &mut dyn Write,
) -> Result<SweepSummary, CliError> {
    let (key, values) = parse_axis(axis)?;
    if !ExperimentConfig::known_keys().contains_key(&key) {
        return Err(ConfigError::UnknownKey(key).into());
    }
    base.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let rows: Vec<SweepRow> =
        pool.install(|| values.par_iter().map(|v| run_one(base, &key, v)).collect());

    let root = Path::new(&base.experiment.output_dir);
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    let csv_path = root.join(format!("sweep-{}-{}.csv", base.experiment.name, key));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).expect("in-memory csv");
    }
    write_atomic(&csv_path, &w.into_inner().expect("in-memory csv"))?;

    let failures = rows.iter().filter(|r| r.status != "ok").count();
    for r in &rows {
        let line = if r.status == "ok" {
            format!(
                "{key}={:<10} {}  dead={}  top1={}  E={}",
                r.value,
                r.run_id,
                r.final_dead.map_or("-".into(), |d| d.to_string()),
                r.final_top1.map_or("-".into(), crate::pct),
                crate::opt(r.e_nominal, 4)
            )
        } else {
            format!("{key}={:<10} FAILED: {}", r.value, r.error)
        };
        writeln!(out, "{line}").map_err(io_err(&csv_path))?;
    }
    writeln!(
        out,
        "{} runs, {failures} failed; summary in {}",
        rows.len(),
        csv_path.display()
    )
    .map_err(io_err(&csv_path))?;
    Ok(SweepSummary {
        key,
        rows,
        failures,
        csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        let (k, v) = parse_axis("loss.ortho=0,0.02, 0.05").unwrap();
        assert_eq!(k, "loss.ortho");
        assert_eq!(v, ["0", "0.02", "0.05"]);
        let (_, v) = parse_axis("model.tier_sizes=[8,4,4],[16]").unwrap();
        assert_eq!(v, ["[8,4,4]", "[16]"]);
    }

    #[test]
    fn empty_axis_is_usage_error() {
        for bad in ["loss.ortho=", "loss.ortho= , ", "loss.ortho"] {
            assert_eq!(parse_axis(bad).unwrap_err().exit_code(), 2, "{bad}");
        }
    }
}
