//! Read-only rendering of finished runs: revival trajectory, phase, stability
//! over a window, and a side-by-side comparison of several runs.

use crate::run::METRICS_FILE;
use crate::{opt, pct, CliError};
use moe_ecology::ecology::{self, StabilityPoint, StabilityStats};
use moe_ecology::metrics::{self, MetricsRecord};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Inclusive epoch range parsed from `lo:hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochWindow {
    pub lo: usize,
    pub hi: usize,
}

impl EpochWindow {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Usage(format!("window `{s}` must look like lo:hi"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let lo = a.trim().parse().map_err(|_| bad())?;
        let hi = b.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, epoch: usize) -> bool {
        (self.lo..=self.hi).contains(&epoch)
    }
}

/// Accepts a run directory or a metrics file.
pub fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(METRICS_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn load_run(p: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let path = metrics_path(p);
    let records = metrics::read_jsonl(&path).map_err(|source| CliError::Metrics {
        path: path.clone(),
        source,
    })?;
    if records.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no records",
            path.display()
        )));
    }
    Ok(records)
}

fn points(records: &[MetricsRecord], window: Option<EpochWindow>) -> Vec<StabilityPoint> {
    records
        .iter()
        .filter(|r| window.is_none_or(|w| w.contains(r.epoch)))
        .map(MetricsRecord::stability_point)
        .collect()
}

/// Stability of one run over `window`, or over all of its records.
pub fn run_stability(
    records: &[MetricsRecord],
    window: Option<EpochWindow>,
) -> Result<StabilityStats, CliError> {
    Ok(ecology::stability_stats(&points(records, window))?)
}

fn render_run(
    records: &[MetricsRecord],
    window: Option<EpochWindow>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let w = |e| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    let first = &records[0];
    writeln!(out, "run {}  tiers {:?}", first.run_id, first.tier_sizes).map_err(w)?;
    writeln!(
        out,
        "{:>6} {:>8} {:>7} {:>7} {:>7} {:>5} {:>7}",
        "epoch", "phase", "T", "E", "top1", "dead", "active"
    )
    .map_err(w)?;
    let n_experts: usize = first.tier_sizes.iter().sum();
    for r in records {
        writeln!(
            out,
            "{:>6} {:>8} {:>7.3} {:>7} {:>7} {:>5} {:>7}",
            r.epoch,
            format!("{:?}", r.phase_tag).to_lowercase(),
            r.temperature,
            opt(r.e, 4),
            pct(r.top1),
            r.dead_count,
            format!("{}/{}", r.active_count, n_experts)
        )
        .map_err(w)?;
    }

    let series = metrics::dead_series(records);
    let rev = ecology::revival_stats(&series)?;
    writeln!(
        out,
        "revival: peak {} (epoch {}), final {}, revived {}",
        rev.peak_dead, rev.peak_epoch, rev.final_dead, rev.revived
    )
    .map_err(w)?;
    match first.e_nominal {
        Some(e) => {
            let ph = ecology::phase_report(&series, e)?;
            writeln!(
                out,
                "phase: E={:.4} {:?}  consistent={}{}",
                e,
                ph.phase,
                ph.consistent,
                if ph.task_complexity_flag {
                    "  (dead experts despite healthy E: task complexity)"
                } else {
                    ""
                }
            )
            .map_err(w)?;
        }
        None => writeln!(out, "phase: E undefined").map_err(w)?,
    }
    if let Some(win) = window {
        let s = run_stability(records, Some(win))?;
        writeln!(
            out,
            "stability {}:{}: mean {:.2}  min {:.2}  max {:.2}  range {:.2}  sigma {:.3}  max tier variation {:.2}pp",
            win.lo,
            win.hi,
            100.0 * s.mean,
            100.0 * s.min,
            100.0 * s.max,
            100.0 * s.range,
            100.0 * s.sigma,
            100.0 * s.max_tier_variation
        )
        .map_err(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub run_id: String,
    pub tier_sizes: Vec<usize>,
    pub stats: StabilityStats,
    pub final_dead: usize,
}

/// Mean and spread of top-1 accuracy per run, over `window` or all records.
pub fn compare(
    runs: &[Vec<MetricsRecord>],
    window: Option<EpochWindow>,
) -> Result<Vec<ComparisonRow>, CliError> {
    runs.iter()
        .map(|recs| {
            Ok(ComparisonRow {
                run_id: recs[0].run_id.clone(),
                tier_sizes: recs[0].tier_sizes.clone(),
                stats: run_stability(recs, window)?,
                final_dead: recs.last().map_or(0, |r| r.dead_count),
            })
        })
        .collect()
}

pub fn cmd_report(
    paths: &[PathBuf],
    window: Option<EpochWindow>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if paths.is_empty() {
        return Err(CliError::Usage("report needs at least one run".into()));
    }
    let runs = paths
        .iter()
        .map(|p| load_run(p))
        .collect::<Result<Vec<_>, _>>()?;
    for recs in &runs {
        render_run(recs, window, out)?;
        writeln!(out).ok();
    }
    if runs.len() > 1 {
        let rows = compare(&runs, window)?;
        let w = |e| CliError::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        };
        writeln!(
            out,
            "{:<32} {:<14} {:>8} {:>7} {:>7} {:>5}",
            "run", "tiers", "mean", "sigma", "range", "dead"
        )
        .map_err(w)?;
        for r in rows {
            writeln!(
                out,
                "{:<32} {:<14} {:>8.2} {:>7.3} {:>7.2} {:>5}",
                r.run_id,
                format!("{:?}", r.tier_sizes),
                100.0 * r.stats.mean,
                100.0 * r.stats.sigma,
                100.0 * r.stats.range,
                r.final_dead
            )
            .map_err(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_parsing() {
        assert_eq!(
            EpochWindow::parse("91:99").unwrap(),
            EpochWindow { lo: 91, hi: 99 }
        );
        for bad in ["91", "a:b", "9:1", ""] {
            assert_eq!(EpochWindow::parse(bad).unwrap_err().exit_code(), 2);
        }
    }
}
