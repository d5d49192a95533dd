//! `train`, `eval` and `scan`.

use crate::{io_err, load_data, open_checkpoint, opt, pct, run_dir, write_atomic, CliError};
use moe_ecology::checkpoint::{save_checkpoint, Checkpoint};
use moe_ecology::config::ExperimentConfig;
use moe_ecology::data::LabeledBatch;
use moe_ecology::ecology::{self, EcologyReport, ScanRow};
use moe_ecology::hyperparams::temperature_at;
use moe_ecology::metrics::{MetricsRecord, SCHEMA_VERSION};
use moe_ecology::model::MoeModel;
use moe_ecology::trainer::{EpochRecord, TrainError, TrainObserver, Trainer};
use serde::Serialize;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "ecology_report.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DUMP_FILE: &str = "nonfinite_batch.json";

/// Path of the periodic checkpoint taken once `next_epoch` epochs are done.
pub fn epoch_checkpoint(dir: &Path, next_epoch: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR)
        .join(format!("epoch_{next_epoch:04}.bin"))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub last_record: Option<MetricsRecord>,
    pub e_nominal: Option<f64>,
}

#[derive(Serialize)]
struct FinalReport<'a> {
    schema_version: u32,
    run_id: &'a str,
    epochs_trained: usize,
    temperature: f64,
    report: &'a EcologyReport,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    batch_index: usize,
    sample_indices: &'a [usize],
    labels: Vec<usize>,
    features: Vec<&'a [f64]>,
    breakdown: &'a moe_ecology::LossBreakdown,
}

struct RunSink<'a> {
    run_id: String,
    tier_sizes: Vec<usize>,
    metrics: File,
    dir: PathBuf,
    checkpoint_every: usize,
    epochs: usize,
    config_text: String,
    log: &'a mut dyn Write,
}

fn sink_err(e: impl std::fmt::Display) -> TrainError {
    TrainError::Sink(e.to_string())
}

impl TrainObserver for RunSink<'_> {
    fn on_record(&mut self, record: &EpochRecord) -> Result<(), TrainError> {
        let rec = MetricsRecord::from_epoch(&self.run_id, &self.tier_sizes, record);
        writeln!(self.metrics, "{}", rec.to_line()).map_err(sink_err)?;
        self.metrics.flush().map_err(sink_err)?;
        writeln!(
            self.log,
            "epoch {:>4}  T={:.3}  loss={:.4}  top1={}  dead={}  active={}",
            rec.epoch,
            rec.temperature,
            rec.loss.total,
            pct(rec.top1),
            rec.dead_count,
            rec.active_count
        )
        .map_err(sink_err)
    }

    fn on_epoch_end(&mut self, trainer: &Trainer, epoch: usize) -> Result<(), TrainError> {
        let done = epoch + 1;
        if self.checkpoint_every == 0 || done % self.checkpoint_every != 0 || done == self.epochs {
            return Ok(());
        }
        let bytes = save_checkpoint(&Checkpoint {
            trainer: trainer.clone(),
            config: self.config_text.clone(),
        });
        write_atomic(&epoch_checkpoint(&self.dir, done), &bytes).map_err(sink_err)
    }
}

/// Keep the metrics lines of epochs before `next_epoch`; later lines belong
/// to the part of the run being redone.
fn truncate_metrics(path: &Path, next_epoch: usize) -> Result<(), CliError> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = MetricsRecord::parse_line(&line, i + 1).map_err(|source| CliError::Metrics {
            path: path.to_path_buf(),
            source,
        })?;
        if rec.epoch < next_epoch {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// Run training for `cfg`, starting from `resume` when given.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    resume: Option<Trainer>,
    log: &mut dyn Write,
) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let run_id = cfg.run_id();
    let dir = run_dir(cfg);
    std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(io_err(&dir))?;
    let config_text = cfg.to_toml();
    write_atomic(&dir.join(CONFIG_FILE), config_text.as_bytes())?;

    let (train, test) = load_data(cfg)?;
    let hp = cfg.hyperparams();
    let tc = cfg.train_config();
    let metrics_path = dir.join(METRICS_FILE);
    let mut trainer = match resume {
        Some(t) => {
            truncate_metrics(&metrics_path, t.next_epoch)?;
            t
        }
        None => {
            File::create(&metrics_path).map_err(io_err(&metrics_path))?;
            let model = MoeModel::init(
                cfg.tier_config()
                    .map_err(|e| CliError::Usage(e.to_string()))?,
                cfg.dims(),
                tc.seed,
            )
            .map_err(|e| CliError::Usage(e.to_string()))?;
            Trainer::new(model, &tc)
        }
    };
    let metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    writeln!(
        log,
        "run {run_id}: {} train / {} test samples, epochs {}..{}",
        train.len(),
        test.len(),
        trainer.next_epoch,
        tc.epochs
    )
    .map_err(io_err(&dir))?;

    let mut sink = RunSink {
        run_id: run_id.clone(),
        tier_sizes: cfg.model.tier_sizes.clone(),
        metrics,
        dir: dir.clone(),
        checkpoint_every: cfg.train.checkpoint_every,
        epochs: tc.epochs,
        config_text: config_text.clone(),
        log,
    };
    let result = trainer.run(
        &train,
        &test,
        &hp,
        &tc,
        &cfg.oracle_assignment(),
        cfg.thresholds(),
        &mut sink,
    );
    let trajectory = match result {
        Ok(t) => t,
        Err(e @ TrainError::NonFiniteLoss { .. }) => return Err(dump_nonfinite(&dir, &train, e)),
        Err(e) => return Err(e.into()),
    };

    let ckpt = Checkpoint {
        trainer,
        config: config_text,
    };
    write_atomic(&dir.join(FINAL_CHECKPOINT), &save_checkpoint(&ckpt))?;
    let temperature = temperature_at(&hp, tc.epochs.saturating_sub(1));
    let report = ecology::evaluate(&ckpt.trainer.model, &test, temperature, cfg.thresholds())?;
    let json = serde_json::to_string_pretty(&FinalReport {
        schema_version: SCHEMA_VERSION,
        run_id: &run_id,
        epochs_trained: ckpt.trainer.next_epoch,
        temperature,
        report: &report,
    })
    .expect("report serializes");
    write_atomic(&dir.join(REPORT_FILE), json.as_bytes())?;

    let tier_sizes = &cfg.model.tier_sizes;
    Ok(TrainOutcome {
        run_id: run_id.clone(),
        run_dir: dir,
        last_record: trajectory
            .last()
            .map(|r| MetricsRecord::from_epoch(&run_id, tier_sizes, r)),
        e_nominal: hp.nominal_e().ok(),
    })
}

fn dump_nonfinite(dir: &Path, train: &LabeledBatch, err: TrainError) -> CliError {
    let TrainError::NonFiniteLoss {
        epoch,
        batch_index,
        ref sample_indices,
        ref breakdown,
    } = err
    else {
        return err.into();
    };
    let dump = NonFiniteDump {
        epoch,
        batch_index,
        sample_indices,
        labels: sample_indices.iter().map(|&i| train.labels[i]).collect(),
        features: sample_indices.iter().map(|&i| train.row(i)).collect(),
        breakdown,
    };
    let path = dir.join(DUMP_FILE);
    let json = serde_json::to_string_pretty(&dump).expect("dump serializes");
    if let Err(e) = write_atomic(&path, json.as_bytes()) {
        return e;
    }
    CliError::NonFinite {
        dump: path,
        source: err,
    }
}

/// Evaluate a checkpoint at `temperature`, defaulting to the temperature of
/// its last trained epoch.
pub fn cmd_eval(
    path: &Path,
    temperature: Option<f64>,
    json_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<EcologyReport, CliError> {
    let (ckpt, cfg) = open_checkpoint(path)?;
    let (_, test) = load_data(&cfg)?;
    let t = temperature.unwrap_or_else(|| {
        temperature_at(
            &cfg.hyperparams(),
            ckpt.trainer.next_epoch.saturating_sub(1),
        )
    });
    let report = ecology::evaluate(&ckpt.trainer.model, &test, t, cfg.thresholds())?;
    render_report(&report, &cfg.model.tier_sizes, t, out).map_err(io_err(path))?;
    if let Some(p) = json_out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_atomic(p, json.as_bytes())?;
    }
    Ok(report)
}

pub fn render_report(
    r: &EcologyReport,
    tier_sizes: &[usize],
    temperature: f64,
    out: &mut dyn Write,
) -> std::io::Result<()> {
    writeln!(
        out,
        "T={temperature}  samples={}  top1={}  active={}  dead={}",
        r.n_samples,
        pct(r.top1_accuracy),
        r.active_count,
        r.dead_count
    )?;
    writeln!(
        out,
        "{:>4} {:>4} {:>8} {:>8}  category",
        "id", "tier", "usage", "acc"
    )?;
    for e in &r.experts {
        writeln!(
            out,
            "{:>4} {:>4} {:>8} {:>8}  {}",
            e.id,
            e.tier,
            pct(e.usage),
            e.accuracy.map_or("-".into(), pct),
            e.category.as_str()
        )?;
    }
    writeln!(out, "tier  size   usage   hard   easy")?;
    for (k, &size) in tier_sizes.iter().enumerate() {
        writeln!(
            out,
            "{k:>4} {size:>5} {:>7} {:>6} {:>6}",
            pct(r.tier_usage[k]),
            r.hard_ratio[k].map_or("-".into(), pct),
            r.easy_ratio[k].map_or("-".into(), pct)
        )?;
    }
    writeln!(out, "flow (row = top-1 tier, column = top-2 tier):")?;
    for a in 0..r.flow.n_tiers {
        let row: Vec<String> = (0..r.flow.n_tiers)
            .map(|b| format!("{:>6.1}%", r.flow.get(a, b)))
            .collect();
        writeln!(out, "  {}", row.join(" "))?;
    }
    writeln!(
        out,
        "first/last tier hard ratio: {}",
        opt(r.t0_t2_hard_ratio, 3)
    )
}

/// Scan a frozen checkpoint over `temps` (the config's `scan.temps` by default).
/// Writes `csv_out`, or `scan.csv` next to the checkpoint.
pub fn cmd_scan(
    path: &Path,
    temps: Option<&[f64]>,
    csv_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Vec<ScanRow>, CliError> {
    let (ckpt, cfg) = open_checkpoint(path)?;
    let (_, test) = load_data(&cfg)?;
    let temps = temps.unwrap_or(&cfg.scan.temps);
    if temps.is_empty() {
        return Err(CliError::Usage("no temperatures to scan".into()));
    }
    let rows = ecology::temperature_scan(&ckpt.trainer.model, &test, temps, cfg.thresholds())?;

    let n_tiers = cfg.model.tier_sizes.len();
    let tier_cols: Vec<String> = (0..n_tiers).map(|k| format!("tier{k}")).collect();
    writeln!(
        out,
        "{:>7} {:>7} {} {:>6} {:>4} {:>8}",
        "T",
        "top1",
        tier_cols
            .iter()
            .map(|c| format!("{c:>7}"))
            .collect::<String>(),
        "active",
        "dead",
        "t0/tN"
    )
    .map_err(io_err(path))?;
    for r in &rows {
        writeln!(
            out,
            "{:>7} {:>7} {} {:>6} {:>4} {:>8}",
            r.temperature,
            pct(r.top1_accuracy),
            r.tier_usage
                .iter()
                .map(|u| format!("{:>7}", pct(*u)))
                .collect::<String>(),
            r.active_count,
            r.dead_count,
            opt(r.t0_t2_hard_ratio, 3)
        )
        .map_err(io_err(path))?;
    }

    let csv_path = csv_out.map_or_else(
        || path.parent().unwrap_or(Path::new(".")).join("scan.csv"),
        Path::to_path_buf,
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["temperature".to_string(), "top1".into()];
    header.extend(tier_cols.iter().map(|c| format!("{c}_usage")));
    header.extend([
        "active_count".into(),
        "dead_count".into(),
        "t0_t2_hard_ratio".into(),
    ]);
    w.write_record(&header).expect("in-memory csv");
    for r in &rows {
        let mut rec = vec![r.temperature.to_string(), r.top1_accuracy.to_string()];
        rec.extend(r.tier_usage.iter().map(f64::to_string));
        rec.push(r.active_count.to_string());
        rec.push(r.dead_count.to_string());
        rec.push(r.t0_t2_hard_ratio.map_or(String::new(), |v| v.to_string()));
        w.write_record(&rec).expect("in-memory csv");
    }
    write_atomic(&csv_path, &w.into_inner().expect("in-memory csv"))?;
    Ok(rows)
}
