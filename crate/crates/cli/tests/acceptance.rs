//! Acceptance suite. Prints one PASS/FAIL line per criterion. With
//! `ACCEPTANCE_STRICT=1` the process exits non-zero if any criterion fails.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 5 6`.

use moe_ecology::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use moe_ecology::config::ExperimentConfig;
use moe_ecology::data::{self, DatasetSpec, LabeledBatch};
use moe_ecology::ecology::{
    classify_expert, evaluate, revival_stats, stability_stats, Category, ConfidenceThresholds,
    EcologyReport, SampleRouting, StabilityPoint, DEFAULT_SCAN_TEMPS,
};
use moe_ecology::gradcheck::check_gradients;
use moe_ecology::hyperparams::{compute_e, HyperParams};
use moe_ecology::losses::OracleAssignment;
use moe_ecology::model::{ModelDims, MoeModel, RoutingMode, TierConfig};
use moe_ecology::rng::{self, Purpose};
use moe_ecology::trainer::{EpochRecord, Recorder, Trainer};
use moe_ecology_cli::run::{cmd_train, epoch_checkpoint, FINAL_CHECKPOINT, METRICS_FILE};
use moe_ecology_cli::{load_data, open_checkpoint};
use rand::Rng;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// 1. Gradient oracle.
fn gradient_oracle() -> Verdict {
    let dims = ModelDims {
        n_features: 3,
        feature_dim: 4,
        router_hidden: 4,
        n_classes: 3,
    };
    let zero = HyperParams {
        entropy: 0.0,
        oracle: 0.0,
        balance: 0.0,
        ortho: 0.0,
        ..HyperParams::default()
    };
    let h = HyperParams {
        entropy: 0.3,
        ..zero
    };
    let hb = HyperParams { balance: 0.7, ..h };
    let all = HyperParams {
        oracle: 0.4,
        ortho: 0.25,
        ..hb
    };
    let assignment = OracleAssignment::round_robin(3, 4);
    let (mut worst, mut worst_at, mut checked, mut skipped) = (0.0f64, String::new(), 0, 0);
    for (label, hp) in [("task", zero), ("+H", h), ("+B", hb), ("+O+ortho", all)] {
        for seed in 0..20u64 {
            let mut model =
                MoeModel::init(TierConfig::new(vec![2, 2]).unwrap(), dims, seed).unwrap();
            let mut r = rng::stream(seed + 1000, Purpose::Data);
            let batch = LabeledBatch {
                n_features: 3,
                n_classes: 3,
                features: (0..15).map(|_| r.random_range(-1.5..1.5)).collect(),
                labels: (0..5).map(|_| r.random_range(0..3)).collect(),
            };
            let t = 0.5 + (seed % 5) as f64 * 0.4;
            let g =
                check_gradients(&mut model, &batch, &hp, t, &assignment, None, 1e-5, 1e-8).unwrap();
            checked += g.checked;
            skipped += g.skipped;
            if g.max_rel_err >= worst {
                worst = g.max_rel_err;
                worst_at = format!("{label} seed {seed} {}", g.worst);
            }
        }
    }
    verdict(
        worst <= 1e-4 && skipped * 10 <= checked,
        format!("{checked} entries checked, {skipped} skipped at selection kinks, max rel err {worst:.2e} ({worst_at})"),
    )
}

// 2. Taxonomy against a brute-force rule table.
fn taxonomy_oracle() -> Verdict {
    // (U from, U to, A from, A to, category), half-open on the upper bounds.
    let table = [
        (0.0, 0.01, 0.0, 2.0, Category::Dead),
        (0.01, 0.03, 0.25, 2.0, Category::Edge),
        (0.01, 0.03, 0.0, 0.25, Category::Noise),
        (0.03, 2.0, 0.50, 2.0, Category::PureCore),
        (0.03, 2.0, 0.30, 0.50, Category::BroadCore),
        (0.03, 2.0, 0.0, 0.30, Category::WeakCore),
    ];
    let lookup = |u: f64, a: f64| {
        let hits: Vec<Category> = table
            .iter()
            .filter(|r| r.0 <= u && u < r.1 && r.2 <= a && a < r.3)
            .map(|r| r.4)
            .collect();
        assert_eq!(hits.len(), 1, "rule table not a partition at ({u}, {a})");
        hits[0]
    };
    let mut axis: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
    for b in [0.01f64, 0.03, 0.25, 0.30, 0.50] {
        axis.extend([b, b.next_down(), b.next_up()]);
    }
    let mut mismatches = 0;
    let mut cells = 0;
    for &u in &axis {
        for &a in &axis {
            cells += 1;
            if classify_expert(u, a) != lookup(u, a) {
                mismatches += 1;
            }
        }
    }
    verdict(
        mismatches == 0,
        format!("{cells} grid cells incl. boundaries, {mismatches} mismatches"),
    )
}

// 3. E arithmetic.
fn e_arithmetic() -> Verdict {
    let row = |b: f64| HyperParams {
        t_init: 3.0,
        entropy: 0.10,
        oracle: 0.15,
        balance: b,
        ..HyperParams::default()
    };
    let e1 = compute_e(&row(0.40), 3.0).unwrap();
    let e2 = compute_e(&row(0.85), 3.0).unwrap();
    // Exact ratios: 0.3 / 0.55 = 6/11 and 0.3 / 1.0.
    let exact1 = 6.0 / 11.0;
    let exact2 = 0.3;
    let ok = (e1 - 0.545).abs() <= 1e-3
        && (e2 - 0.300).abs() <= 1e-3
        && (e1 - exact1).abs() <= 4.0 * f64::EPSILON
        && (e2 - exact2).abs() <= 4.0 * f64::EPSILON;
    verdict(
        ok,
        format!("E = {e1:.17} (6/11 = {exact1:.17}), E = {e2:.17}"),
    )
}

// 4. Temperature invariance of allocation.
fn temperature_invariance() -> Verdict {
    let test = data::generate(&DatasetSpec {
        n_classes: 8,
        n_features: 16,
        samples_per_class: 50,
        n_superclasses: 4,
        intra_spread: 1.0,
        inter_spread: 1.0,
        seed: 11,
    })
    .unwrap()
    .test;
    let dims = ModelDims {
        n_features: 16,
        feature_dim: 64,
        router_hidden: 32,
        n_classes: 8,
    };
    let th = ConfidenceThresholds::default();
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let tiers = TierConfig::new(vec![8, 4, 4]).unwrap();
        let model = MoeModel::init(tiers, dims, seed).unwrap();
        let reference_pairs: Vec<_> = model
            .forward(&test, 1.0, RoutingMode::Learned)
            .iter()
            .map(|o| o.top2)
            .collect();
        let reference = evaluate(&model, &test, 1.0, th).unwrap();
        for &t in &DEFAULT_SCAN_TEMPS {
            let pairs: Vec<_> = model
                .forward(&test, t, RoutingMode::Learned)
                .iter()
                .map(|o| o.top2)
                .collect();
            let r = evaluate(&model, &test, t, th).unwrap();
            if pairs != reference_pairs
                || r.tier_usage != reference.tier_usage
                || r.active_count != reference.active_count
                || r.dead_count != reference.dead_count
            {
                failures.push(format!("seed {seed} T={t}"));
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "10 models x {} temperatures, differing: {:?}",
            DEFAULT_SCAN_TEMPS.len(),
            failures
        ),
    )
}

fn desk_config(seed: u64, extra: &[&str]) -> ExperimentConfig {
    let mut sets: Vec<String> = vec![
        "model.tier_sizes=[16]".into(),
        "data.n_classes=8".into(),
        "model.n_classes=8".into(),
        "data.n_features=16".into(),
        "data.samples_per_class=200".into(),
        "train.epochs=60".into(),
        format!("train.seed={seed}"),
    ];
    sets.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::default().with_overrides(&sets).unwrap()
}

/// Train `cfg` in phases that share one schedule. Each phase is
/// `(hyperparameters, oracle assignment, stop epoch)`.
fn train_phases(
    cfg: &ExperimentConfig,
    phases: &[(HyperParams, OracleAssignment, usize)],
    trainer: Option<Trainer>,
) -> (Trainer, Vec<EpochRecord>) {
    let (train, test) = load_data(cfg).unwrap();
    let tc = cfg.train_config();
    let mut trainer = trainer.unwrap_or_else(|| {
        let model = MoeModel::init(cfg.tier_config().unwrap(), cfg.dims(), tc.seed).unwrap();
        Trainer::new(model, &tc)
    });
    let mut rec = Recorder::default();
    for (hp, a, until) in phases {
        trainer
            .run_until(
                &train,
                &test,
                hp,
                &tc,
                a,
                cfg.thresholds(),
                *until,
                &mut rec,
            )
            .unwrap();
    }
    (trainer, rec.records)
}

fn final_dead(records: &[EpochRecord]) -> usize {
    records.last().unwrap().report.dead_count
}

// 5. Desk-scale phase analog.
fn phase_analog() -> Verdict {
    let seeds: Vec<u64> = (0..5).collect();
    let run = |extra: &[&str]| -> (f64, Vec<usize>) {
        let e = desk_config(0, extra).hyperparams().nominal_e().unwrap();
        let dead = seeds
            .par_iter()
            .map(|&s| {
                let cfg = desk_config(s, extra);
                let (_, recs) = train_phases(
                    &cfg,
                    &[(cfg.hyperparams(), cfg.oracle_assignment(), 60)],
                    None,
                );
                final_dead(&recs)
            })
            .collect();
        (e, dead)
    };
    let (ea, dead_a) = run(&[]);
    let (eb, dead_b) = run(&["loss.b=6.0"]);
    let healthy_a = dead_a.iter().filter(|&&d| d == 0).count();
    let collapsed_b = dead_b.iter().filter(|&&d| d >= 1).count();
    verdict(
        (ea - 0.545).abs() < 1e-3 && eb <= 0.05 && healthy_a >= 4 && collapsed_b >= 3,
        format!(
            "A (E={ea:.4}) final DEAD {dead_a:?}: {healthy_a}/5 at 0 (need 4); \
             B (B=6.0, E={eb:.4}) final DEAD {dead_b:?}: {collapsed_b}/5 at >=1 (need 3)"
        ),
    )
}

fn median(v: &[i64]) -> f64 {
    let mut s = v.to_vec();
    s.sort();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

// 6. Revival analog.
fn revival_analog() -> Verdict {
    let seeds: Vec<u64> = (0..5).collect();
    let results: Vec<(usize, usize, usize)> = seeds
        .par_iter()
        .map(|&s| {
            let cfg = desk_config(s, &["train.eval_every=1", "loss.oracle_experts=4"]);
            let base = cfg.hyperparams();
            let teacher4 = cfg.oracle_assignment();
            let collapse = HyperParams {
                oracle: 2.0,
                ..base
            };
            let (shared, recs) = train_phases(&cfg, &[(collapse, teacher4.clone(), 20)], None);
            let dead_at_20 = final_dead(&recs);
            let arm = |b: f64| {
                let hp = HyperParams {
                    oracle: 0.0,
                    balance: b,
                    ..base
                };
                let (_, recs) =
                    train_phases(&cfg, &[(hp, teacher4.clone(), 60)], Some(shared.clone()));
                final_dead(&recs)
            };
            (dead_at_20, arm(0.40), arm(0.0))
        })
        .collect();
    let collapsed = results.iter().all(|r| r.0 >= 8);
    let drop_b: Vec<i64> = results.iter().map(|r| r.0 as i64 - r.1 as i64).collect();
    let drop_0: Vec<i64> = results.iter().map(|r| r.0 as i64 - r.2 as i64).collect();
    let revived = drop_b.iter().filter(|&&d| d >= 2).count();
    let (mb, m0) = (median(&drop_b), median(&drop_0));
    verdict(
        collapsed && revived >= 3 && m0 < mb,
        format!(
            "DEAD after collapse {:?}; final with B=0.40 {:?}, with B=0 {:?}; \
             B=0.40 drops >=2 in {revived}/5 (need 3); median drop {mb} vs {m0} without balance",
            results.iter().map(|r| r.0).collect::<Vec<_>>(),
            results.iter().map(|r| r.1).collect::<Vec<_>>(),
            results.iter().map(|r| r.2).collect::<Vec<_>>(),
        ),
    )
}

// 7. Revival and stability fixtures.
fn arithmetic_fixtures() -> Verdict {
    let dead = [4, 12, 8, 7, 7, 7, 5, 5, 4];
    let series: Vec<(usize, usize)> = dead.iter().enumerate().map(|(i, &d)| (10 * i, d)).collect();
    let r = revival_stats(&series).unwrap();
    let acc = [
        47.23, 48.00, 47.50, 47.60, 47.70, 47.80, 47.65, 47.71, 47.75,
    ];
    let window: Vec<StabilityPoint> = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| StabilityPoint {
            epoch: 91 + i,
            top1: a,
            tier_usage: vec![0.25; 4],
        })
        .collect();
    let s = stability_stats(&window).unwrap();
    let mean = format!("{:.2}", s.mean);
    let range = format!("{:.2}", s.range);
    verdict(
        (r.peak_dead, r.final_dead, r.revived) == (12, 4, 8) && mean == "47.66" && range == "0.77",
        format!(
            "revival peak {} final {} revived {}; stability mean {mean} range {range}",
            r.peak_dead, r.final_dead, r.revived
        ),
    )
}

// 8. Determinism and resume.
fn determinism_and_resume() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = |name: &str| tmp.path().join(name).display().to_string();
    let cfg_in = |dir: &str| {
        ExperimentConfig::default()
            .with_overrides(&[
                "train.epochs=12".into(),
                "train.eval_every=1".into(),
                "train.checkpoint_every=5".into(),
                "routing.warmup_epochs=3".into(),
                "routing.anneal_epochs=6".into(),
                "data.samples_per_class=60".into(),
                "train.seed=3".into(),
                format!("experiment.output_dir={dir}"),
            ])
            .unwrap()
    };
    let sink = &mut std::io::sink();
    let a = cmd_train(&cfg_in(&root("a")), None, sink).unwrap();
    let b = cmd_train(&cfg_in(&root("b")), None, sink).unwrap();
    let read = |dir: &Path, f: &str| std::fs::read(dir.join(f)).unwrap();
    let same_twice = read(&a.run_dir, METRICS_FILE) == read(&b.run_dir, METRICS_FILE);

    // Copy run b, then redo it from its epoch-5 checkpoint.
    let c_root = tmp.path().join("c");
    let c_dir = c_root.join(&b.run_id);
    std::fs::create_dir_all(c_dir.join("checkpoints")).unwrap();
    std::fs::copy(b.run_dir.join(METRICS_FILE), c_dir.join(METRICS_FILE)).unwrap();
    let ckpt_path = epoch_checkpoint(&b.run_dir, 5);
    let (ckpt, mut cfg) = open_checkpoint(&ckpt_path).unwrap();
    cfg.experiment.output_dir = c_root.display().to_string();
    let resumed_from = ckpt.trainer.next_epoch;
    let c = cmd_train(&cfg, Some(ckpt.trainer), sink).unwrap();
    let full = read(&a.run_dir, METRICS_FILE);
    let resumed = read(&c.run_dir, METRICS_FILE);
    let same_resume = full == resumed;
    // The resumed run lives under another output root, so compare with a common config string.
    let trainer_bytes = |dir: &Path| {
        let ck = load_checkpoint(&read(dir, FINAL_CHECKPOINT)).unwrap();
        save_checkpoint(&Checkpoint {
            trainer: ck.trainer,
            config: String::new(),
        })
    };
    let same_final = trainer_bytes(&a.run_dir) == trainer_bytes(&c.run_dir);
    let lines = String::from_utf8(full).unwrap().lines().count();
    verdict(
        same_twice && same_resume && same_final && resumed_from == 5,
        format!(
            "{lines} metrics lines; repeat identical: {same_twice}; resumed at epoch {resumed_from}: \
             metrics identical {same_resume}, final checkpoint identical {same_final}"
        ),
    )
}

// 9. Flow-matrix properties on random fixtures.
fn flow_properties() -> Verdict {
    let mut r = rng::stream(99, Purpose::Data);
    let mut worst_total = 0.0f64;
    let mut worst_row = 0.0f64;
    for _ in 0..1000 {
        let n_tiers = r.random_range(1..=4);
        let sizes: Vec<usize> = (0..n_tiers).map(|_| r.random_range(1..=5)).collect();
        let tiers = match TierConfig::new(sizes) {
            Ok(t) if t.n_experts() >= 2 => t,
            _ => TierConfig::new(vec![1, 1]).unwrap(),
        };
        let n = tiers.n_experts();
        let samples: Vec<SampleRouting> = (0..r.random_range(1..=60))
            .map(|_| {
                let a = r.random_range(0..n);
                let b = (a + r.random_range(1..n)) % n;
                SampleRouting {
                    top2: (a, b),
                    confidence: r.random(),
                    correct: r.random(),
                }
            })
            .collect();
        let rep: EcologyReport =
            EcologyReport::from_samples(&tiers, &samples, ConfidenceThresholds::default()).unwrap();
        worst_total = worst_total.max((rep.flow.total() - 100.0).abs());
        for t in 0..tiers.n_tiers() {
            worst_row = worst_row.max((rep.flow.row_sum(t) / 100.0 - rep.tier_usage[t]).abs());
        }
    }
    verdict(
        worst_total <= 1e-9 && worst_row <= 1e-9,
        format!(
            "1000 fixtures; max |sum - 100%| {worst_total:.1e}, max |row - usage| {worst_row:.1e}"
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "taxonomy oracle", taxonomy_oracle),
        (3, "E arithmetic", e_arithmetic),
        (4, "temperature invariance", temperature_invariance),
        (5, "desk-scale phase analog", phase_analog),
        (6, "revival analog", revival_analog),
        (7, "revival/stability fixtures", arithmetic_fixtures),
        (8, "determinism & resume", determinism_and_resume),
        (9, "flow-matrix properties", flow_properties),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "[{status}] #{id} {name} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: criteria {failed:?} failed");
        // Known failures are reported above; set ACCEPTANCE_STRICT=1 to also fail the process.
        if std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
        return;
    }
    println!("acceptance: all selected criteria passed");
}
