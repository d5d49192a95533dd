use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "train.epochs=2",
    "--set",
    "data.samples_per_class=20",
    "--set",
    "train.eval_every=1",
];

fn bin(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-ecology"))
        .args(args)
        .arg("--out")
        .arg(root)
        .env_remove("MOE_ECOLOGY_OUT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_small(root: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = bin(root, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o).lines().last().unwrap().to_string();
    PathBuf::from(line.strip_prefix("wrote ").unwrap())
}

#[test]
fn train_writes_run_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_small(tmp.path(), &[]);
    for f in [
        "metrics.jsonl",
        "ecology_report.json",
        "checkpoint_final.bin",
        "config.toml",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(tmp.path(), &["train", "--set", "loss.nope=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn print_config_round_trips_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(tmp.path(), &["--print-config", "--set", "loss.b=0.85"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("b = 0.85"));
}

#[test]
fn scan_and_eval_read_the_final_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_small(tmp.path(), &[]);
    let ckpt = dir.join("checkpoint_final.bin");
    let ckpt = ckpt.to_str().unwrap();
    let o = bin(tmp.path(), &["scan", ckpt]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.join("scan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7);

    let json = tmp.path().join("report.json");
    let o = bin(
        tmp.path(),
        &[
            "eval",
            ckpt,
            "--temperature",
            "0.5",
            "--json",
            json.to_str().unwrap(),
        ],
    );
    assert!(o.status.success());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert!(v.get("tier_usage").is_some());
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.bin");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = bin(tmp.path(), &["eval", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn resume_finishes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_small(
        tmp.path(),
        &[
            "--set",
            "train.epochs=4",
            "--set",
            "train.checkpoint_every=2",
        ],
    );
    let full = std::fs::read(dir.join("metrics.jsonl")).unwrap();
    let ckpt = dir.join("checkpoints").join("epoch_0002.bin");
    let o = bin(tmp.path(), &["train", "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(dir.join("metrics.jsonl")).unwrap(), full);

    let o = bin(
        tmp.path(),
        &["train", "--resume", ckpt.to_str().unwrap(), "--seed", "3"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_rejects_empty_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(tmp.path(), &["sweep", "--axis", "loss.b="]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(tmp.path(), &["sweep", "--axis", "loss.nope=1,2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_output_does_not_depend_on_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for jobs in ["1", "4"] {
        let root = tmp.path().join(jobs);
        let mut args = vec!["sweep", "--axis", "loss.b=0.0,0.4,0.85", "--jobs", jobs];
        args.extend_from_slice(SMALL);
        let o = bin(&root, &args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_dir(&root)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|x| x == "csv"))
            .unwrap();
        csvs.push(std::fs::read_to_string(csv).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0].lines().count(), 4);
}

/// A metrics file whose DEAD series at epochs 0, 10, ..., 80 is the given one.
fn fixture_run(root: &Path, name: &str, dead: &[usize]) -> PathBuf {
    let dir = train_small(
        root,
        &[
            "--set",
            &format!("train.epochs={}", dead.len()),
            "--set",
            &format!("experiment.name={name}"),
        ],
    );
    let text = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let lines: Vec<String> = text
        .lines()
        .zip(dead)
        .enumerate()
        .map(|(i, (l, &d))| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["epoch"] = (10 * i).into();
            v["dead_count"] = d.into();
            v.to_string()
        })
        .collect();
    std::fs::write(dir.join("metrics.jsonl"), lines.join("\n") + "\n").unwrap();
    dir
}

#[test]
fn report_revival_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = fixture_run(tmp.path(), "fixture", &[4, 12, 8, 7, 7, 7, 5, 5, 4]);
    let o = bin(
        tmp.path(),
        &["report", dir.to_str().unwrap(), "--window", "30:80"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(
        text.contains("revival: peak 12 (epoch 10), final 4, revived 8"),
        "{text}"
    );
    assert!(text.contains("stability 30:80"));
}

#[test]
fn report_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = fixture_run(tmp.path(), "fixture", &[1, 0, 0]);
    let path = dir.to_str().unwrap();
    let o = bin(tmp.path(), &["report", path, "--window", "20:20"]);
    assert_eq!(o.status.code(), Some(2));

    let metrics = dir.join("metrics.jsonl");
    let text = std::fs::read_to_string(&metrics).unwrap();
    std::fs::write(
        &metrics,
        text.replacen("\"schema_version\":1", "\"schema_version\":99", 1),
    )
    .unwrap();
    let o = bin(tmp.path(), &["report", path]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn report_compares_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fixture_run(tmp.path(), "a", &[2, 1, 0]);
    let b = fixture_run(tmp.path(), "b", &[3, 3, 3]);
    let o = bin(
        tmp.path(),
        &["report", a.to_str().unwrap(), b.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let table: Vec<&str> = text
        .lines()
        .skip_while(|l| !l.starts_with("run ") || l.contains("tiers ["))
        .collect();
    assert_eq!(table.len(), 3, "{text}");
}
