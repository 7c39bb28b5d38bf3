//! End-to-end tests of the `fedrec` binary: every subcommand, the artifact
//! formats, determinism, resume, and the exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedrec"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fedrec")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "fedrec {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn synth(dir: &Path) {
    run_ok(&[
        "synth",
        "--out-dir",
        dir.to_str().unwrap(),
        "--users",
        "24",
        "--items",
        "30",
        "--p-in",
        "0.4",
        "--holdout",
        "0.25",
        "--seed",
        "5",
    ]);
}

fn write_config(path: &Path, epochs: usize, local_rate: f64) {
    let text = format!(
        "epochs = {epochs}\n\
         users_per_epoch = 6\n\
         local_iters = 3\n\
         latent_depth = 1\n\
         dim = 4\n\
         local_rate = {local_rate:e}\n\
         reg_weight = 0.001\n\
         optimizer = \"plain\"\n\
         eval_every = 2\n\
         master_seed = 9\n"
    );
    fs::write(path, text).unwrap();
}

struct Workspace {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    root: PathBuf,
}

fn workspace(epochs: usize, local_rate: f64) -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let config = tmp.path().join("config.toml");
    write_config(&config, epochs, local_rate);
    Workspace {
        root: tmp.path().to_path_buf(),
        _tmp: tmp,
        data,
        config,
    }
}

fn train(ws: &Workspace, out: &str, extra: &[&str]) -> PathBuf {
    let out_dir = ws.root.join(out);
    let mut args = vec![
        "train",
        "--config",
        ws.config.to_str().unwrap(),
        "--dataset-dir",
        ws.data.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
    out_dir
}

#[test]
fn synth_writes_a_loadable_split() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let split = fedrec::dataset::load_split(
        &tmp.path().join("train.txt"),
        &tmp.path().join("test.txt"),
    )
    .unwrap();
    assert_eq!(split.train.num_users, 24);
    assert_eq!(split.train.num_items, 30);
    assert!(split.test_items.iter().any(|t| !t.is_empty()));
}

#[test]
fn train_writes_trace_manifest_and_checkpoint() {
    let ws = workspace(4, 0.05);
    let out = train(&ws, "run", &[]);

    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "epoch,loss,recall,ndcg");
    // Warm-up record plus one per epoch.
    assert_eq!(lines.len(), 1 + 1 + 4);
    assert!(lines[1].starts_with("0,,"));
    // eval_every = 2: epochs 2 and 4 carry metrics, 1 and 3 do not.
    assert!(lines[2].ends_with(",,"));
    assert!(!lines[3].ends_with(",,"));
    assert!(lines[4].ends_with(",,"));
    assert!(!lines[5].ends_with(",,"));

    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("dataset_fingerprint = \"sha256:"));
    assert!(manifest.contains("[config]"));
    assert!(manifest.contains("epochs = 4"));
    assert!(manifest.contains("resolved_server_rate ="));

    assert!(out.join("final.ckpt").is_file());
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let ws = workspace(3, 0.05);
    let a = train(&ws, "a", &[]);
    let b = train(&ws, "b", &[]);
    assert_eq!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );
    // A different seed must change the outcome.
    let c = train(&ws, "c", &["--master-seed", "10"]);
    assert_ne!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(c.join("final.ckpt")).unwrap()
    );
}

#[test]
fn resumed_run_matches_the_uninterrupted_one() {
    let ws = workspace(2, 0.05);
    // Flag overrides the config file's epochs = 2.
    let direct = train(&ws, "direct", &["--epochs", "4"]);
    let half = train(&ws, "half", &[]);
    let resumed = train(
        &ws,
        "resumed",
        &[
            "--epochs",
            "4",
            "--resume",
            half.join("final.ckpt").to_str().unwrap(),
        ],
    );

    assert_eq!(
        fs::read(direct.join("final.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap()
    );
    // The resumed trace holds exactly the post-checkpoint epochs and agrees
    // with the tail of the direct trace.
    let direct_trace = fs::read_to_string(direct.join("trace.csv")).unwrap();
    let resumed_trace = fs::read_to_string(resumed.join("trace.csv")).unwrap();
    let direct_lines: Vec<&str> = direct_trace.lines().collect();
    let resumed_lines: Vec<&str> = resumed_trace.lines().collect();
    assert_eq!(resumed_lines.len(), 1 + 2);
    assert_eq!(resumed_lines[0], "epoch,loss,recall,ndcg");
    assert_eq!(resumed_lines[1..], direct_lines[4..]);
    let manifest = fs::read_to_string(resumed.join("manifest.toml")).unwrap();
    assert!(manifest.contains("resumed_from ="));
}

#[test]
fn verify_accepts_the_warmup_and_checkpoint() {
    let ws = workspace(2, 0.05);
    let out = train(&ws, "run", &[]);
    let stdout = run_ok(&[
        "verify",
        "--dataset-dir",
        ws.data.to_str().unwrap(),
        "--latent-depth",
        "2",
        "--checkpoint",
        out.join("final.ckpt").to_str().unwrap(),
    ]);
    assert!(stdout.contains("max abs deviation"));
    assert!(stdout.contains("is intact"));
}

#[test]
fn verify_rejects_oversized_graphs_and_corrupt_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let big = tmp.path().join("big");
    run_ok(&[
        "synth",
        "--out-dir",
        big.to_str().unwrap(),
        "--users",
        "600",
        "--items",
        "500",
        "--p-in",
        "0.02",
        "--seed",
        "1",
    ]);
    let out = run(&["verify", "--dataset-dir", big.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);

    let ws = workspace(2, 0.05);
    let run_dir = train(&ws, "run", &[]);
    let ckpt = run_dir.join("final.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    let out = run(&[
        "verify",
        "--dataset-dir",
        ws.data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn eval_reports_metrics_and_writes_the_per_user_table() {
    let ws = workspace(2, 0.05);
    let out = train(&ws, "run", &[]);
    let table = ws.root.join("metrics.csv");
    let stdout = run_ok(&[
        "eval",
        "--checkpoint",
        out.join("final.ckpt").to_str().unwrap(),
        "--dataset-dir",
        ws.data.to_str().unwrap(),
        "--cut",
        "10",
        "--table",
        table.to_str().unwrap(),
    ]);
    assert!(stdout.contains("recall@10"));
    assert!(stdout.contains("ndcg@10"));

    let users: usize = stdout
        .split("over ")
        .nth(1)
        .and_then(|s| s.split(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "user,recall,ndcg");
    assert_eq!(lines.len(), 1 + users);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3);
        let recall: f64 = fields[1].parse().unwrap();
        let ndcg: f64 = fields[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&recall));
        assert!((0.0..=1.0).contains(&ndcg));
    }
}

#[test]
fn invalid_config_exits_with_code_one() {
    let ws = workspace(2, 0.05);
    fs::write(&ws.config, "epochs = 2\nnot_a_field = 1\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        ws.config.to_str().unwrap(),
        "--dataset-dir",
        ws.data.to_str().unwrap(),
        "--out-dir",
        ws.root.join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn missing_dataset_exits_with_code_three() {
    let ws = workspace(2, 0.05);
    let out = run(&[
        "train",
        "--config",
        ws.config.to_str().unwrap(),
        "--dataset-dir",
        ws.root.join("nope").to_str().unwrap(),
        "--out-dir",
        ws.root.join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn diverging_run_exits_with_code_two_and_keeps_the_trace_prefix() {
    let ws = workspace(6, 1e150);
    let out_dir = ws.root.join("run");
    let out = run(&[
        "train",
        "--config",
        ws.config.to_str().unwrap(),
        "--dataset-dir",
        ws.data.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--local-iters",
        "4",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverge"));
    // The warm-up record survives; no checkpoint is written.
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,loss,recall,ndcg\n0,,"));
    assert!(!out_dir.join("final.ckpt").exists());
}
