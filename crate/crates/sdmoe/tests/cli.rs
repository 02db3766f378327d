//! End-to-end checks of the command-line binary: exit codes, error surfaces,
//! emitted files, and cross-run determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sdmoe");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary must launch")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn help_prints_usage_and_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("Usage"), "help text missing synopsis");

    let sub = run(&["train", "--help"]);
    assert_eq!(code(&sub), 0);
    assert!(stdout(&sub).contains("--config"));
}

#[test]
fn missing_arguments_exit_one_with_usage() {
    let none = run(&[]);
    assert_eq!(code(&none), 1);
    assert!(stderr(&none).contains("Usage"), "bare invocation must print usage");

    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let partial = run(&["train", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&partial), 1);
    assert!(
        stderr(&partial).contains("--config"),
        "must name the missing flag: {}",
        stderr(&partial)
    );
}

#[test]
fn config_errors_exit_two_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    let out_dir = dir.path().join("out");
    let out = run(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.starts_with("error:"), "runtime failures use the error prefix: {msg}");
    assert!(msg.contains("line 1") && msg.contains("bogus_key"), "unhelpful: {msg}");
}

#[test]
fn train_is_deterministic_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "variant = sd\nsteps = 40\nlog_every = 8\nseed = 7\n",
    );

    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        let metrics = fs::read(out_dir.join("metrics.csv")).unwrap();
        let model = fs::read(out_dir.join("model.sdmk")).unwrap();
        assert!(
            metrics.starts_with(b"step,task_loss,aux_loss,"),
            "metrics header changed"
        );
        assert_eq!(&model[..4], b"SDMK", "checkpoint magic changed");
        artifacts.push((metrics, model));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "metrics bytes differ between runs");
    assert_eq!(artifacts[0].1, artifacts[1].1, "model bytes differ between runs");
}

#[test]
fn analyze_reads_a_checkpoint_and_reports_similarity() {
    let dir = tempfile::tempdir().unwrap();
    let params = sdmoe::moe::init_layer(&sdmoe::moe::MoeConfig::toy(), 16, 5).unwrap();
    let model = dir.path().join("model.sdmk");
    sdmoe::checkpoint::save_checkpoint(&params, &model).unwrap();

    let out_dir = dir.path().join("analysis");
    let out = run(&[
        "analyze",
        "--checkpoint",
        model.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let text = fs::read_to_string(out_dir.join("similarity.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("expert_i,expert_j,similarity"));
    let mut n_rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 3, "bad row: {line}");
        let i: usize = cells[0].parse().unwrap();
        let j: usize = cells[1].parse().unwrap();
        let s: f64 = cells[2].parse().unwrap();
        assert!(i <= j, "rows must cover the upper triangle once");
        assert!((0.0..=1.0 + 1e-9).contains(&s), "similarity out of range: {s}");
        if i == j {
            assert!((s - 1.0).abs() <= 1e-9, "self-similarity must be 1: {s}");
        }
        n_rows += 1;
    }
    // 4 experts: 4 diagonal + 6 off-diagonal entries.
    assert_eq!(n_rows, 10);

    for extra in ["gate_alignment.csv", "grad_alignment.csv"] {
        assert!(out_dir.join(extra).is_file(), "{extra} missing");
    }
}

#[test]
fn grad_check_emits_a_clean_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("gc");
    let out = run(&["grad-check", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let raw = fs::read_to_string(out_dir.join("gradcheck.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&raw).unwrap();
    let checks = doc["checks"].as_array().expect("checks array");
    assert_eq!(checks.len(), 2, "one entry per variant");
    for check in checks {
        let err = check["max_rel_error"].as_f64().unwrap();
        assert!(err <= 1e-6, "{}: error {err:e}", check["variant"]);
        assert!(check["entries_checked"].as_u64().unwrap() > 0);
    }
}

#[test]
fn gen_data_writes_the_batch_and_states_the_energy_split() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let out = run(&["gen-data", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("energy"), "summary must state the split");

    let text = fs::read_to_string(out_dir.join("batch.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("token,kind,component,value"));
    let mut kinds = std::collections::BTreeSet::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 4, "bad row: {line}");
        kinds.insert(cells[1].to_owned());
        cells[3].parse::<f64>().unwrap();
    }
    assert_eq!(
        kinds.into_iter().collect::<Vec<_>>(),
        ["x", "y"],
        "both the inputs and the targets must be present"
    );
}

#[test]
fn compare_writes_every_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "steps = 30\nlog_every = 10\n");
    let out_dir = dir.path().join("cmp");
    let out = run(&["compare", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    for rel in [
        "warm/metrics.csv",
        "baseline/metrics.csv",
        "baseline/similarity.csv",
        "baseline/gate_alignment.csv",
        "sd/metrics.csv",
        "sd/similarity.csv",
        "sd/gate_alignment.csv",
    ] {
        assert!(out_dir.join(rel).is_file(), "{rel} missing");
    }
    let summary = stdout(&out);
    assert!(
        summary.contains("baseline") && summary.contains("sd"),
        "summary must name both arms: {summary}"
    );
}

#[test]
fn sweeps_emit_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "steps = 20\nlog_every = 20\n");

    let rank_dir = dir.path().join("ranks");
    let out = run(&[
        "sweep-rank",
        "--config",
        &cfg,
        "--out",
        rank_dir.to_str().unwrap(),
        "--ranks",
        "2,4",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let sweep = fs::read_to_string(rank_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "k,final_loss,mean_expert_similarity");
    assert_eq!(lines.len(), 3, "one row per rank: {sweep}");

    let stress_dir = dir.path().join("stress");
    let out = run(&[
        "lr-stress",
        "--config",
        &cfg,
        "--out",
        stress_dir.to_str().unwrap(),
        "--lrs",
        "0.5",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let stress = fs::read_to_string(stress_dir.join("stress.csv")).unwrap();
    let lines: Vec<&str> = stress.lines().collect();
    assert_eq!(lines[0], "variant,lr,diverged,divergence_step,peak_aux_loss");
    assert_eq!(lines.len(), 3, "both variants at one rate: {stress}");
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(cells[0] == "baseline" || cells[0] == "sd");
        assert!(cells[2] == "0" || cells[2] == "1");
    }
}

#[test]
fn divergence_exits_two_but_still_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "steps = 50\nlr = 1e6\nlog_every = 1\n");
    let out_dir = dir.path().join("boom");
    let out = run(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("diverged"), "stderr: {}", stderr(&out));
    assert!(out_dir.join("metrics.csv").is_file(), "metrics must survive divergence");
    assert!(out_dir.join("model.sdmk").is_file(), "model must survive divergence");
}
