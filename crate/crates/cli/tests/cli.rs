use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[world]
n_users = 12
n_videos = 30

[train]
steps = 3
demonstrations = 20
"#;

fn enflab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enflab"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(enflab(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(enflab(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(enflab(dir.path(), &["--config", "/nonexistent.toml", "rewards"]).status.code(), Some(1));
    assert_eq!(enflab(dir.path(), &["eval"]).status.code(), Some(1));
    assert_eq!(enflab(dir.path(), &["report", "/nonexistent.jsonl"]).status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[world]\nn_users = 0\n").unwrap();
    assert_eq!(enflab(dir.path(), &["--config", bad.to_str().unwrap(), "rewards"]).status.code(), Some(1));
}

#[test]
fn help_exits_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = enflab(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("simulate-deploy"));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.jsonl");
    fs::write(&junk, "not json\n").unwrap();
    assert_eq!(enflab(dir.path(), &["report", junk.to_str().unwrap()]).status.code(), Some(2));

    let ckpt = dir.path().join("broken.ckpt");
    fs::write(&ckpt, "garbage").unwrap();
    let cfg = small_config(dir.path());
    let o = enflab(dir.path(), &["--config", &cfg, "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reward_table_lists_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = enflab(dir.path(), &["rewards", "--mode", "flat"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1 + 24);
    assert!(text.lines().nth(1).unwrap().contains("FlatBaseline"));
}

#[test]
fn rewards_scores_a_response_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("responses.jsonl");
    fs::write(
        &input,
        concat!(
            r#"{"response":"<think>plot is dull</think><answer>C</answer>","truth":{"attitude":"negative","category":"boring_unappealing","reason_text":"plot is dull"}}"#,
            "\n",
            r#"{"response":"no tags","truth":{"attitude":"positive"}}"#,
            "\n"
        ),
    )
    .unwrap();
    let o = enflab(dir.path(), &["rewards", "--responses", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = fs::read_to_string(dir.path().join("out/reward_breakdown.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["total"], 3.0);
    assert_eq!(lines[1]["total"], 0.0);
}

#[test]
fn gen_world_writes_datasets_and_drop_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = enflab(dir.path(), &["--config", &cfg, "gen-world", "--inject-anomalies", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["users.jsonl", "videos.jsonl", "interactions.jsonl", "explicit_feedback.jsonl", "manifest.json"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
    let text = stdout(&o);
    assert!(text.contains("\"injected_anomalies\": 4"));
    assert!(text.contains("\"play_rate_anomaly\": 2"));
    assert!(text.contains("\"accidental_tap\": 2"));
}

#[test]
fn train_eval_deploy_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");

    let o = enflab(dir.path(), &["--config", &cfg, "train", "--eval-every", "1", "--checkpoint-every", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(out.join("eval_log.jsonl")).unwrap().lines().count(), 3);
    assert!(out.join("policy_step2.ckpt").exists());
    let ckpt = out.join("policy.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let o = enflab(dir.path(), &["--config", &cfg, "eval", "--checkpoint", ckpt]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = out.join("eval_report.json");
    assert!(report.exists());
    let o = enflab(dir.path(), &["report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("class_acc"));

    let log = out.join("train_log.jsonl");
    let o = enflab(dir.path(), &["report", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 4);

    let o = enflab(dir.path(), &["--config", &cfg, "simulate-deploy", "--checkpoint", ckpt]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let deploy = out.join("deploy_report.json");
    let o = enflab(dir.path(), &["report", deploy.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn oracle_predictor_is_perfect_and_noop_filter_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = enflab(dir.path(), &["--config", &cfg, "eval", "--predictor", "oracle"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["class_acc"], 1.0);

    let o = enflab(dir.path(), &["--config", &cfg, "simulate-deploy", "--backend", "noop"]);
    assert_eq!(o.status.code(), Some(0));
    let d: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/deploy_report.json")).unwrap()).unwrap();
    assert_eq!(d["baseline"], d["treatment"]);
    assert_eq!(d["filtered"], 0);

    let o = enflab(dir.path(), &["--config", &cfg, "simulate-deploy", "--backend", "oracle"]);
    assert_eq!(o.status.code(), Some(0));
    let d: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/deploy_report.json")).unwrap()).unwrap();
    assert_eq!(d["treatment"]["fast_skip_rate"], 0.0);
}
