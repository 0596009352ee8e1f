use std::fs;
use std::path::Path;
use std::process::Command;

use dynamarl::cli::RunSummary;

const BIN: &str = env!("CARGO_BIN_EXE_dynamarl");

fn spec(task: &str, roster: &str, events: &str, mode: &str) -> String {
    format!(
        r#"schema_version = 1
task = "{task}"
roster = {roster}
episodes = 12
seeds = [1, 2]
mode = "{mode}"
preset = "desk"
{events}
[eval]
every = 4
episodes = 2

[train]
batch_size = 16

[net]
token_hidden = 8
token_dim = 6
block_hidden = 8
value_feature_dim = 8
policy_feature_dim = 8
"#
    )
}

const JOIN: &str = "[[events]]\nepisode = 8\njoin = [\"green\", \"red\"]\n";

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn train(dir: &Path, text: &str, cmd: &str) -> std::process::Output {
    let path = dir.join("spec.toml");
    fs::write(&path, text).unwrap();
    run(&[cmd, "--spec", path.to_str().unwrap(), "--out", dir.join("run").to_str().unwrap()])
}

fn summary(dir: &Path, seed: u64) -> RunSummary {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("run/seed-{seed}/summary.json"))).unwrap()).unwrap()
}

#[test]
fn adapt_run_writes_reproducible_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let text = spec("finding_home", r#"["green", "green", "red", "red"]"#, JOIN, "few_shot");
    for d in [&a, &b] {
        let out = train(d.path(), &text, "adapt");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["metrics.csv", "evals.csv", "summary.json", "final.ckpt", "checkpoint-8.ckpt"] {
        let p = format!("run/seed-1/{f}");
        assert_eq!(fs::read(a.path().join(&p)).unwrap(), fs::read(b.path().join(&p)).unwrap(), "{f}");
    }
    let s = summary(a.path(), 1);
    assert_eq!(s.original_agents, vec![0, 1, 2, 3]);
    assert_eq!(s.stages.len(), 2);
    assert_eq!(s.stages[1].joined, vec![4, 5]);
    // Two joiners: an embedding row and three 2-wide selectors each.
    assert_eq!(s.stages[1].trainable_scalars, 2 * (8 + 3 * 2));
    assert!(s.stages[1].threshold.is_some());

    let out = run(&["export", "--run", a.path().join("run").to_str().unwrap(), "--smooth", "3", "--svg"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let export = a.path().join("run/export");
    let sel = fs::read_to_string(export.join("selectors.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(sel.as_bytes());
    let mut joined_rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let w: f64 = rec[6].parse::<f64>().unwrap() + rec[7].parse::<f64>().unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        if &rec[3] == "false" {
            joined_rows += 1;
        }
    }
    assert_eq!(joined_rows, 2 * 2 * 3);
    let curve = fs::read_to_string(export.join("reward_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 13);
    assert!(curve.lines().skip(1).all(|l| l.split(',').nth(1) == Some("2")));
    assert!(export.join("reward_curve.svg").exists());
}

#[test]
fn plain_and_from_scratch_runs() {
    let d = tempfile::tempdir().unwrap();
    let out = train(d.path(), &spec("finding_home", r#"["green", "red"]"#, "", "few_shot"), "train");
    assert!(out.status.success());
    assert_eq!(summary(d.path(), 2).stages.len(), 1);
    // adapt refuses a spec without joins.
    let out = train(d.path(), &spec("finding_home", r#"["green", "red"]"#, "", "few_shot"), "adapt");
    assert_eq!(out.status.code(), Some(1));

    let out = train(d.path(), &spec("finding_home", r#"["green", "red"]"#, JOIN, "from_scratch"), "train");
    assert!(out.status.success());
    let s = summary(d.path(), 1);
    assert_eq!(s.stages[1].trainable_scalars, s.parameter_count);
}

#[test]
fn invalid_spec_exits_with_line() {
    let d = tempfile::tempdir().unwrap();
    let bad = spec("finding_home", r#"["green", "red"]"#, "[[events]]\nepisode = 30\njoin = [\"red\"]\n", "few_shot");
    let out = train(d.path(), &bad, "train");
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 8") && err.contains("past the run length"), "{err}");
    assert_eq!(run(&["train"]).status.code(), Some(1));
}

#[test]
fn eval_pairings_and_empty_output() {
    let d = tempfile::tempdir().unwrap();
    let text = spec("predator_prey", r#"["predator", "predator", "prey"]"#, "", "few_shot");
    assert!(train(d.path(), &text, "train").status.success());
    let ours = format!("ours={}", d.path().join("run/seed-1/final.ckpt").display());
    let scratch = format!("scratch={}", d.path().join("run/seed-2/final.ckpt").display());
    let out_dir = d.path().join("eval");
    let out = run(&[
        "eval", "--checkpoint", &ours, "--checkpoint", &scratch, "--pairing", "ours,scratch", "--pairing", "scratch,ours",
        "--episodes", "2", "--runs", "3", "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("touches.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "pairing,policy,opponent,runs,mean_reward,mean_touches");
    assert!(lines[1].starts_with("\"ours,scratch\"") && lines[2].starts_with("\"scratch,ours\""));
    assert_eq!(fs::read_to_string(out_dir.join("eval.csv")).unwrap().lines().count(), 7);

    let empty = d.path().join("empty");
    let out = run(&["eval", "--checkpoint", &ours, "--episodes", "0", "--out", empty.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(empty.join("eval.csv")).unwrap().lines().count(), 1);
    assert_eq!(fs::read_to_string(empty.join("touches.csv")).unwrap().lines().count(), 1);

    // Cooperative checkpoints: reward only, and no pairing.
    let coop = tempfile::tempdir().unwrap();
    assert!(train(coop.path(), &spec("finding_home", r#"["green", "red"]"#, "", "few_shot"), "train").status.success());
    let ck = coop.path().join("run/seed-1/final.ckpt");
    let out_dir = coop.path().join("eval");
    let out = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "1", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let header = fs::read_to_string(out_dir.join("eval.csv")).unwrap();
    assert!(!header.lines().next().unwrap().contains("touches"));
    let out = run(&["eval", "--checkpoint", &format!("a={}", ck.display()), "--pairing", "a,a", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
