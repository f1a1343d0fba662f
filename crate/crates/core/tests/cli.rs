use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[model]\nd_emb = 8\nnum_blocks = 1\nnum_heads = 2\nhidden = 16\ndropout = 0.0\n\n[train]\nbatch_size = 4\ncheckpoint_every = 10\n";

fn taskseq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskseq"))
        .args(args)
        .current_dir(dir)
        .env_remove("TASKSEQ_SEED")
        .env_remove("TASKSEQ_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = taskseq(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn generate_is_deterministic_and_validated() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["generate", "--out", "a.jsonl", "--num-problems", "128", "--split", "test", "--seed", "4"]);
    ok(d.path(), &["generate", "--out", "b.jsonl", "--num-problems", "128", "--split", "test", "--seed", "4", "--workers", "3"]);
    assert_eq!(lines(&d.path().join("a.jsonl")), 130);
    assert_eq!(fs::read(d.path().join("a.jsonl")).unwrap(), fs::read(d.path().join("b.jsonl")).unwrap());

    fs::write(d.path().join("bad.toml"), "[prior]\nk_max = 9\n").unwrap();
    let out = taskseq(d.path(), &["generate", "--config", "bad.toml", "--out", "c.jsonl", "--num-problems", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("k_max"));
    assert!(!d.path().join("c.jsonl").exists());

    fs::write(d.path().join("typo.toml"), "[prior]\nnum_taks = 9\n").unwrap();
    assert!(!taskseq(d.path(), &["generate", "--config", "typo.toml", "--out", "c.jsonl"]).status.success());
}

#[test]
fn seed_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["generate", "--out", "flag.jsonl", "--num-problems", "3", "--seed", "11"]);
    let out = Command::new(env!("CARGO_BIN_EXE_taskseq"))
        .args(["generate", "--out", "env.jsonl", "--num-problems", "3"])
        .current_dir(d.path())
        .env("TASKSEQ_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(d.path().join("flag.jsonl")).unwrap(), fs::read(d.path().join("env.jsonl")).unwrap());
}

#[test]
fn show_config_reports_defaults_and_overrides() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["train", "--show-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for line in ["d_emb = 64", "num_heads = 8", "num_blocks = 12", "temperature = 4.0", "lr = 0.001", "batch_size = 1024", "steps = 20000"] {
        assert!(text.contains(line), "missing {line} in\n{text}");
    }
    let out = ok(d.path(), &["train", "--show-config", "--steps", "7"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("steps = 7"));
}

#[test]
fn train_smoke_and_failure_leave_clean_outputs() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.toml"), TINY).unwrap();
    ok(d.path(), &["train", "--config", "tiny.toml", "--out", "run", "--steps", "1"]);
    let mut names: Vec<String> = fs::read_dir(d.path().join("run")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["checkpoint-000001.bin", "config.toml", "final.bin", "train_log.jsonl"]);
    assert_eq!(lines(&d.path().join("run/train_log.jsonl")), 3);

    let out = taskseq(d.path(), &["train", "--config", "missing.toml", "--out", "run2", "--steps", "1"]);
    assert!(!out.status.success());
    assert!(!d.path().join("run2").exists());
    assert_eq!(fs::read_dir(d.path()).unwrap().count(), 2);
}

#[test]
fn train_on_a_dataset() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.toml"), TINY).unwrap();
    ok(d.path(), &["generate", "--out", "train.jsonl", "--num-problems", "3", "--split", "train"]);
    ok(d.path(), &["train", "--config", "tiny.toml", "--dataset", "train.jsonl", "--out", "run", "--steps", "2"]);
    assert!(d.path().join("run/final.bin").exists());
}

#[test]
fn evaluate_and_report() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("tiny.toml"), TINY).unwrap();
    ok(p, &["generate", "--out", "test.jsonl", "--num-problems", "128", "--split", "test"]);
    ok(p, &["evaluate", "--problems", "test.jsonl", "--method", "random", "--iterations", "32", "--init-context", "4", "--out", "random.jsonl", "--no-timing"]);
    assert_eq!(lines(&p.join("random.jsonl")), 128);
    ok(p, &["evaluate", "--problems", "test.jsonl", "--method", "random", "--iterations", "32", "--init-context", "4", "--out", "again.jsonl", "--no-timing", "--workers", "2"]);
    assert_eq!(fs::read(p.join("random.jsonl")).unwrap(), fs::read(p.join("again.jsonl")).unwrap());

    let out = taskseq(p, &["evaluate", "--problems", "test.jsonl", "--method", "pftsn", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--model"));

    ok(p, &["generate", "--out", "small.jsonl", "--num-problems", "6", "--seed", "2"]);
    ok(p, &["train", "--config", "tiny.toml", "--out", "run", "--steps", "1"]);
    ok(p, &["evaluate", "--problems", "small.jsonl", "--method", "pftsn", "--model", "run/final.bin", "--iterations", "8", "--out", "pftsn.jsonl"]);
    ok(p, &["evaluate", "--problems", "small.jsonl", "--method", "rule", "--iterations", "8", "--out", "rule.jsonl"]);
    ok(p, &["evaluate", "--problems", "small.jsonl", "--method", "random", "--iterations", "8", "--out", "rand.jsonl"]);

    let out = ok(p, &["report", "--traces", "pftsn.jsonl", "rule.jsonl", "rand.jsonl", "--out-prefix", "rep", "--break-even", "19,2.47,29,0.203"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.2267"));
    let per_problem = fs::read_to_string(p.join("rep_ranks_per_problem.csv")).unwrap();
    let mut rows = 0;
    for l in per_problem.lines().skip(1) {
        let sum: f64 = l.split(',').skip(3).map(|v| v.parse::<f64>().unwrap()).sum();
        assert_eq!(sum, 6.0);
        rows += 1;
    }
    assert_eq!(rows, 3 * 6);
    assert!(p.join("rep_curves.csv").exists() && p.join("rep_timing.csv").exists() && p.join("rep_break_even.csv").exists());

    let out = ok(p, &["report", "--traces", "rule.jsonl", "--out-prefix", "single"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank tables skipped"));
    assert!(p.join("single_curves.csv").exists());
    assert!(!p.join("single_ranks.csv").exists());

    let out = taskseq(p, &["report", "--traces", "random.jsonl", "rule.jsonl", "--out-prefix", "mixed"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("suites differ"));
}

#[test]
fn evaluate_all_configured_methods_into_a_directory() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("eval.toml"), "[eval]\nmethods = [\"random\", \"rule\", \"ddqn\"]\niterations = 4\n").unwrap();
    ok(p, &["generate", "--out", "s.jsonl", "--num-problems", "2"]);
    ok(p, &["evaluate", "--config", "eval.toml", "--problems", "s.jsonl", "--out", "traces"]);
    for m in ["random", "rule", "ddqn"] {
        assert_eq!(lines(&p.join(format!("traces/{m}.jsonl"))), 2);
    }
}

#[test]
fn checkpoint_problem_mismatch_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("tiny.toml"), TINY).unwrap();
    fs::write(p.join("six.toml"), "[prior]\nnum_tasks = 6\nseq_len = 6\n").unwrap();
    ok(p, &["train", "--config", "tiny.toml", "--out", "run", "--steps", "1"]);
    ok(p, &["generate", "--config", "six.toml", "--out", "six.jsonl", "--num-problems", "2"]);
    let out = taskseq(p, &["evaluate", "--problems", "six.jsonl", "--method", "pftsn", "--model", "run/final.bin", "--out", "t.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    assert!(!p.join("t.jsonl").exists());
}
