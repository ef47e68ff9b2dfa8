use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fallscope");

struct Run {
    root: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        Self {
            root: tempfile::tempdir().unwrap(),
        }
    }

    fn data(&self) -> PathBuf {
        self.root.path().join("data")
    }

    fn out(&self) -> PathBuf {
        self.root.path().join("out")
    }

    fn exec(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut c = Command::new(BIN);
        c.arg(cmd)
            .args(["--data-dir", self.data().to_str().unwrap()])
            .args(["--out-dir", self.out().to_str().unwrap()])
            .args([
                "--hidden",
                "64",
                "--latent-dim",
                "8",
                "--epochs",
                "3",
                "--batch-size",
                "32",
            ])
            .args(["--n-train", "12", "--n-test", "10", "--trees", "30"])
            .args(extra)
            .env_remove("FALLSCOPE_OUT");
        c.output().unwrap()
    }

    fn ok(&self, cmd: &str, extra: &[&str]) -> String {
        let o = self.exec(cmd, extra);
        assert!(
            o.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn pipeline(&self, extra: &[&str]) {
        for cmd in ["gen-data", "train", "score", "detect"] {
            self.ok(cmd, extra);
        }
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    String::from_utf8(read(p))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn manifest_value(run: &Run, key: &str) -> usize {
    let text = String::from_utf8(read(&run.data().join("manifest.txt"))).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .parse()
        .unwrap()
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in walk(dir) {
        out.push((e.strip_prefix(dir).unwrap().display().to_string(), read(&e)));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn gen_data_counts_match_mask_arithmetic() {
    let run = Run::new();
    let out = run.ok("gen-data", &["--n-train", "500", "--n-test", "4"]);
    assert!(out.contains("11500 patches"), "{out}");
    assert_eq!(manifest_value(&run, "train_patches"), 11_500);
    assert_eq!(manifest_value(&run, "test_patches"), 92);
    assert_eq!(fs::read_dir(run.data().join("train")).unwrap().count(), 500);
}

#[test]
fn gen_data_is_reproducible_and_clean_at_zero_contamination() {
    let a = Run::new();
    let b = Run::new();
    a.ok("gen-data", &["--seed", "5"]);
    b.ok("gen-data", &["--seed", "5"]);
    assert_eq!(dir_snapshot(&a.data()), dir_snapshot(&b.data()));

    let c = Run::new();
    c.ok("gen-data", &["--contamination", "0"]);
    assert_eq!(manifest_value(&c, "positive_patches"), 0);
    assert!(csv_rows(&c.data().join("labels.csv")).iter().all(|r| r[2] == "0"));
}

#[test]
fn invalid_contamination_exits_2() {
    let run = Run::new();
    for bad in ["1", "-0.1", "abc"] {
        let o = run.exec("gen-data", &["--contamination", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn full_pipeline_outputs_and_determinism() {
    let a = Run::new();
    a.pipeline(&["--seed", "3"]);

    let trace = csv_rows(&a.out().join("loss_trace.csv"));
    assert_eq!(trace.len(), 3);
    let first: f64 = trace[0][3].parse().unwrap();
    let last: f64 = trace[2][3].parse().unwrap();
    assert!(last < first, "{first} -> {last}");

    let scores = csv_rows(&a.out().join("scores.csv"));
    assert_eq!(scores.len(), 10 * 23);
    for r in &scores {
        let s: f64 = r[2].parse().unwrap();
        assert!(s > 0.0 && s < 1.0);
    }

    // Same seed: every artifact byte-identical.
    let b = Run::new();
    b.pipeline(&["--seed", "3"]);
    for name in [
        "model.fsva",
        "forest.fsif",
        "scores.csv",
        "detections.csv",
        "loss_trace.csv",
        "train_features.csv",
    ] {
        assert_eq!(read(&a.out().join(name)), read(&b.out().join(name)), "{name}");
    }

    // Rerunning score in place reproduces the scores.
    let before = read(&a.out().join("scores.csv"));
    a.ok("score", &["--seed", "3"]);
    assert_eq!(read(&a.out().join("scores.csv")), before);
}

#[test]
fn jobs_do_not_change_outputs() {
    let run = Run::new();
    run.pipeline(&["--seed", "8"]);
    let one = read(&run.out().join("scores.csv"));
    let forest = read(&run.out().join("forest.fsif"));
    run.ok("score", &["--seed", "8", "--jobs", "4"]);
    assert_eq!(read(&run.out().join("scores.csv")), one);
    assert_eq!(read(&run.out().join("forest.fsif")), forest);
}

#[test]
fn detect_flags_top_k() {
    let run = Run::new();
    run.pipeline(&["--seed", "4"]);
    let out = run.ok("detect", &["--seed", "4", "--fraction", "0.1"]);
    assert!(out.contains("flags 23 of 230"), "{out}");
    let rows = csv_rows(&run.out().join("detections.csv"));
    let mut order: Vec<(f64, usize)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r[2].parse().unwrap(), i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let top: Vec<usize> = order[..23].iter().map(|p| p.1).collect();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[3] == "1", top.contains(&i), "row {i}");
    }
    for bad in ["0", "1", "1.2"] {
        assert_eq!(run.exec("detect", &["--fraction", bad]).status.code(), Some(2));
    }
}

#[test]
fn eval_reports_and_checks_consistency() {
    let run = Run::new();
    run.pipeline(&["--seed", "6", "--contamination", "0.1"]);
    let report = run.ok("eval", &["--seed", "6"]);
    assert!(
        report.contains("Recall") && report.contains("Mask quality"),
        "{report}"
    );
    let conf = csv_rows(&run.out().join("confusion.csv"));
    let total: usize = conf[0][..4].iter().map(|v| v.parse::<usize>().unwrap()).sum();
    assert_eq!(total, 230);
    let hist = csv_rows(&run.out().join("histogram.csv"));
    assert_eq!(hist.len(), 50);
    assert_eq!(
        hist.iter().map(|r| r[2].parse::<usize>().unwrap()).sum::<usize>(),
        230
    );

    // An oracle detector scores perfectly.
    let labels = csv_rows(&run.data().join("labels.csv"));
    let mut oracle = String::from("frame_id,grid_index,score,flagged\n");
    for l in &labels {
        oracle.push_str(&format!("{},{},0.5,{}\n", l[0], l[1], l[2]));
    }
    fs::write(run.out().join("detections.csv"), &oracle).unwrap();
    let report = run.ok("eval", &[]);
    assert!(report.contains("100.0%"), "{report}");
    let conf = csv_rows(&run.out().join("confusion.csv"));
    assert_eq!(conf[0][1], "0");
    assert_eq!(conf[0][2], "0");

    // Dropping a row makes detections disagree with the labels.
    let truncated: String = oracle.lines().take(20).map(|l| format!("{l}\n")).collect();
    fs::write(run.out().join("detections.csv"), truncated).unwrap();
    assert_eq!(run.exec("eval", &[]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_2() {
    let run = Run::new();
    assert_eq!(run.exec("train", &[]).status.code(), Some(2));
    run.ok("gen-data", &[]);
    assert_eq!(run.exec("score", &[]).status.code(), Some(2));
    assert_eq!(run.exec("detect", &[]).status.code(), Some(2));
    assert_eq!(run.exec("eval", &[]).status.code(), Some(2));
    fs::create_dir_all(run.out()).unwrap();
    fs::write(run.out().join("model.fsva"), b"FSVX garbage").unwrap();
    let o = run.exec("score", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));
    assert_eq!(
        Command::new(BIN).arg("bogus").output().unwrap().status.code(),
        Some(2)
    );
}

#[test]
fn divergence_exits_3_with_epoch() {
    let run = Run::new();
    run.ok("gen-data", &[]);
    let o = run.exec("train", &["--learning-rate", "1e30"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn out_dir_env_and_config_file() {
    let run = Run::new();
    let env_out = run.root.path().join("env_out");
    let cfg = run.root.path().join("run.conf");
    fs::write(
        &cfg,
        format!(
            "data_dir = {}\nn_train = 6\nn_test = 3\nhidden = 32\nlatent_dim = 4\nepochs = 2\n",
            run.data().display()
        ),
    )
    .unwrap();
    let status = Command::new(BIN)
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .env("FALLSCOPE_OUT", &env_out)
        .status()
        .unwrap();
    assert!(status.success());
    let o = Command::new(BIN)
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("FALLSCOPE_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(env_out.join("model.fsva").exists());
    assert_eq!(csv_rows(&env_out.join("loss_trace.csv")).len(), 2);
}
