use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use karina_core::data::{generate_synthetic, GridFile, SyntheticSpec};
use tempfile::TempDir;

const SMOKE: &str = "\
# toy model, 2 epochs, 30 synthetic days
synthetic.n_days=30
data.train_days=20
train.epochs=2
eval.leads=3
";

fn karina(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_karina"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("smoke.cfg"), SMOKE).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cfg(&self) -> String {
        self.path("smoke.cfg").display().to_string()
    }

    /// Runs `cmd` with the smoke config plus `sets`, writing to `out`.
    fn cmd(&self, cmd: &str, out: &str, sets: &[&str]) -> Output {
        let cfg = self.cfg();
        let out = self.path(out).display().to_string();
        let mut args = vec![cmd, "--config", cfg.as_str(), "--out", out.as_str()];
        for s in sets {
            args.push("--set");
            args.push(s);
        }
        karina(&args)
    }

    fn ok(&self, cmd: &str, out: &str, sets: &[&str]) {
        let o = self.cmd(cmd, out, sets);
        assert!(o.status.success(), "{cmd} failed: {}", stderr(&o));
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }

    fn trained(&self) -> String {
        self.ok("train", "train", &[]);
        self.path("train/checkpoint.krna").display().to_string()
    }
}

fn rerun_from_resolved(run: &Run, cmd: &str, first: &str, second: &str) -> Output {
    let resolved = run.path(&format!("{first}/resolved.cfg")).display().to_string();
    let out = run.path(second).display().to_string();
    karina(&[cmd, "--config", &resolved, "--out", &out])
}

#[test]
fn missing_data_path_names_the_key() {
    let run = Run::new();
    let o = run.cmd("train", "t", &["data.source=file"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.path"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_and_bad_usage_exit_one() {
    let run = Run::new();
    let o = run.cmd("train", "t", &["train.momentum=0.9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.momentum"));
    assert_eq!(run.cmd("train", "t", &["no_equals_sign"]).status.code(), Some(1));
    assert_eq!(karina(&["train"]).status.code(), Some(1));
    assert_eq!(karina(&["forecast", "--out", "x"]).status.code(), Some(1));
    assert_eq!(karina(&["--help"]).status.code(), Some(0));
}

#[test]
fn command_specific_keys_are_required() {
    let run = Run::new();
    for (cmd, key) in [
        ("evaluate", "eval.checkpoint"),
        ("rollout", "rollout.checkpoint"),
        ("finetune", "finetune.init"),
    ] {
        let o = run.cmd(cmd, cmd, &[]);
        assert_eq!(o.status.code(), Some(1), "{cmd}");
        assert!(stderr(&o).contains(key), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn runtime_failures_exit_two_and_leave_a_marker() {
    let run = Run::new();
    let o = run.cmd("evaluate", "e", &["eval.checkpoint=/nonexistent/x.krna"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(run.read("e/FAILED").contains("x.krna"));
}

#[test]
fn checkpoint_data_channel_mismatch_is_an_error() {
    let run = Run::new();
    let ckpt = run.trained();
    let o = run.cmd(
        "evaluate",
        "e",
        &[&format!("eval.checkpoint={ckpt}"), "synthetic.n_blob_channels=2"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("channels"));
    let o = run.cmd("train", "t2", &["model.in_channels=7"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.in_channels"));
}

#[test]
fn smoke_training_is_fast_and_complete() {
    let run = Run::new();
    let t = Instant::now();
    run.ok("train", "train", &[]);
    assert!(t.elapsed().as_secs_f64() < 60.0, "{:?}", t.elapsed());
    for f in ["checkpoint.krna", "checkpoint.sha256", "train_report.csv", "norm_stats.txt", "resolved.cfg"] {
        assert!(run.path("train").join(f).exists(), "{f}");
    }
    assert!(!run.path("train/FAILED").exists());
    let report = run.read("train/train_report.csv");
    assert_eq!(report.lines().count(), 3);
    assert!(report.starts_with("epoch,step,lr,train_loss,val_loss,seconds\n"));
}

#[test]
fn training_is_reproducible_from_its_resolved_config() {
    let run = Run::new();
    run.ok("train", "a", &["seed=5", "data.val_days=4"]);
    run.ok("train", "b", &["seed=5", "data.val_days=4"]);
    let o = rerun_from_resolved(&run, "train", "a", "c");
    assert!(o.status.success(), "{}", stderr(&o));
    let hash = run.read("a/checkpoint.sha256");
    for other in ["b", "c"] {
        assert_eq!(run.read(&format!("{other}/checkpoint.sha256")), hash);
        assert_eq!(
            run.read(&format!("{other}/train_report.csv")),
            run.read("a/train_report.csv")
        );
        assert_eq!(run.read(&format!("{other}/resolved.cfg")), run.read("a/resolved.cfg"));
    }
    run.ok("train", "d", &["seed=6", "data.val_days=4"]);
    assert_ne!(run.read("d/checkpoint.sha256"), hash);
}

#[test]
fn evaluating_truth_scores_perfectly() {
    let run = Run::new();
    run.ok("evaluate", "e", &["eval.forecast=truth"]);
    let csv = run.read("e/metrics.csv");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // three blob channels are scored, orography and insolation are reset
    assert_eq!(rows.len(), 3 * 3 * 2);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        let v: f64 = f[3].parse().unwrap();
        match f[2] {
            "rmse" => assert_eq!(v, 0.0, "{r}"),
            "acc" => assert_eq!(v, 1.0, "{r}"),
            m => panic!("metric {m}"),
        }
    }
    let curve = run.read("e/rmse_vs_lead.csv");
    assert_eq!(curve.lines().count(), 1 + 3 * 3);
}

#[test]
fn evaluate_counts_and_determinism() {
    let run = Run::new();
    let ckpt = run.trained();
    let set = format!("eval.checkpoint={ckpt}");
    run.ok("evaluate", "e1", &[&set, "statics=none", "eval.leads=2"]);
    let csv = run.read("e1/metrics.csv");
    assert_eq!(csv.lines().count(), 1 + 5 * 2 * 2);
    let o = rerun_from_resolved(&run, "evaluate", "e1", "e2");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "rmse_vs_lead.csv", "resolved.cfg"] {
        assert_eq!(run.read(&format!("e2/{f}")), run.read(&format!("e1/{f}")), "{f}");
    }
    run.ok("evaluate", "e3", &[&set, "eval.acc=false"]);
    assert_eq!(run.read("e3/metrics.csv").lines().count(), 1 + 3 * 3);
}

#[test]
fn rollout_matches_evaluate_and_writes_one_file_per_lead() {
    let run = Run::new();
    let ckpt = run.trained();
    run.ok("evaluate", "e", &[&format!("eval.checkpoint={ckpt}")]);
    run.ok("rollout", "r1", &[&format!("rollout.checkpoint={ckpt}"), "rollout.horizon=1"]);
    let first = GridFile::read(run.path("e/first_forecast.gfld")).unwrap();
    let lead1 = GridFile::read(run.path("r1/lead_001.gfld")).unwrap();
    assert_eq!(lead1.frame(0), first.frame(0));
    assert_eq!(lead1.dates[0], first.dates[0]);

    run.ok("rollout", "r6", &[&format!("rollout.checkpoint={ckpt}"), "rollout.horizon=6"]);
    let files = gfld_files(&run.path("r6"));
    assert_eq!(files.len(), 6);

    run.ok(
        "rollout",
        "rs",
        &[&format!("rollout.checkpoint={ckpt}"), "rollout.horizon=6", "rollout.single_file=true"],
    );
    let files = gfld_files(&run.path("rs"));
    assert_eq!(files.len(), 1);
    let all = GridFile::read(&files[0]).unwrap();
    assert_eq!(all.n_time(), 6);
    let lead4 = GridFile::read(run.path("r6/lead_004.gfld")).unwrap();
    assert_eq!(all.frame(3), lead4.frame(0));

    let o = rerun_from_resolved(&run, "rollout", "r6", "r6b");
    assert!(o.status.success());
    assert_eq!(run.read("r6b/drift.csv"), run.read("r6/drift.csv"));
}

fn gfld_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "gfld"))
        .collect();
    v.sort();
    v
}

/// Weighted mean and std with per-cell cos(latitude) weights.
fn moments(plane: &[f32], n_lat: usize, n_lon: usize) -> (f64, f64, f64, f64) {
    let lat = |j: usize| (-90.0 + (j as f64 + 0.5) * 180.0 / n_lat as f64).to_radians().cos();
    let (mut sw, mut s) = (0.0, 0.0);
    for (i, &v) in plane.iter().enumerate() {
        sw += lat(i / n_lon);
        s += lat(i / n_lon) * v as f64;
    }
    let mean = s / sw;
    let var: f64 = plane
        .iter()
        .enumerate()
        .map(|(i, &v)| lat(i / n_lon) * (v as f64 - mean).powi(2))
        .sum::<f64>()
        / sw;
    let min = plane.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    let max = plane.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    (mean, var.sqrt(), min, max)
}

#[test]
fn drift_csv_matches_recomputation_from_emitted_fields() {
    let run = Run::new();
    let ckpt = run.trained();
    run.ok("rollout", "r", &[&format!("rollout.checkpoint={ckpt}"), "rollout.horizon=5"]);
    let drift = run.read("r/drift.csv");
    let mut prev: Vec<f64> = Vec::new();
    for (k, line) in drift.lines().skip(1).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let step: usize = f[0].parse().unwrap();
        let file = GridFile::read(run.path(&format!("r/lead_{step:03}.gfld"))).unwrap();
        let c = file.channel_index(f[1]).unwrap();
        let plane = file.frame_len() / file.n_channel();
        let field = &file.frame(0)[c * plane..(c + 1) * plane];
        let (mean, std, min, max) = moments(field, file.n_lat, file.n_lon);
        let got: Vec<f64> = f[2..].iter().map(|v| v.parse().unwrap()).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-8 * b.abs().max(1.0);
        assert!(close(got[0], mean) && close(got[1], std), "{line}");
        assert!(close(got[2], min) && close(got[3], max), "{line}");
        if k >= file.n_channel() {
            let p = prev[k - file.n_channel()];
            assert!(close(got[4], mean - p), "{line}");
        }
        prev.push(mean);
    }
    assert_eq!(drift.lines().count(), 1 + 5 * 5);
}

#[test]
fn finetune_runs_phases_on_a_trained_checkpoint() {
    let run = Run::new();
    let ckpt = run.trained();
    run.ok(
        "finetune",
        "f",
        &[&format!("finetune.init={ckpt}"), "finetune.phases=0+12@0.005x1;0+6+12+18@0.0025x1"],
    );
    let report = run.read("f/train_report.csv");
    let epochs: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["0", "1"]);
    assert_ne!(run.read("f/checkpoint.sha256"), run.read("train/checkpoint.sha256"));
    let o = rerun_from_resolved(&run, "finetune", "f", "f2");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(run.read("f2/checkpoint.sha256"), run.read("f/checkpoint.sha256"));
}

#[test]
fn file_data_trains_and_rejects_sub_daily_lags() {
    let run = Run::new();
    let spec = SyntheticSpec {
        n_days: 30,
        ..SyntheticSpec::default()
    };
    let data = run.path("data.gfld");
    generate_synthetic(&spec).unwrap().write(&data).unwrap();
    let src = format!("data.path={}", data.display());
    run.ok("train", "t", &["data.source=file", &src]);
    let ckpt = run.path("t/checkpoint.krna").display().to_string();
    let o = run.cmd(
        "finetune",
        "f",
        &["data.source=file", &src, &format!("finetune.init={ckpt}")],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(run.path("f/FAILED").exists());
    assert!(stderr(&o).contains("lag"));
}

#[test]
fn ablation_tables_have_three_rows_and_repeat_exactly() {
    let run = Run::new();
    let sets = ["ablate.leads=1,3", "ablate.kernel_sweep=true", "train.epochs=1"];
    run.ok("ablate", "a", &sets);
    let table = run.read("a/ablation.csv");
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "variant,Z500_d1,Z500_d3,T850_d1,T850_d3,T2m_d1,T2m_d3");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["plain", "padded", "padded_se"]);
    assert_eq!(run.read("a/kernel_sweep.csv").lines().count(), 4);
    assert_eq!(run.read("a/pole_isolation.csv").lines().count(), 1 + 2 * 2);
    let o = rerun_from_resolved(&run, "ablate", "a", "b");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["ablation.csv", "kernel_sweep.csv", "pole_isolation.csv", "resolved.cfg"] {
        assert_eq!(run.read(&format!("b/{f}")), run.read(&format!("a/{f}")), "{f}");
    }
}
