use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddt_core::evaluation::EvalReport;
use ddt_core::self_training::MetricRecord;
use ddt_harness::RunSummary;
use serde_json::Value;

fn ddt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddt")).args(args).env("RUST_LOG", "warn").output().expect("spawn ddt")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn tiny_config(dir: &Path, out: &Path, extra: &str) -> PathBuf {
    tiny_config_at(&dir.join("tiny.toml"), out, extra)
}

fn tiny_config_at(p: &Path, out: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 1
output_dir = "{}"

[data.spec]
train_images = 8
val_images = 4
image_side = 32
objects_per_image = [1, 2]
object_scale = [0.3, 0.45]
seed = 3

[diffusion.pretrain]
steps = 3
batch_size = 2

[diffusion.pretrain.arch]
stage_channels = [2, 2, 4, 4]
image_side = 32
time_embed_dim = 4

[features]
time_steps = 2
save_steps = 1
t_high = 100

[detector]
image_side = 32
pyramid_widths = [4, 4, 8, 8]
neck_width = 4
roi_hidden = 8
roi_batch = 16
rpn_batch = 32
roi_canonical_size = 8.0

[teacher_training]
total_steps = 4
batch_size = 2
warmup_steps = 1

[self_training]
total_steps = 8
batch_size = 2
warmup_steps = 1
eval_interval_fraction = 0.25
{extra}
"#,
        out.display()
    );
    std::fs::write(p, text).unwrap();
    p.to_path_buf()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    std::fs::write(&spec, "train_images = 3\nval_images = 2\nimage_side = 24\n[shift]\nnoise = 0.4\n").unwrap();
    for d in ["a", "b"] {
        ok(&ddt(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", tmp.path().join(d).to_str().unwrap(), "--seed", "9"]));
    }
    for f in ["source_train.json", "target_train.json", "target_train_oracle.json", "target_val.json", "source_train/100001.png"] {
        assert_eq!(std::fs::read(tmp.path().join("a").join(f)).unwrap(), std::fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let target: Value = serde_json::from_str(&read(&tmp.path().join("a/target_train.json"))).unwrap();
    assert_eq!(target["annotations"].as_array().unwrap().len(), 0);
}

#[test]
fn unknown_keys_fail_fast_with_a_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &tmp.path().join("out"), "sigmaa = 0.3\n[bogus]\nx = 1\n");
    let err = tmp.path().join("err.json");
    let out = ddt(&["train", "--config", cfg.to_str().unwrap(), "--mode", "baseline", "--error-json", err.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let rec: Value = serde_json::from_str(&read(&err)).unwrap();
    assert_eq!(rec["error"], "unknown_keys");
    assert_eq!(rec["unknown_keys"], serde_json::json!(["bogus", "self_training.sigmaa"]));
    assert!(!tmp.path().join("out").exists());

    let out = ddt(&["train", "--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let rec: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(rec["error"], "io");

    let out = ddt(&["train", "--config", cfg.to_str().unwrap(), "--mode", "ablation:everything"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baseline_then_eval_and_error_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = tiny_config(tmp.path(), &out_dir, "");
    ok(&ddt(&["train", "--config", cfg.to_str().unwrap(), "--mode", "baseline"]));
    let run = out_dir.join("baseline");
    for f in ["trainer.json", "detector.json", "summary.json", "losses.jsonl", "curve_target_val.svg", "curve_target_val.csv", "inputs.sha256", "burn_in.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(out_dir.join("config.toml").exists());
    assert!(!out_dir.join(".lock").exists());
    let metrics: Vec<MetricRecord> = read(&run.join("metrics.jsonl")).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(metrics.iter().filter(|m| m.split == "target_val").map(|m| m.step).collect::<Vec<_>>(), [2, 4, 5, 6, 8]);
    let summary: RunSummary = serde_json::from_str(&read(&run.join("summary.json"))).unwrap();
    assert_eq!(summary.steps, 8);

    let report_path = tmp.path().join("eval.json");
    let ck = run.join("detector.json");
    let val = out_dir.join("data/source_val.json");
    ok(&ddt(&["eval", "--ckpt", ck.to_str().unwrap(), "--dataset", val.to_str().unwrap(), "--out", report_path.to_str().unwrap()]));
    let report: EvalReport = serde_json::from_str(&read(&report_path)).unwrap();
    assert!((0.0..=1.0).contains(&report.map));
    assert_eq!(report.num_images, 4);

    let errs = tmp.path().join("errors.json");
    ok(&ddt(&["analyze-errors", "--ckpt", ck.to_str().unwrap(), "--dataset", val.to_str().unwrap(), "--out", errs.to_str().unwrap()]));
    let a: Value = serde_json::from_str(&read(&errs)).unwrap();
    assert_eq!(a["pr_curves"].as_array().unwrap().len(), 3);
    assert_eq!(a["report"]["confusion"].as_array().unwrap().len(), 4);
    for f in ["errors_confusion.csv", "errors_taxonomy.csv", "errors_pr.svg", "errors_pr.csv"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }

    let unlabeled = out_dir.join("data/target_train.json");
    let out = ddt(&["eval", "--ckpt", ck.to_str().unwrap(), "--dataset", unlabeled.to_str().unwrap(), "--out", report_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg_a = tiny_config_at(&tmp.path().join("a.toml"), &a, "");
    let cfg_b = tiny_config_at(&tmp.path().join("b.toml"), &b, "");
    ok(&ddt(&["train", "--config", cfg_a.to_str().unwrap(), "--mode", "ddt"]));
    ok(&ddt(&["train", "--config", cfg_b.to_str().unwrap(), "--mode", "ddt", "--stop-after", "4"]));
    assert!(!b.join("ddt/summary.json").exists());
    let partial: TrainerStep = serde_json::from_str(&read(&b.join("ddt/trainer.json"))).unwrap();
    assert_eq!(partial.state.step, 4);
    ok(&ddt(&["train", "--config", cfg_b.to_str().unwrap(), "--mode", "ddt"]));
    for f in ["ddt/metrics.jsonl", "ddt/losses.jsonl", "ddt/detector.json", "diffusion_teacher/detector.json", "denoiser.json"] {
        assert!(read(&a.join(f)) == read(&b.join(f)), "{f} differs after resume");
    }
    let s: RunSummary = serde_json::from_str(&read(&b.join("ddt/summary.json"))).unwrap();
    let [before, after] = s.diffusion_teacher_checksum.unwrap();
    assert_eq!(before, after);
}

#[derive(serde::Deserialize)]
struct TrainerStep {
    state: StepOnly,
}

#[derive(serde::Deserialize)]
struct StepOnly {
    step: usize,
}

#[test]
fn ablate_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = tiny_config(tmp.path(), &out_dir, "");
    ok(&ddt(&["ablate", "--config", cfg.to_str().unwrap(), "--param", "sigma", "--values", "0.3,0.7"]));
    let csv = read(&out_dir.join("ablate/sigma.csv"));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("sigma,0.3,ddt,mean_teacher,"));
    let rows: Value = serde_json::from_str(&read(&out_dir.join("ablate/sigma.json"))).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    let out = ddt(&["ablate", "--config", cfg.to_str().unwrap(), "--param", "sigma", "--values", "high"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn a_locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(out_dir.join(".lock"), "1").unwrap();
    let cfg = tiny_config(tmp.path(), &out_dir, "");
    let out = ddt(&["train", "--config", cfg.to_str().unwrap(), "--mode", "baseline"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"error\":\"locked\""));
}
