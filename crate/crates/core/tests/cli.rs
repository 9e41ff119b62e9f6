use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};
use uodlab::synthdata::DataConfig;
use uodlab::trainer::{ExperimentConfig, Scheme, CHECKPOINT_DIR, FINAL_CHECKPOINT, METRICS_FILE, RUN_FILE};

fn uodlab(args: &[&dyn AsRef<std::ffi::OsStr>]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_uodlab"))
        .arg("-q")
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("spawn uodlab");
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(path: &Path, v: &impl serde::Serialize) -> PathBuf {
    fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn small_data(seed: u64) -> DataConfig {
    let mut d = DataConfig::default();
    d.gen.scene_count = 40;
    d.gen.seed = seed;
    d
}

fn train_config(data: &Path, scheme: Scheme, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_scheme(scheme);
    c.iterations = 12;
    c.eval_interval = 6;
    c.batch_size = 2;
    c.seed = seed;
    c.dataset_dir = Some(data.to_path_buf());
    c
}

fn entries(dir: &Path) -> usize {
    fs::read_dir(dir).map(|d| d.count()).unwrap_or(0)
}

#[test]
fn full_pipeline_from_generation_to_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let gen_cfg = write(&t.join("gen.json"), &small_data(0));
    let data = t.join("data");
    let (code, err) = uodlab(&[&"gen", &"--config", &gen_cfg, &"--out", &data]);
    assert_eq!(code, 0, "{err}");

    let mut runs = Vec::new();
    for (scheme, seed) in [(Scheme::Baseline, 0), (Scheme::Baseline, 1), (Scheme::OplPeriodic, 0)] {
        let cfg = write(
            &t.join(format!("{}-{seed}.json", scheme.name())),
            &train_config(&data, scheme, 0),
        );
        let run = t.join(format!("run-{}-{seed}", scheme.name()));
        let (code, err) = uodlab(&[&"train", &"--config", &cfg, &"--out", &run, &"--seed", &seed.to_string()]);
        assert_eq!(code, 0, "{err}");
        assert!(run.join(METRICS_FILE).is_file());
        let meta: Value = serde_json::from_slice(&fs::read(run.join(RUN_FILE)).unwrap()).unwrap();
        assert_eq!(meta["config"]["seed"], json!(seed));
        assert_eq!(meta["completed"], json!(true));
        runs.push(run);
    }

    let eval_cfg = write(
        &t.join("eval.json"),
        &json!({
            "checkpoint": runs[0].join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT),
            "dataset_dir": data,
        }),
    );
    let eval_out = t.join("eval");
    let (code, err) = uodlab(&[&"eval", &"--config", &eval_cfg, &"--out", &eval_out]);
    assert_eq!(code, 0, "{err}");
    let report: Value = serde_json::from_slice(&fs::read(eval_out.join("eval.json")).unwrap()).unwrap();
    let map = report["map"].as_f64().unwrap();
    let last = fs::read_to_string(runs[0].join(METRICS_FILE)).unwrap();
    let last: Value = serde_json::from_str(last.lines().last().unwrap()).unwrap();
    assert_eq!(map, last["val"]["map"].as_f64().unwrap());
    assert!(eval_out.join("eval.csv").is_file());

    let pmcr_out = t.join("pmcr");
    let (code, err) = uodlab(&[&"pmcr", &"--config", &eval_cfg, &"--out", &pmcr_out]);
    assert_eq!(code, 0, "{err}");
    assert!(pmcr_out.join("pmcr.json").is_file() && pmcr_out.join("pmcr.csv").is_file());

    let cmp = t.join("compare");
    let missing = t.join("no-such-run");
    let (code, err) = uodlab(&[&"compare", &runs[0], &runs[1], &runs[2], &missing, &"--out", &cmp]);
    assert_eq!(code, 0, "{err}");
    let summary = fs::read_to_string(cmp.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "{summary}");
    for f in ["report.md", "curves.csv", "curves.svg", "trends.json"] {
        assert!(cmp.join(f).is_file(), "{f}");
    }
    let report = fs::read_to_string(cmp.join("report.md")).unwrap();
    assert!(report.contains("no-such-run"));

    let again = t.join("compare-again");
    let (code, _) = uodlab(&[&"compare", &runs[2], &runs[0], &runs[1], &"--out", &again]);
    assert_eq!(code, 0);
    assert_eq!(
        fs::read(cmp.join("summary.csv")).unwrap(),
        fs::read(again.join("summary.csv")).unwrap()
    );

    let other_gen = write(&t.join("gen2.json"), &small_data(9));
    let other_data = t.join("data2");
    assert_eq!(uodlab(&[&"gen", &"--config", &other_gen, &"--out", &other_data]).0, 0);
    let other_cfg = write(&t.join("other.json"), &train_config(&other_data, Scheme::Baseline, 0));
    let other_run = t.join("run-other");
    assert_eq!(uodlab(&[&"train", &"--config", &other_cfg, &"--out", &other_run]).0, 0);
    let refused = t.join("refused");
    let (code, err) = uodlab(&[&"compare", &runs[0], &other_run, &"--out", &refused]);
    assert_eq!(code, 1, "{err}");
    assert!(!refused.exists());
}

#[test]
fn configuration_problems_exit_two_without_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let out = t.join("out");

    assert_eq!(uodlab(&[&"train", &"--bogus"]).0, 2);
    assert_eq!(uodlab(&[&"frobnicate"]).0, 2);

    let unknown = write(&t.join("unknown.json"), &json!({"gen": {"scene_count": 10, "sparkle": 1}}));
    assert_eq!(uodlab(&[&"gen", &"--config", &unknown, &"--out", &out]).0, 2);

    fs::write(t.join("broken.json"), b"{ not json").unwrap();
    let broken = t.join("broken.json");
    assert_eq!(uodlab(&[&"train", &"--config", &broken, &"--out", &out]).0, 2);

    let no_data = write(&t.join("nodata.json"), &train_config(&t.join("absent"), Scheme::Baseline, 0));
    assert_eq!(uodlab(&[&"train", &"--config", &no_data, &"--out", &out]).0, 2);

    let mut bad_lr = train_config(t, Scheme::OplPeriodic, 0);
    bad_lr.lr = Some(uodlab::schedule::LrConfig::step(0.01, vec![6]));
    let bad_lr = write(&t.join("badlr.json"), &bad_lr);
    assert_eq!(uodlab(&[&"train", &"--config", &bad_lr, &"--out", &out]).0, 2);

    let eval_cfg = write(&t.join("eval.json"), &json!({"checkpoint": t.join("none.uodl"), "dataset_dir": t}));
    assert_eq!(uodlab(&[&"eval", &"--config", &eval_cfg, &"--out", &out]).0, 2);
    assert_eq!(uodlab(&[&"pmcr", &"--config", &eval_cfg, &"--out", &out]).0, 2);

    assert!(!out.exists());
    assert_eq!(entries(t), 5);
}

#[test]
fn runtime_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let gen_cfg = write(&t.join("gen.json"), &small_data(0));
    let data = t.join("data");
    assert_eq!(uodlab(&[&"gen", &"--config", &gen_cfg, &"--out", &data]).0, 0);
    let bogus = t.join("bogus.uodl");
    fs::write(&bogus, b"definitely not a checkpoint").unwrap();
    let arch = uodlab::model::ArchConfig::with_classes(12, uodlab::model::BoxMode::Shared);
    let eval_cfg = write(
        &t.join("eval.json"),
        &json!({"checkpoint": bogus, "dataset_dir": data, "arch": arch}),
    );
    let (code, err) = uodlab(&[&"eval", &"--config", &eval_cfg, &"--out", &t.join("e")]);
    assert_eq!(code, 1, "{err}");

    let cmp = t.join("cmp");
    assert_eq!(uodlab(&[&"compare", &t.join("nothing-here"), &"--out", &cmp]).0, 1);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(uodlab(&[&"--help"]).0, 0);
    assert_eq!(uodlab(&[&"--version"]).0, 0);
    assert_eq!(uodlab(&[&"train", &"--help"]).0, 0);
}
