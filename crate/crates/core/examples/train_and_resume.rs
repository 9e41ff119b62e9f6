//! Train a short online pseudo-label run into a directory, stop it halfway,
//! resume it and check that the metrics match an uninterrupted run.

use std::fs;

use uodlab::synthdata::{build_bundle, DataConfig};
use uodlab::trainer::{run_with_bundle, ExperimentConfig, RunOptions, Scheme, METRICS_FILE};

fn main() -> uodlab::Result<()> {
    let mut data = DataConfig::default();
    data.gen.scene_count = 60;
    let bundle = build_bundle(&data)?;

    let mut config = ExperimentConfig::for_scheme(Scheme::OplPeriodic);
    config.iterations = 60;
    config.eval_interval = 20;
    config.batch_size = 2;

    let tmp = tempfile::tempdir().map_err(|e| uodlab::Error::Invalid(e.to_string()))?;
    let full_dir = tmp.path().join("full");
    let split_dir = tmp.path().join("split");

    let full = run_with_bundle(
        &config,
        &bundle,
        &RunOptions {
            out_dir: Some(full_dir.clone()),
            ..RunOptions::default()
        },
    )?;
    for p in &full.points {
        println!(
            "iter {:>3}: lr {:.5} loss {:.4} mAP {:.4} teacher {:?}",
            p.iteration, p.lr, p.loss.total, p.val.map, p.teacher_version
        );
    }

    let stopped = run_with_bundle(
        &config,
        &bundle,
        &RunOptions {
            out_dir: Some(split_dir.clone()),
            stop_at: Some((1, 40)),
            ..RunOptions::default()
        },
    )?;
    println!("stopped after {} eval points", stopped.points.len());
    run_with_bundle(
        &config,
        &bundle,
        &RunOptions {
            out_dir: Some(split_dir.clone()),
            resume: true,
            ..RunOptions::default()
        },
    )?;

    let a = fs::read(full_dir.join(METRICS_FILE)).map_err(|e| uodlab::Error::Invalid(e.to_string()))?;
    let b = fs::read(split_dir.join(METRICS_FILE)).map_err(|e| uodlab::Error::Invalid(e.to_string()))?;
    println!("resumed metrics identical to uninterrupted run: {}", a == b);
    Ok(())
}
