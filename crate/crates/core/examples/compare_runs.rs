//! Train two tiny schemes on the same data over two seeds and build the
//! comparison report that `uodlab compare` writes.

use uodlab::cli::compare_runs;
use uodlab::synthdata::{build_bundle, DataConfig};
use uodlab::trainer::{run_with_bundle, ExperimentConfig, RunOptions, Scheme};

fn main() -> uodlab::Result<()> {
    let mut data = DataConfig::default();
    data.gen.scene_count = 60;
    let bundle = build_bundle(&data)?;
    let tmp = tempfile::tempdir().map_err(|e| uodlab::Error::Invalid(e.to_string()))?;

    let mut dirs = Vec::new();
    for scheme in [Scheme::Baseline, Scheme::OplPeriodic] {
        for seed in 0..2 {
            let mut c = ExperimentConfig::for_scheme(scheme);
            c.iterations = 30;
            c.eval_interval = 10;
            c.batch_size = 2;
            c.seed = seed;
            let dir = tmp.path().join(format!("{}-{seed}", scheme.name()));
            run_with_bundle(
                &c,
                &bundle,
                &RunOptions {
                    out_dir: Some(dir.clone()),
                    ..RunOptions::default()
                },
            )?;
            dirs.push(dir);
        }
    }
    dirs.push(tmp.path().join("missing-run"));

    let report = compare_runs(&dirs)?;
    println!("{}", report.markdown());
    print!("{}", report.summary_csv());
    Ok(())
}
