//! Generate the synthetic nested-category benchmark, write it to disk and
//! read it back with an identical fingerprint.

use uodlab::synthdata::{
    build_bundle, bundle_fingerprint, read_dataset_dir, write_dataset_dir, DataConfig, NESTED_PAIRS, TAXONOMY,
};

fn main() -> uodlab::Result<()> {
    let mut config = DataConfig::default();
    config.gen.scene_count = 80;
    config.gen.seed = 3;
    let bundle = build_bundle(&config)?;

    println!("taxonomy: {TAXONOMY:?}");
    for (child, parent) in NESTED_PAIRS {
        println!("  {} lies inside {}", TAXONOMY[child], TAXONOMY[parent]);
    }
    for ds in bundle.train.iter().chain([&bundle.val, &bundle.calib]) {
        let boxes: usize = ds.scenes.iter().map(|s| s.annotations.len()).sum();
        println!("{:>8}: {:>3} scenes, {:>3} boxes, mask {}", ds.name, ds.len(), boxes, ds.mask.to_bit_string());
    }

    let dir = tempfile::tempdir().map_err(|e| uodlab::Error::Invalid(e.to_string()))?;
    let manifest = write_dataset_dir(dir.path(), &bundle)?;
    let back = read_dataset_dir(dir.path())?;
    println!("\nwrote {} datasets to {}", manifest.datasets.len(), dir.path().display());
    println!("fingerprint in memory: {}", bundle_fingerprint(&bundle));
    println!("fingerprint on disk:   {}", bundle_fingerprint(&back));
    Ok(())
}
