//! Merge per-dataset category lists into a unified label space and split a
//! taxonomy across datasets with the annotation-masking protocol.

use uodlab::labelspace::{build_unified, project_scores, split_protocol, Side};
use uodlab::rng::SplitMix64;

fn main() -> uodlab::Result<()> {
    let specs = vec![
        ("street".to_string(), vec!["person".to_string(), "car".to_string()]),
        ("indoor".to_string(), vec!["person".to_string(), "chair".to_string(), "tv".to_string()]),
    ];
    let (space, masks) = build_unified(&specs)?;
    println!("unified label space: {:?}", space.names());
    for ((name, _), m) in specs.iter().zip(&masks) {
        println!(
            "{name:>7}: mask {} inside {:?} complement {:?}",
            m.to_bit_string(),
            m.members(),
            m.complement_members()
        );
    }

    let scores = [0.9, 0.2, 0.7, 0.1];
    println!(
        "scores {scores:?} projected inside street: {:?}",
        project_scores(&scores, &masks[0], Side::Inside)?
    );

    let mut rng = SplitMix64::new(7);
    let plan = split_protocol(12, 3, &mut rng)?;
    println!("\nsplit of 12 classes over 3 datasets (shared group {:?})", plan.shared_group());
    for m in plan.masks() {
        println!("  dataset {}: {}", m.dataset_id, m.to_bit_string());
    }
    Ok(())
}
