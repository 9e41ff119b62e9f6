//! Build the two-stage cascade detector, run an eval-phase forward pass on
//! one synthetic scene and print its proposals and detections.

use uodlab::model::{init_params, ArchConfig, BoxMode, DetectConfig, Network, Phase};
use uodlab::synthdata::{generate_dataset, GenConfig};

fn main() -> uodlab::Result<()> {
    let gen = GenConfig {
        scene_count: 1,
        seed: 11,
        ..GenConfig::default()
    };
    let scene = generate_dataset(&gen)?.scenes.remove(0);
    let arch = ArchConfig::with_classes(12, BoxMode::CategorySpecific);
    let params = init_params(&arch, 0)?;
    println!(
        "{} parameter tensors, {} values",
        params.tensors.len(),
        params.tensors.iter().map(|t| t.len()).sum::<usize>()
    );

    let net = Network::new(&arch, &params)?;
    let out = net.forward(std::slice::from_ref(&scene.image), Phase::Eval, 0, &[])?;
    let o = &out[0];
    println!("{} post-NMS proposals, {} cascade stages", o.proposals.len(), o.stages.len());
    let dets = o.detections(&net, &DetectConfig::default());
    println!("{} detections from an untrained model; first three:", dets.len());
    for d in dets.iter().take(3) {
        println!("  class {:>2} score {:.3} box {:?}", d.class_id, d.score, d.bbox.to_array());
    }
    println!("ground truth: {} boxes", scene.annotations.len());
    Ok(())
}
