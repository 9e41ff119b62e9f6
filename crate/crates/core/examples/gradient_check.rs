//! Verify analytic gradients against central finite differences on a small
//! minibatch, for one loss configuration chosen on the command line:
//! `bce` (default), `focal`, `pseudo` or `mbox`.

use uodlab::geometry::ScoredBox;
use uodlab::losses::ClsLossKind;
use uodlab::model::gradcheck::{check_gradients, GradCheckConfig};
use uodlab::model::{init_params, ArchConfig, BoxMode, GraphConfig, Network, TrainSample};
use uodlab::pseudolabel::PseudoLabelSet;
use uodlab::rng::SplitMix64;
use uodlab::synthdata::{build_bundle, DataConfig};

fn main() -> uodlab::Result<()> {
    let which = std::env::args().nth(1).unwrap_or_else(|| "bce".into());
    let mut data = DataConfig::default();
    data.gen.scene_count = 40;
    let bundle = build_bundle(&data)?;
    let ds = &bundle.train[0];

    let mode = if which == "mbox" { BoxMode::CategorySpecific } else { BoxMode::Shared };
    let arch = ArchConfig::with_classes(bundle.label_space.len(), mode);
    let params = init_params(&arch, 5)?;
    let mut cfg = GraphConfig::default();
    if which == "focal" {
        cfg.cls_loss = ClsLossKind::Focal { gamma: 2.0 };
    }

    let pseudo: Vec<PseudoLabelSet> = ds
        .scenes
        .iter()
        .take(2)
        .map(|s| {
            let c = ds.mask.complement_members()[0];
            let b = s.annotations.first().map(|a| a.bbox);
            let high: Vec<ScoredBox> = b.into_iter().map(|bbox| ScoredBox { bbox, class_id: c, score: 0.9 }).collect();
            PseudoLabelSet { low: high.clone(), high }
        })
        .collect();
    let net = Network::new(&arch, &params)?;
    let mut rng = SplitMix64::new(1);
    let mut plans = Vec::new();
    for (i, s) in ds.scenes.iter().take(2).enumerate() {
        let sample = TrainSample {
            image: &s.image,
            gt: &s.annotations,
            mask: &ds.mask,
            pseudo: (which == "pseudo").then(|| &pseudo[i]),
        };
        plans.push(net.plan(&sample, &cfg, &mut rng)?);
    }

    let check = GradCheckConfig {
        samples_per_layer: 20,
        ..GradCheckConfig::default()
    };
    let report = check_gradients(&arch, &params, &plans, &cfg, &check, &mut rng)?;
    println!("configuration `{which}`: {} entries checked", report.entries.len());
    for l in &report.layers {
        println!("  {:<24} {:>3} samples, max relative error {:.2e}", l.layer, l.checked, l.max_rel_err);
    }
    println!(
        "max relative error {:.2e} (tolerance {:.0e}), {} kink redraws: {}",
        report.max_rel_err(),
        check.tolerance,
        report.kink_redraws,
        if report.passed(check.tolerance) { "pass" } else { "FAIL" }
    );
    Ok(())
}
