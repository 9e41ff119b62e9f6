//! Masked classification loss and the positive and negative pseudo-label
//! losses on a hand-built two-proposal example.

use uodlab::geometry::{BoxXYXY, ScoredBox};
use uodlab::labelspace::SubSpaceMask;
use uodlab::losses::{loss_cls, loss_pseudo_neg, loss_pseudo_pos, ClsLossKind};
use uodlab::pseudolabel::PseudoLabelSet;
use uodlab::synthdata::Annotation;
use uodlab::targets::{assign_pseudo_targets, assign_rcn_targets};

fn main() -> uodlab::Result<()> {
    // Classes 0 and 2 are annotated in this dataset; 1 and 3 are not.
    let mask = SubSpaceMask::from_bit_string(0, "1010")?;
    let obj = BoxXYXY::new(0.0, 0.0, 20.0, 20.0)?;
    let other = BoxXYXY::new(30.0, 30.0, 50.0, 50.0)?;
    let proposals = [obj, other];
    let gt = [Annotation { class_id: 0, bbox: obj }];
    let scores = vec![vec![0.8, 0.6, 0.3, 0.1], vec![0.2, 0.7, 0.1, 0.4]];

    let targets = assign_rcn_targets(&proposals, &gt, &mask, 0.5)?;
    let bce = loss_cls(&scores, &targets, ClsLossKind::Bce)?;
    let focal = loss_cls(&scores, &targets, ClsLossKind::Focal { gamma: 2.0 })?;
    println!("masked BCE   {bce:.6} (classes 1 and 3 contribute nothing)");
    println!("masked focal {focal:.6}");

    let teacher_box = ScoredBox::new(other, 1, 0.95)?;
    let unsure = ScoredBox::new(obj, 3, 0.5)?;
    let pseudo = PseudoLabelSet {
        high: vec![teacher_box],
        low: vec![teacher_box, unsure],
    };
    let pt = assign_pseudo_targets(&proposals, &pseudo, &mask);
    for (r, row) in pt.states.iter().enumerate() {
        println!("proposal {r}: states over complement classes {:?} = {row:?}", pt.classes);
    }
    println!("positive pseudo loss {:.6}", loss_pseudo_pos(&scores, &pt)?);
    println!("negative pseudo loss {:.6}", loss_pseudo_neg(&scores, &pt)?);
    Ok(())
}
