//! Dual-threshold pseudo-label filtering, per-class F-beta threshold search
//! and mapping pseudo boxes into a flipped view.

use uodlab::geometry::{BoxXYXY, ScoredBox};
use uodlab::labelspace::SubSpaceMask;
use uodlab::pseudolabel::{fbeta_thresholds, filter_dual, transform_pseudo, CalibConfig, PerClassThresholds};
use uodlab::synthdata::{AugmentationRecord, Annotation};

fn main() -> uodlab::Result<()> {
    let b = |x: f64| BoxXYXY::new(x, 4.0, x + 12.0, 16.0);
    let gt = vec![vec![
        Annotation { class_id: 1, bbox: b(0.0)? },
        Annotation { class_id: 1, bbox: b(20.0)? },
        Annotation { class_id: 2, bbox: b(40.0)? },
    ]];
    let dets = vec![vec![
        ScoredBox::new(b(0.0)?, 1, 0.92)?,
        ScoredBox::new(b(20.0)?, 1, 0.55)?,
        ScoredBox::new(b(44.0)?, 1, 0.50)?,
        ScoredBox::new(b(40.0)?, 2, 0.35)?,
        ScoredBox::new(b(0.0)?, 0, 0.80)?,
    ]];
    let config = CalibConfig::default();
    let high = fbeta_thresholds(&dets, &gt, 3, &config)?;
    // Class 0 is annotated in this dataset, so its detection is dropped.
    println!("F-beta (beta = {}) thresholds per class: {high:?}", config.beta);

    let thresholds = PerClassThresholds {
        high,
        ..PerClassThresholds::uniform(3, 0.9, config.low_threshold)?
    };
    let mask = SubSpaceMask::from_bit_string(0, "100")?;
    let set = filter_dual(&dets[0], &thresholds, &mask);
    println!("high tier: {:?}", set.high.iter().map(|d| (d.class_id, d.score)).collect::<Vec<_>>());
    println!("low tier:  {:?}", set.low.iter().map(|d| (d.class_id, d.score)).collect::<Vec<_>>());

    let record = AugmentationRecord {
        flip: true,
        ..AugmentationRecord::identity(64.0)
    };
    let flipped = transform_pseudo(&set, &record);
    println!("first high box {:?} -> flipped {:?}", set.high[0].bbox.to_array(), flipped.high[0].bbox.to_array());
    Ok(())
}
