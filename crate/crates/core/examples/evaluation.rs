//! COCO-style mAP, RPN recall and PMCR on hand-made detections.

use uodlab::eval::{evaluate_detections, pmcr_from_scores, recall_from_proposals};
use uodlab::geometry::{BoxXYXY, ScoredBox};
use uodlab::synthdata::Annotation;

fn main() -> uodlab::Result<()> {
    let b = |x: f64, w: f64| BoxXYXY::new(x, 0.0, x + w, w);
    let gt = vec![
        vec![
            Annotation { class_id: 0, bbox: b(0.0, 10.0)? },
            Annotation { class_id: 1, bbox: b(20.0, 10.0)? },
        ],
        vec![Annotation { class_id: 0, bbox: b(5.0, 12.0)? }],
    ];
    let dets = vec![
        vec![
            ScoredBox::new(b(0.0, 10.0)?, 0, 0.9)?,
            ScoredBox::new(b(21.0, 10.0)?, 1, 0.8)?,
            ScoredBox::new(b(40.0, 10.0)?, 0, 0.7)?,
        ],
        vec![ScoredBox::new(b(6.0, 12.0)?, 0, 0.6)?],
    ];
    let report = evaluate_detections(&dets, &gt, 2)?;
    println!("mAP {:.4}  AP50 {:.4}  AP75 {:.4}", report.map, report.ap50, report.ap75);
    println!("per-class AP {:?}", report.per_class_ap);

    let proposals: Vec<Vec<BoxXYXY>> = dets.iter().map(|d| d.iter().map(|s| s.bbox).collect()).collect();
    let recall = recall_from_proposals(&proposals, &gt, 2);
    println!("RPN recall at IoU {}: {:.4}", recall.iou_threshold, recall.recall);

    let scores = vec![vec![vec![0.9, 0.7], vec![0.8, 0.1], vec![0.3, 0.2]]];
    let pmcr = pmcr_from_scores(&scores, &[0.25, 0.5, 0.75]);
    print!("{}", pmcr.to_csv());
    Ok(())
}
