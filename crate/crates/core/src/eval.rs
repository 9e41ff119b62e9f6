//! Detection mAP, RPN recall and the proposal multiple-class ratio.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY, ScoredBox};
use crate::model::{ArchConfig, DetectConfig, ModelParameters, Network, Phase};
use crate::synthdata::{Annotation, SceneDataset};
use crate::util::write_atomic;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over classes with ground truth, then over IoU thresholds.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// IoU-averaged AP per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub num_images: usize,
    pub num_detections: usize,
    pub num_ground_truth: usize,
}

/// Greedy score-descending matching: each detection takes the unmatched
/// ground truth of highest IoU, if that IoU reaches `thr`.
fn match_greedy(dets: &[BoxXYXY], gts: &[BoxXYXY], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if !used[g] {
                    let v = iou(d, gt);
                    if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((g, v));
                    }
                }
            }
            best.map(|(g, _)| used[g] = true).is_some()
        })
        .collect()
}

/// 101-point interpolated AP from TP flags in descending-score order.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let at = recall.partition_point(|&v| v < level);
        if at < precision.len() {
            sum += precision[at];
        }
    }
    sum / 101.0
}

/// AP of one class at one IoU threshold over a set of images.
pub fn class_ap(detections: &[Vec<ScoredBox>], ground_truth: &[Vec<Annotation>], class_id: usize, thr: f64) -> Option<f64> {
    let mut entries: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for (dets, gts) in detections.iter().zip(ground_truth) {
        let g: Vec<BoxXYXY> = gts.iter().filter(|a| a.class_id == class_id).map(|a| a.bbox).collect();
        num_gt += g.len();
        let mut d: Vec<&ScoredBox> = dets.iter().filter(|x| x.class_id == class_id).collect();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        let boxes: Vec<BoxXYXY> = d.iter().map(|x| x.bbox).collect();
        let flags = match_greedy(&boxes, &g, thr);
        entries.extend(d.iter().map(|x| x.score).zip(flags));
    }
    if num_gt == 0 {
        return None;
    }
    // stable: equal scores keep image order
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let tp: Vec<bool> = entries.iter().map(|e| e.1).collect();
    Some(interpolated_ap(&tp, num_gt))
}

/// mAP report from per-image detections and full-label ground truth.
pub fn evaluate_detections(
    detections: &[Vec<ScoredBox>],
    ground_truth: &[Vec<Annotation>],
    num_classes: usize,
) -> Result<EvalReport> {
    if detections.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if detections.len() != ground_truth.len() {
        return Err(Error::LengthMismatch {
            expected: ground_truth.len(),
            actual: detections.len(),
        });
    }
    let thresholds = coco_iou_thresholds();
    let mut per_class_ap = Vec::with_capacity(num_classes);
    let mut by_thr = vec![Vec::new(); thresholds.len()];
    for c in 0..num_classes {
        let aps: Vec<Option<f64>> = thresholds
            .iter()
            .map(|&t| class_ap(detections, ground_truth, c, t))
            .collect();
        if aps[0].is_none() {
            per_class_ap.push(None);
            continue;
        }
        let aps: Vec<f64> = aps.into_iter().map(|a| a.unwrap_or(0.0)).collect();
        for (slot, &a) in by_thr.iter_mut().zip(&aps) {
            slot.push(a);
        }
        per_class_ap.push(Some(aps.iter().sum::<f64>() / aps.len() as f64));
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let per_thr: Vec<f64> = by_thr.iter().map(|v| mean(v)).collect();
    Ok(EvalReport {
        map: mean(&per_thr),
        ap50: per_thr[0],
        ap75: per_thr[5],
        per_class_ap,
        num_images: detections.len(),
        num_detections: detections.iter().map(Vec::len).sum(),
        num_ground_truth: ground_truth.iter().map(Vec::len).sum(),
    })
}

fn val_ground_truth(val: &SceneDataset) -> Vec<Vec<Annotation>> {
    val.scenes
        .iter()
        .map(|s| {
            s.annotations
                .iter()
                .filter(|a| val.mask.contains(a.class_id))
                .copied()
                .collect()
        })
        .collect()
}

/// Eval-phase inference over `val` followed by [`evaluate_detections`].
pub fn eval_map(arch: &ArchConfig, params: &ModelParameters, val: &SceneDataset) -> Result<EvalReport> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let net = Network::new(arch, params)?;
    let cfg = DetectConfig::default();
    let dets = val
        .scenes
        .iter()
        .map(|s| net.detect(&s.image, &cfg))
        .collect::<Result<Vec<_>>>()?;
    evaluate_detections(&dets, &val_ground_truth(val), arch.num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: f64,
    pub per_class: Vec<Option<f64>>,
    pub covered: usize,
    pub num_ground_truth: usize,
    pub iou_threshold: f64,
}

pub const RECALL_IOU: f64 = 0.5;

/// Fraction of ground-truth boxes hit by at least one proposal at IoU >= 0.5.
pub fn recall_from_proposals(
    proposals: &[Vec<BoxXYXY>],
    ground_truth: &[Vec<Annotation>],
    num_classes: usize,
) -> RecallReport {
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (props, gts) in proposals.iter().zip(ground_truth) {
        for a in gts {
            total[a.class_id] += 1;
            if props.iter().any(|p| iou(p, &a.bbox) >= RECALL_IOU) {
                hit[a.class_id] += 1;
            }
        }
    }
    let covered: usize = hit.iter().sum();
    let n: usize = total.iter().sum();
    RecallReport {
        recall: if n == 0 { 0.0 } else { covered as f64 / n as f64 },
        per_class: hit
            .iter()
            .zip(&total)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        covered,
        num_ground_truth: n,
        iou_threshold: RECALL_IOU,
    }
}

/// RPN recall of the top `proposal_cap` post-NMS proposals (all when `None`).
pub fn rpn_recall(
    arch: &ArchConfig,
    params: &ModelParameters,
    val: &SceneDataset,
    proposal_cap: Option<usize>,
) -> Result<RecallReport> {
    let net = Network::new(arch, params)?;
    let mut props = Vec::with_capacity(val.len());
    for s in &val.scenes {
        let out = net.forward(std::slice::from_ref(&s.image), Phase::Eval, 0, &[])?;
        let mut p = out.into_iter().next().expect("one image").proposals;
        if let Some(cap) = proposal_cap {
            p.truncate(cap);
        }
        props.push(p);
    }
    Ok(recall_from_proposals(&props, &val_ground_truth(val), arch.num_classes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmcrPoint {
    pub threshold: f64,
    pub sum_p1: usize,
    pub sum_p2: usize,
    /// `None` when no proposal fires at this threshold.
    pub pmcr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmcrReport {
    pub points: Vec<PmcrPoint>,
    pub num_images: usize,
    pub num_proposals: usize,
}

impl PmcrReport {
    pub fn at(&self, threshold: f64) -> Option<&PmcrPoint> {
        self.points.iter().find(|p| (p.threshold - threshold).abs() < 1e-12)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,sum_p1,sum_p2,pmcr\n");
        for p in &self.points {
            let v = p.pmcr.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", p.threshold, p.sum_p1, p.sum_p2, v);
        }
        s
    }
}

pub fn default_pmcr_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

/// PMCR from per-image, per-proposal class score vectors.
///
/// A proposal counts toward P1 when its largest score exceeds `t` and
/// toward P2 when its second largest does.
pub fn pmcr_from_scores(scores: &[Vec<Vec<f64>>], grid: &[f64]) -> PmcrReport {
    let mut top2: Vec<(f64, f64)> = Vec::new();
    for img in scores {
        for row in img {
            let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &v in row {
                if v > a {
                    b = a;
                    a = v;
                } else if v > b {
                    b = v;
                }
            }
            top2.push((a, b));
        }
    }
    let points = grid
        .iter()
        .map(|&t| {
            let p1 = top2.iter().filter(|x| x.0 > t).count();
            let p2 = top2.iter().filter(|x| x.1 > t).count();
            PmcrPoint {
                threshold: t,
                sum_p1: p1,
                sum_p2: p2,
                pmcr: (p1 > 0).then(|| p2 as f64 / p1 as f64),
            }
        })
        .collect();
    PmcrReport {
        points,
        num_images: scores.len(),
        num_proposals: top2.len(),
    }
}

/// PMCR of the final-stage scores of every post-NMS proposal over `val`.
pub fn pmcr(arch: &ArchConfig, params: &ModelParameters, val: &SceneDataset, grid: &[f64]) -> Result<PmcrReport> {
    let net = Network::new(arch, params)?;
    let mut scores = Vec::with_capacity(val.len());
    for s in &val.scenes {
        let out = net.forward(std::slice::from_ref(&s.image), Phase::Eval, 0, &[])?;
        scores.push(out[0].final_stage().scores.clone());
    }
    Ok(pmcr_from_scores(&scores, grid))
}

/// mAP, RPN recall and PMCR of one model, sharing a single eval-phase
/// forward pass per validation image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub detection: EvalReport,
    pub recall: RecallReport,
    pub pmcr: PmcrReport,
}

pub fn evaluate_model(
    arch: &ArchConfig,
    params: &ModelParameters,
    val: &SceneDataset,
    pmcr_grid: &[f64],
) -> Result<ModelEvaluation> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let net = Network::new(arch, params)?;
    let cfg = DetectConfig::default();
    let mut dets = Vec::with_capacity(val.len());
    let mut props = Vec::with_capacity(val.len());
    let mut scores = Vec::with_capacity(val.len());
    for s in &val.scenes {
        let out = net.forward(std::slice::from_ref(&s.image), Phase::Eval, 0, &[])?;
        let o = &out[0];
        dets.push(o.detections(&net, &cfg));
        scores.push(o.final_stage().scores.clone());
        props.push(o.proposals.clone());
    }
    let gt = val_ground_truth(val);
    Ok(ModelEvaluation {
        detection: evaluate_detections(&dets, &gt, arch.num_classes)?,
        recall: recall_from_proposals(&props, &gt, arch.num_classes),
        pmcr: pmcr_from_scores(&scores, pmcr_grid),
    })
}

pub fn write_pmcr_csv(path: &Path, report: &PmcrReport) -> Result<()> {
    write_atomic(path, report.to_csv().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
        BoxXYXY::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn perfect_and_empty() {
        let gt = vec![vec![Annotation { class_id: 0, bbox: b(0., 0., 10., 10.) }]];
        let d = vec![vec![ScoredBox::new(b(0., 0., 10., 10.), 0, 0.7).unwrap()]];
        let r = evaluate_detections(&d, &gt, 2).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class_ap, vec![Some(1.0), None]);
        let r = evaluate_detections(&[vec![]], &gt, 2).unwrap();
        assert_eq!(r.map, 0.0);
        assert!(evaluate_detections(&[], &[], 2).is_err());
    }

    #[test]
    fn half_recall_ap() {
        let gt = vec![vec![
            Annotation { class_id: 0, bbox: b(0., 0., 10., 10.) },
            Annotation { class_id: 0, bbox: b(20., 20., 30., 30.) },
        ]];
        let d = vec![vec![ScoredBox::new(b(0., 0., 10., 10.), 0, 0.7).unwrap()]];
        let r = evaluate_detections(&d, &gt, 1).unwrap();
        // recall levels 0.00..0.50 have precision 1
        assert!((r.map - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn recall_examples() {
        let gt = vec![vec![
            Annotation { class_id: 0, bbox: b(0., 0., 10., 10.) },
            Annotation { class_id: 1, bbox: b(20., 20., 30., 30.) },
        ]];
        let r = recall_from_proposals(&[vec![b(0., 0., 10., 10.)]], &gt, 2);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.0)]);
        let r = recall_from_proposals(&[vec![]], &gt, 2);
        assert_eq!(r.recall, 0.0);
        let r = recall_from_proposals(&[vec![b(0., 0., 10., 10.), b(20., 20., 30., 30.)]], &gt, 2);
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn pmcr_examples() {
        // image A: 10 firing proposals, 4 of them firing twice; image B: none
        let mut a = vec![vec![0.9, 0.1, 0.1]; 6];
        a.extend(vec![vec![0.9, 0.8, 0.1]; 4]);
        a.push(vec![0.1, 0.2, 0.3]);
        let bimg = vec![vec![0.1, 0.1, 0.1]; 3];
        let r = pmcr_from_scores(&[a, bimg], &[0.5]);
        assert_eq!((r.points[0].sum_p1, r.points[0].sum_p2), (10, 4));
        assert_eq!(r.points[0].pmcr, Some(0.4));
        let single = pmcr_from_scores(&[vec![vec![0.9, 0.1]; 3]], &[0.5, 0.95]);
        assert_eq!(single.points[0].pmcr, Some(0.0));
        assert_eq!(single.points[1].pmcr, None);
        assert!(single.to_csv().ends_with("0.95,0,0,\n"));
    }

    #[test]
    fn ap_invariant_to_monotone_score_transform() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..50 {
            let gt: Vec<Vec<Annotation>> = (0..3)
                .map(|_| {
                    (0..3)
                        .map(|_| {
                            let x = rng.uniform(0., 40.);
                            let y = rng.uniform(0., 40.);
                            Annotation { class_id: (rng.next() % 2) as usize, bbox: b(x, y, x + 12., y + 12.) }
                        })
                        .collect()
                })
                .collect();
            let dets: Vec<Vec<ScoredBox>> = gt
                .iter()
                .map(|g| {
                    g.iter()
                        .map(|a| {
                            let j = rng.uniform(-4., 4.);
                            let bb = b(a.bbox.x1() + j, a.bbox.y1(), a.bbox.x2() + j, a.bbox.y2());
                            ScoredBox::new(bb, a.class_id, rng.uniform(0.05, 0.95)).unwrap()
                        })
                        .collect()
                })
                .collect();
            let squashed: Vec<Vec<ScoredBox>> = dets
                .iter()
                .map(|v| v.iter().map(|d| ScoredBox { score: d.score * d.score * 0.5, ..*d }).collect())
                .collect();
            let a = evaluate_detections(&dets, &gt, 2).unwrap();
            let c = evaluate_detections(&squashed, &gt, 2).unwrap();
            assert_eq!(a.map, c.map);
        }
    }
}
