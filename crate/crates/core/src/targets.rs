//! Target assignment for the RPN, the RCN stages and pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCoder, BoxXYXY};
use crate::labelspace::SubSpaceMask;
use crate::pseudolabel::PseudoLabelSet;
use crate::rng::SplitMix64;
use crate::synthdata::Annotation;

pub const RPN_POSITIVE_IOU: f64 = 0.7;
pub const RPN_NEGATIVE_IOU: f64 = 0.3;
pub const PSEUDO_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpnMode {
    Standard,
    PseudoRpn,
}

/// Per-anchor objectness labels and regression targets for positives.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargetMap {
    pub labels: Vec<AnchorLabel>,
    pub deltas: Vec<Option<[f64; 4]>>,
}

impl RpnTargetMap {
    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

fn best_match(b: &BoxXYXY, targets: &[BoxXYXY]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in targets.iter().enumerate() {
        let v = iou(b, t);
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best
}

/// Label anchors against ground truth and, in `PseudoRpn` mode, pseudo boxes.
///
/// Standard: IoU >= 0.7 with any GT, or the best anchor for a GT, is
/// positive; IoU <= 0.3 with every GT is negative; the rest is ignored.
/// Pseudo mode additionally makes anchors with IoU >= 0.7 to a high-tier
/// pseudo box positive and moves anchors with IoU >= 0.3 to any low-tier
/// box out of the negative pool.
pub fn assign_rpn_targets(
    anchors: &[BoxXYXY],
    gt: &[BoxXYXY],
    pseudo: Option<&PseudoLabelSet>,
    mode: RpnMode,
    coder: &BoxCoder,
) -> RpnTargetMap {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched: Vec<Option<BoxXYXY>> = vec![None; n];

    let mut best_for_gt = vec![0.0f64; gt.len()];
    for a in anchors {
        for (g, t) in gt.iter().enumerate() {
            best_for_gt[g] = best_for_gt[g].max(iou(a, t));
        }
    }
    for (i, a) in anchors.iter().enumerate() {
        if let Some((g, v)) = best_match(a, gt) {
            if v >= RPN_POSITIVE_IOU {
                labels[i] = AnchorLabel::Positive;
                matched[i] = Some(gt[g]);
                continue;
            }
            // lowest-quality match: the best anchor of some GT
            let owner = gt
                .iter()
                .enumerate()
                .find(|&(k, t)| best_for_gt[k] > 0.0 && iou(a, t) == best_for_gt[k]);
            if let Some((_, t)) = owner {
                labels[i] = AnchorLabel::Positive;
                matched[i] = Some(*t);
                continue;
            }
            if v > RPN_NEGATIVE_IOU {
                labels[i] = AnchorLabel::Ignore;
            }
        }
    }

    if let (RpnMode::PseudoRpn, Some(ps)) = (mode, pseudo) {
        let high: Vec<BoxXYXY> = ps.high.iter().map(|d| d.bbox).collect();
        let low: Vec<BoxXYXY> = ps.low.iter().map(|d| d.bbox).collect();
        for (i, a) in anchors.iter().enumerate() {
            if labels[i] == AnchorLabel::Positive {
                continue;
            }
            if let Some((h, v)) = best_match(a, &high) {
                if v >= RPN_POSITIVE_IOU {
                    labels[i] = AnchorLabel::Positive;
                    matched[i] = Some(high[h]);
                    continue;
                }
            }
            if let Some((_, v)) = best_match(a, &low) {
                if v >= RPN_NEGATIVE_IOU {
                    labels[i] = AnchorLabel::Ignore;
                }
            }
        }
    }

    let deltas = anchors
        .iter()
        .zip(&matched)
        .zip(&labels)
        .map(|((a, m), l)| match (l, m) {
            (AnchorLabel::Positive, Some(t)) => Some(coder.encode(a, t)),
            _ => None,
        })
        .collect();
    RpnTargetMap { labels, deltas }
}

/// Per-proposal classification target inside the dataset's subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct RcnTargetMap {
    /// `Some(class)` for positives, `None` for background.
    pub classes: Vec<Option<usize>>,
    pub matched: Vec<Option<BoxXYXY>>,
    pub mask: SubSpaceMask,
}

impl RcnTargetMap {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// `q_c(r)`: 1 for the target class, 0 for other classes inside the
    /// subspace, `None` outside it.
    pub fn target(&self, r: usize, c: usize) -> Option<f64> {
        if !self.mask.contains(c) {
            return None;
        }
        Some(if self.classes[r] == Some(c) { 1.0 } else { 0.0 })
    }

    pub fn select(&self, keep: &[usize]) -> RcnTargetMap {
        RcnTargetMap {
            classes: keep.iter().map(|&i| self.classes[i]).collect(),
            matched: keep.iter().map(|&i| self.matched[i]).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// Match each proposal to its best-IoU ground truth; positive when the IoU
/// reaches `stage_iou`.
pub fn assign_rcn_targets(
    proposals: &[BoxXYXY],
    gt: &[Annotation],
    mask: &SubSpaceMask,
    stage_iou: f64,
) -> Result<RcnTargetMap> {
    if let Some(a) = gt.iter().find(|a| !mask.contains(a.class_id)) {
        return Err(Error::Invalid(format!(
            "ground-truth class {} outside the dataset subspace",
            a.class_id
        )));
    }
    let boxes: Vec<BoxXYXY> = gt.iter().map(|a| a.bbox).collect();
    let mut classes = Vec::with_capacity(proposals.len());
    let mut matched = Vec::with_capacity(proposals.len());
    for p in proposals {
        match best_match(p, &boxes) {
            Some((g, v)) if v >= stage_iou => {
                classes.push(Some(gt[g].class_id));
                matched.push(Some(boxes[g]));
            }
            _ => {
                classes.push(None);
                matched.push(None);
            }
        }
    }
    Ok(RcnTargetMap {
        classes,
        matched,
        mask: mask.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoState {
    Positive,
    Negative,
    Ignore,
}

/// Three-state pseudo targets per (proposal, complement class).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTargetMap {
    /// Complement class ids, ascending; columns of `states`.
    pub classes: Vec<usize>,
    pub states: Vec<Vec<PseudoState>>,
    /// Matched high-tier box per (proposal, column) for optional box supervision.
    pub boxes: Vec<Vec<Option<BoxXYXY>>>,
}

impl PseudoTargetMap {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, r: usize, class_id: usize) -> Option<PseudoState> {
        let col = self.classes.iter().position(|&c| c == class_id)?;
        Some(self.states[r][col])
    }

    pub fn has_positive(&self, r: usize) -> bool {
        self.states[r].contains(&PseudoState::Positive)
    }

    pub fn select(&self, keep: &[usize]) -> PseudoTargetMap {
        PseudoTargetMap {
            classes: self.classes.clone(),
            states: keep.iter().map(|&i| self.states[i].clone()).collect(),
            boxes: keep.iter().map(|&i| self.boxes[i].clone()).collect(),
        }
    }
}

/// Per (proposal, class outside `mask`): matched (IoU >= 0.5) to a
/// high-tier box of that class is positive, else matched to a low-tier box
/// is ignored, else negative.
pub fn assign_pseudo_targets(
    proposals: &[BoxXYXY],
    pseudo: &PseudoLabelSet,
    mask: &SubSpaceMask,
) -> PseudoTargetMap {
    let classes = mask.complement_members();
    let mut states = Vec::with_capacity(proposals.len());
    let mut boxes = Vec::with_capacity(proposals.len());
    for p in proposals {
        let mut row = Vec::with_capacity(classes.len());
        let mut brow = Vec::with_capacity(classes.len());
        for &c in &classes {
            let best_high = pseudo
                .high
                .iter()
                .filter(|d| d.class_id == c)
                .map(|d| (iou(p, &d.bbox), d.bbox))
                .filter(|(v, _)| *v >= PSEUDO_MATCH_IOU)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, b)) = best_high {
                row.push(PseudoState::Positive);
                brow.push(Some(b));
            } else if pseudo
                .low
                .iter()
                .any(|d| d.class_id == c && iou(p, &d.bbox) >= PSEUDO_MATCH_IOU)
            {
                row.push(PseudoState::Ignore);
                brow.push(None);
            } else {
                row.push(PseudoState::Negative);
                brow.push(None);
            }
        }
        states.push(row);
        boxes.push(brow);
    }
    PseudoTargetMap {
        classes,
        states,
        boxes,
    }
}

/// Subsampling limits for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rcn_batch: usize,
    pub rcn_positive_fraction: f64,
    /// Post-NMS RPN proposals kept per image in training.
    pub train_proposals: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            rcn_batch: 64,
            rcn_positive_fraction: 0.25,
            train_proposals: 64,
        }
    }
}

/// Pick at most `batch` indices with at most `fraction * batch` from
/// `positives`, filling the rest from `negatives`. Returned ascending.
pub fn sample_indices(
    mut positives: Vec<usize>,
    mut negatives: Vec<usize>,
    batch: usize,
    fraction: f64,
    rng: &mut SplitMix64,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let max_pos = ((batch as f64) * fraction).floor() as usize;
    if positives.len() > max_pos {
        positives.shuffle(rng);
        positives.truncate(max_pos);
    }
    let max_neg = batch - positives.len();
    if negatives.len() > max_neg {
        negatives.shuffle(rng);
        negatives.truncate(max_neg);
    }
    positives.sort_unstable();
    negatives.sort_unstable();
    (positives, negatives)
}
