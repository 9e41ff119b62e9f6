//! Loss terms: masked multi-sigmoid classification (BCE or focal), positive
//! and negative pseudo-label losses, smooth-L1 box regression.
//!
//! Each term exists in two forms. The score-domain functions take sigmoid
//! outputs and mirror the textbook definitions. The logit-domain functions
//! used by the training graph compute the same values from logits in a
//! numerically stable way and accumulate gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BoxMode;
use crate::targets::{PseudoState, PseudoTargetMap, RcnTargetMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClsLossKind {
    Bce,
    Focal { gamma: f64 },
}

impl ClsLossKind {
    pub fn gamma(&self) -> f64 {
        match self {
            ClsLossKind::Bce => 0.0,
            ClsLossKind::Focal { gamma } => *gamma,
        }
    }
}

/// Per-component loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub cls: f64,
    pub pseudo_pos: f64,
    pub pseudo_neg: f64,
    pub box_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rpn_cls: 1.0,
            rpn_box: 1.0,
            cls: 1.0,
            pseudo_pos: 1.0,
            pseudo_neg: 1.0,
            box_reg: 1.0,
        }
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    /// Masked classification loss per cascade stage.
    pub stage_cls: Vec<f64>,
    pub pseudo_pos: f64,
    pub pseudo_neg: f64,
    #[serde(rename = "box")]
    pub box_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero(stages: usize) -> Self {
        Self {
            stage_cls: vec![0.0; stages],
            ..Self::default()
        }
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.rpn_cls * self.rpn_cls
            + w.rpn_box * self.rpn_box
            + w.cls * self.stage_cls.iter().sum::<f64>()
            + w.pseudo_pos * self.pseudo_pos
            + w.pseudo_neg * self.pseudo_neg
            + w.box_reg * self.box_reg
    }

    /// `self += s * other`, component-wise including `total`.
    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.rpn_cls += s * other.rpn_cls;
        self.rpn_box += s * other.rpn_box;
        if self.stage_cls.len() < other.stage_cls.len() {
            self.stage_cls.resize(other.stage_cls.len(), 0.0);
        }
        for (a, b) in self.stage_cls.iter_mut().zip(&other.stage_cls) {
            *a += s * b;
        }
        self.pseudo_pos += s * other.pseudo_pos;
        self.pseudo_neg += s * other.pseudo_neg;
        self.box_reg += s * other.box_reg;
        self.total += s * other.total;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.rpn_cls,
            self.rpn_box,
            self.pseudo_pos,
            self.pseudo_neg,
            self.box_reg,
            self.total,
        ]
        .iter()
        .chain(&self.stage_cls)
        .all(|v| v.is_finite())
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal binary term and its derivative with respect to the logit `z`.
///
/// Positive: `-(1-p)^g ln p`; negative: `-p^g ln(1-p)`; `g = 0` is BCE.
pub fn binary_term(z: f64, positive: bool, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if gamma == 0.0 {
        return if positive {
            (softplus(-z), p - 1.0)
        } else {
            (softplus(z), p)
        };
    }
    if positive {
        let q = 1.0 - p;
        let ln_p = -softplus(-z);
        let m = q.powf(gamma);
        (-m * ln_p, m * (gamma * p * ln_p - q))
    } else {
        let ln_q = -softplus(z);
        let m = p.powf(gamma);
        (-m * ln_q, m * (p - gamma * (1.0 - p) * ln_q))
    }
}

fn check_score(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(Error::ScoreOutOfRange(p))
    }
}

fn focal_from_score(p: f64, positive: bool, gamma: f64) -> f64 {
    if positive {
        -(1.0 - p).powf(gamma) * p.ln()
    } else {
        -p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Masked classification loss over unified-space score vectors.
///
/// Sums per-class binary terms over classes inside the target map's mask
/// and divides by the number of proposals.
pub fn loss_cls(scores: &[Vec<f64>], targets: &RcnTargetMap, kind: ClsLossKind) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::LengthMismatch {
            expected: targets.len(),
            actual: scores.len(),
        });
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let gamma = kind.gamma();
    let mut sum = 0.0;
    for (r, row) in scores.iter().enumerate() {
        if row.len() != targets.mask.len() {
            return Err(Error::LengthMismatch {
                expected: targets.mask.len(),
                actual: row.len(),
            });
        }
        for (c, &p) in row.iter().enumerate() {
            if let Some(q) = targets.target(r, c) {
                sum += focal_from_score(check_score(p)?, q == 1.0, gamma);
            }
        }
    }
    Ok(sum / scores.len() as f64)
}

fn pseudo_sum(scores: &[Vec<f64>], pt: &PseudoTargetMap, want: PseudoState) -> Result<f64> {
    if scores.len() != pt.len() {
        return Err(Error::LengthMismatch {
            expected: pt.len(),
            actual: scores.len(),
        });
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (r, states) in pt.states.iter().enumerate() {
        for (&c, &s) in pt.classes.iter().zip(states) {
            if s == want {
                let p = check_score(scores[r][c])?;
                sum += focal_from_score(p, want == PseudoState::Positive, 0.0);
            }
        }
    }
    Ok(sum / scores.len() as f64)
}

/// Positive pseudo-label loss: `-ln p` over positive (proposal, class) pairs.
pub fn loss_pseudo_pos(scores: &[Vec<f64>], pt: &PseudoTargetMap) -> Result<f64> {
    pseudo_sum(scores, pt, PseudoState::Positive)
}

/// Negative pseudo-label loss: `-ln(1-p)` over negative pairs.
pub fn loss_pseudo_neg(scores: &[Vec<f64>], pt: &PseudoTargetMap) -> Result<f64> {
    pseudo_sum(scores, pt, PseudoState::Negative)
}

/// One supervised regression row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    pub row: usize,
    pub class_id: usize,
    pub delta: [f64; 4],
}

pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

fn box_channel(mode: BoxMode, class_id: usize) -> usize {
    match mode {
        BoxMode::Shared => 0,
        BoxMode::CategorySpecific => 4 * class_id,
    }
}

/// Smooth-L1 over the supervised channel of each target row, averaged over
/// targets. `pred` is row-major with `width` values per row.
pub fn loss_box_with_grad(
    pred: &[f64],
    width: usize,
    targets: &[BoxTarget],
    mode: BoxMode,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let norm = 1.0 / targets.len() as f64;
    let mut sum = 0.0;
    for t in targets {
        let base = t.row * width + box_channel(mode, t.class_id);
        for k in 0..4 {
            let (v, d) = smooth_l1(pred[base + k] - t.delta[k]);
            sum += v;
            if let Some((g, s)) = grad.as_mut() {
                g[base + k] += *s * norm * d;
            }
        }
    }
    sum * norm
}

/// Score-domain convenience wrapper over [`loss_box_with_grad`].
pub fn loss_box(pred: &[Vec<f64>], targets: &[BoxTarget], mode: BoxMode) -> f64 {
    let width = pred.first().map_or(0, Vec::len);
    let flat: Vec<f64> = pred.iter().flatten().copied().collect();
    loss_box_with_grad(&flat, width, targets, mode, None)
}

/// Masked classification loss from logits (`n x k` row-major), accumulating
/// `scale * dL/dz` into `grad` when given.
pub fn cls_loss_logits(
    logits: &[f64],
    targets: &RcnTargetMap,
    kind: ClsLossKind,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let n = targets.len();
    if n == 0 {
        return 0.0;
    }
    let k = targets.mask.len();
    let members = targets.mask.members();
    let gamma = kind.gamma();
    let norm = 1.0 / n as f64;
    let mut sum = 0.0;
    for r in 0..n {
        for &c in &members {
            let (v, d) = binary_term(logits[r * k + c], targets.classes[r] == Some(c), gamma);
            sum += v;
            if let Some((g, s)) = grad.as_mut() {
                g[r * k + c] += *s * norm * d;
            }
        }
    }
    sum * norm
}

/// Positive and negative pseudo losses from logits, normalized by the
/// proposal count. Gradients are scaled by `(scale_pos, scale_neg)`.
pub fn pseudo_loss_logits(
    logits: &[f64],
    k: usize,
    pt: &PseudoTargetMap,
    mut grad: Option<(&mut [f64], f64, f64)>,
) -> (f64, f64) {
    let n = pt.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let norm = 1.0 / n as f64;
    let (mut pos, mut neg) = (0.0, 0.0);
    for (r, states) in pt.states.iter().enumerate() {
        for (&c, &s) in pt.classes.iter().zip(states) {
            let z = logits[r * k + c];
            let (positive, scale_idx) = match s {
                PseudoState::Positive => (true, 0),
                PseudoState::Negative => (false, 1),
                PseudoState::Ignore => continue,
            };
            let (v, d) = binary_term(z, positive, 0.0);
            if positive {
                pos += v;
            } else {
                neg += v;
            }
            if let Some((g, sp, sn)) = grad.as_mut() {
                let s = if scale_idx == 0 { *sp } else { *sn };
                g[r * k + c] += s * norm * d;
            }
        }
    }
    (pos * norm, neg * norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::SubSpaceMask;
    use proptest::prelude::*;

    fn rcn(mask: &str, classes: Vec<Option<usize>>) -> RcnTargetMap {
        let n = classes.len();
        RcnTargetMap {
            classes,
            matched: vec![None; n],
            mask: SubSpaceMask::from_bit_string(0, mask).unwrap(),
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn masked_bce_example() {
        let t = rcn("101", vec![Some(0)]);
        let l = loss_cls(&[vec![0.8, 0.6, 0.3]], &t, ClsLossKind::Bce).unwrap();
        let want = -(0.8f64.ln()) - (0.7f64.ln());
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.5798).abs() < 1e-4);
    }

    #[test]
    fn focal_gamma_zero_is_bce() {
        let t = rcn("111", vec![Some(1), None]);
        let s = vec![vec![0.2, 0.7, 0.4], vec![0.9, 0.05, 0.5]];
        let a = loss_cls(&s, &t, ClsLossKind::Bce).unwrap();
        let b = loss_cls(&s, &t, ClsLossKind::Focal { gamma: 0.0 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_scores_give_near_zero() {
        let t = rcn("111", vec![Some(2)]);
        let e = 1e-12;
        let l = loss_cls(&[vec![e, e, 1.0 - e]], &t, ClsLossKind::Bce).unwrap();
        assert!(l < 1e-10);
    }

    #[test]
    fn score_range_is_checked() {
        let t = rcn("1", vec![Some(0)]);
        assert!(matches!(
            loss_cls(&[vec![1.0]], &t, ClsLossKind::Bce),
            Err(Error::ScoreOutOfRange(_))
        ));
    }

    #[test]
    fn pseudo_examples() {
        let pt = PseudoTargetMap {
            classes: vec![3, 4],
            states: vec![vec![PseudoState::Positive, PseudoState::Negative]],
            boxes: vec![vec![None, None]],
        };
        let s = vec![vec![0.5, 0.5, 0.5, 0.9, 0.2]];
        assert!((loss_pseudo_pos(&s, &pt).unwrap() + 0.9f64.ln()).abs() < 1e-12);
        assert!((loss_pseudo_neg(&s, &pt).unwrap() + 0.8f64.ln()).abs() < 1e-12);
        let ignore = PseudoTargetMap {
            states: vec![vec![PseudoState::Ignore; 2]],
            ..pt
        };
        assert_eq!(loss_pseudo_pos(&s, &ignore).unwrap(), 0.0);
        assert_eq!(loss_pseudo_neg(&s, &ignore).unwrap(), 0.0);
    }

    #[test]
    fn smooth_l1_examples() {
        let t = [BoxTarget {
            row: 0,
            class_id: 1,
            delta: [0.0; 4],
        }];
        assert_eq!(loss_box(&[vec![0.0; 8]], &t, BoxMode::CategorySpecific), 0.0);
        let mut p = vec![vec![0.0; 8]];
        p[0][4] = 0.5;
        assert!((loss_box(&p, &t, BoxMode::CategorySpecific) - 0.125).abs() < 1e-15);
        let mut q = p.clone();
        q[0][0] = 7.0;
        assert_eq!(
            loss_box(&p, &t, BoxMode::CategorySpecific),
            loss_box(&q, &t, BoxMode::CategorySpecific)
        );
    }

    #[test]
    fn logit_and_score_domains_agree() {
        let t = rcn("1101", vec![Some(0), None, Some(3)]);
        let scores = vec![
            vec![0.8, 0.1, 0.5, 0.3],
            vec![0.35, 0.6, 0.2, 0.9],
            vec![0.02, 0.4, 0.7, 0.66],
        ];
        let logits: Vec<f64> = scores.iter().flatten().map(|&p| logit(p)).collect();
        for kind in [ClsLossKind::Bce, ClsLossKind::Focal { gamma: 2.0 }] {
            let a = loss_cls(&scores, &t, kind).unwrap();
            let b = cls_loss_logits(&logits, &t, kind, None);
            assert!((a - b).abs() < 1e-12, "{kind:?}: {a} vs {b}");
        }
    }

    #[test]
    fn binary_term_derivative_matches_fd() {
        for &z in &[-30.0, -4.0, -0.3, 0.0, 0.7, 5.0, 25.0] {
            for pos in [true, false] {
                for g in [0.0, 2.0] {
                    let h = 1e-6;
                    let fd = (binary_term(z + h, pos, g).0 - binary_term(z - h, pos, g).0) / (2.0 * h);
                    let d = binary_term(z, pos, g).1;
                    assert!((fd - d).abs() < 1e-7 * (1.0 + d.abs()), "z={z} pos={pos} g={g}");
                }
            }
        }
    }

    #[test]
    fn stable_for_extreme_logits() {
        let (v, d) = binary_term(-800.0, true, 0.0);
        assert!((v - 800.0).abs() < 1e-9 && (d + 1.0).abs() < 1e-12);
        let (v, _) = binary_term(800.0, false, 2.0);
        assert!(v.is_finite() && v > 0.0);
    }

    proptest! {
        #[test]
        fn mask_isolation(seed in 0u64..10_000, c in 0usize..6, bump in -0.4f64..0.4) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let bits: Vec<bool> = (0..6).map(|i| i == 0 || rng.chance(0.5)).collect();
            let mask = SubSpaceMask::new(0, bits.clone()).unwrap();
            let members = mask.members();
            let t = RcnTargetMap {
                classes: vec![Some(members[0]), None],
                matched: vec![None, None],
                mask,
            };
            let scores: Vec<Vec<f64>> = (0..2).map(|_| (0..6).map(|_| rng.uniform(0.05, 0.95)).collect()).collect();
            let mut moved = scores.clone();
            moved[1][c] = (moved[1][c] + bump).clamp(0.01, 0.99);
            let a = loss_cls(&scores, &t, ClsLossKind::Bce).unwrap();
            let b = loss_cls(&moved, &t, ClsLossKind::Bce).unwrap();
            if !bits[c] {
                prop_assert_eq!(a, b);
            }
        }
    }
}
