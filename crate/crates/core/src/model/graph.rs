//! The per-image training graph.
//!
//! Planning runs the forward pass, assigns and samples targets and records
//! every discrete choice (sampled anchors, proposal boxes of each stage,
//! targets) in an [`ImagePlan`]. The loss is then a smooth function of the
//! parameters for a fixed plan, which is what the gradients differentiate
//! and what finite differences probe.

use serde::{Deserialize, Serialize};

use super::arch::BoxMode;
use super::network::{BackboneCache, Network, RpnCache, StageCache};
use super::params::{Gradients, ParamSet};
use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::image::Image;
use crate::labelspace::SubSpaceMask;
use crate::losses::{
    binary_term, cls_loss_logits, loss_box_with_grad, pseudo_loss_logits, smooth_l1, BoxTarget,
    ClsLossKind, LossBreakdown, LossWeights,
};
use crate::pseudolabel::PseudoLabelSet;
use crate::rng::SplitMix64;
use crate::synthdata::Annotation;
use crate::targets::{
    assign_pseudo_targets, assign_rcn_targets, assign_rpn_targets, sample_indices, AnchorLabel,
    PseudoState, PseudoTargetMap, RcnTargetMap, RpnMode, SamplingConfig,
};

/// Loss-side switches of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub sampling: SamplingConfig,
    pub rpn_mode: RpnMode,
    pub cls_loss: ClsLossKind,
    /// Supervise box regression with high-tier pseudo boxes.
    pub pseudo_box: bool,
    pub weights: LossWeights,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            rpn_mode: RpnMode::Standard,
            cls_loss: ClsLossKind::Bce,
            pseudo_box: false,
            weights: LossWeights::default(),
        }
    }
}

/// One training image as the student sees it.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub image: &'a Image,
    pub gt: &'a [Annotation],
    pub mask: &'a SubSpaceMask,
    pub pseudo: Option<&'a PseudoLabelSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub boxes: Vec<BoxXYXY>,
    pub targets: RcnTargetMap,
    pub pseudo: Option<PseudoTargetMap>,
    pub box_targets: Vec<BoxTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlan {
    pub image: Image,
    /// Sampled anchors and whether each is positive.
    pub rpn_samples: Vec<(usize, bool)>,
    pub rpn_box_targets: Vec<(usize, [f64; 4])>,
    pub stages: Vec<StagePlan>,
}

impl ImagePlan {
    /// Number of positive (proposal, class) pseudo pairs over all stages.
    pub fn pseudo_positive_pairs(&self) -> usize {
        self.stages
            .iter()
            .filter_map(|s| s.pseudo.as_ref())
            .flat_map(|p| p.states.iter().flatten())
            .filter(|&&s| s == PseudoState::Positive)
            .count()
    }
}

pub(crate) struct Caches {
    backbone: BackboneCache,
    rpn: RpnCache,
    stages: Vec<StageCache>,
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
    v.sort_unstable();
    v
}

impl Network<'_> {
    fn box_targets(
        &self,
        stage: usize,
        boxes: &[BoxXYXY],
        targets: &RcnTargetMap,
        pseudo: Option<&PseudoTargetMap>,
        pseudo_box: bool,
    ) -> Vec<BoxTarget> {
        let coder = &self.arch.stage_coders[stage];
        let mut out = Vec::new();
        for (r, b) in boxes.iter().enumerate() {
            let mut has = false;
            if let (Some(c), Some(m)) = (targets.classes[r], targets.matched[r]) {
                out.push(BoxTarget {
                    row: r,
                    class_id: c,
                    delta: coder.encode(b, &m),
                });
                has = true;
            }
            if !pseudo_box {
                continue;
            }
            let Some(pt) = pseudo else { continue };
            for (col, &c) in pt.classes.iter().enumerate() {
                if has && self.arch.box_mode == BoxMode::Shared {
                    break;
                }
                if let (PseudoState::Positive, Some(m)) = (pt.states[r][col], pt.boxes[r][col]) {
                    out.push(BoxTarget {
                        row: r,
                        class_id: c,
                        delta: coder.encode(b, &m),
                    });
                    has = true;
                }
            }
        }
        out
    }

    fn stage_plan(
        &self,
        stage: usize,
        boxes: Vec<BoxXYXY>,
        sample: &TrainSample<'_>,
        pseudo_box: bool,
    ) -> Result<StagePlan> {
        let targets = assign_rcn_targets(&boxes, sample.gt, sample.mask, self.arch.stage_ious[stage])?;
        let pseudo = sample
            .pseudo
            .map(|ps| assign_pseudo_targets(&boxes, ps, sample.mask));
        let box_targets = self.box_targets(stage, &boxes, &targets, pseudo.as_ref(), pseudo_box);
        Ok(StagePlan {
            boxes,
            targets,
            pseudo,
            box_targets,
        })
    }

    /// Run the forward pass, assign targets and sample; returns the frozen
    /// plan together with the forward caches.
    pub(crate) fn plan_with_caches(
        &self,
        sample: &TrainSample<'_>,
        cfg: &GraphConfig,
        rng: &mut SplitMix64,
    ) -> Result<(ImagePlan, Caches)> {
        self.check_image(sample.image)?;
        if sample.mask.len() != self.arch.num_classes {
            return Err(Error::LengthMismatch {
                expected: self.arch.num_classes,
                actual: sample.mask.len(),
            });
        }
        let sc = &cfg.sampling;
        let backbone = self.backbone_forward(sample.image);
        let rpn = self.rpn_forward(backbone.features());

        let anchors = self.arch.anchors();
        let gt_boxes: Vec<BoxXYXY> = sample.gt.iter().map(|a| a.bbox).collect();
        let rt = assign_rpn_targets(&anchors, &gt_boxes, sample.pseudo, cfg.rpn_mode, &self.arch.rpn_coder);
        let pos: Vec<usize> = (0..anchors.len())
            .filter(|&i| rt.labels[i] == AnchorLabel::Positive)
            .collect();
        let neg: Vec<usize> = (0..anchors.len())
            .filter(|&i| rt.labels[i] == AnchorLabel::Negative)
            .collect();
        let (pos, neg) = sample_indices(pos, neg, sc.rpn_batch, sc.rpn_positive_fraction, rng);
        let rpn_box_targets = pos
            .iter()
            .map(|&i| (i, rt.deltas[i].expect("positive anchors carry deltas")))
            .collect();
        let mut rpn_samples: Vec<(usize, bool)> = pos
            .iter()
            .map(|&i| (i, true))
            .chain(neg.iter().map(|&i| (i, false)))
            .collect();
        rpn_samples.sort_unstable();

        let (mut proposals, _) = self.proposals(&rpn, Some(sc.train_proposals));
        proposals.extend_from_slice(&gt_boxes);
        if let Some(ps) = sample.pseudo {
            proposals.extend(ps.high.iter().map(|d| d.bbox));
        }
        let first = self.stage_plan(0, proposals, sample, cfg.pseudo_box)?;
        let n = first.boxes.len();
        let fg: Vec<usize> = (0..n)
            .filter(|&r| {
                first.targets.classes[r].is_some()
                    || first.pseudo.as_ref().is_some_and(|p| p.has_positive(r))
            })
            .collect();
        let bg: Vec<usize> = (0..n).filter(|r| fg.binary_search(r).is_err()).collect();
        let (fg, bg) = sample_indices(fg, bg, sc.rcn_batch, sc.rcn_positive_fraction, rng);
        let keep = merge_sorted(&fg, &bg);
        let boxes: Vec<BoxXYXY> = keep.iter().map(|&i| first.boxes[i]).collect();
        let targets = first.targets.select(&keep);
        let pseudo = first.pseudo.as_ref().map(|p| p.select(&keep));
        let box_targets = self.box_targets(0, &boxes, &targets, pseudo.as_ref(), cfg.pseudo_box);
        let mut stages = vec![StagePlan {
            boxes,
            targets,
            pseudo,
            box_targets,
        }];
        let mut caches = Vec::with_capacity(self.arch.num_stages());
        for s in 0..self.arch.num_stages() {
            let cache = self.stage_forward(s, backbone.features(), &stages[s].boxes);
            if s + 1 < self.arch.num_stages() {
                let next = self.refine(s, &stages[s].boxes, &cache);
                stages.push(self.stage_plan(s + 1, next, sample, cfg.pseudo_box)?);
            }
            caches.push(cache);
        }
        let plan = ImagePlan {
            image: sample.image.clone(),
            rpn_samples,
            rpn_box_targets,
            stages,
        };
        Ok((
            plan,
            Caches {
                backbone,
                rpn,
                stages: caches,
            },
        ))
    }

    pub fn plan(&self, sample: &TrainSample<'_>, cfg: &GraphConfig, rng: &mut SplitMix64) -> Result<ImagePlan> {
        Ok(self.plan_with_caches(sample, cfg, rng)?.0)
    }

    fn caches_for(&self, plan: &ImagePlan) -> Caches {
        let backbone = self.backbone_forward(&plan.image);
        let rpn = self.rpn_forward(backbone.features());
        let stages = plan
            .stages
            .iter()
            .enumerate()
            .map(|(s, sp)| self.stage_forward(s, backbone.features(), &sp.boxes))
            .collect();
        Caches {
            backbone,
            rpn,
            stages,
        }
    }

    /// Loss of a frozen plan; with `grads`, accumulates `scale * dL/dθ`.
    pub(crate) fn evaluate(
        &self,
        plan: &ImagePlan,
        caches: &Caches,
        cfg: &GraphConfig,
        mut grads: Option<(&mut Gradients, f64)>,
    ) -> LossBreakdown {
        let w = &cfg.weights;
        let scale = grads.as_ref().map_or(0.0, |g| g.1);
        let want = grads.is_some();
        let mut out = LossBreakdown::zero(self.arch.num_stages());

        let rpn = &caches.rpn;
        let mut d_obj = vec![0.0; if want { rpn.logits.len() } else { 0 }];
        let mut d_del = vec![0.0; if want { rpn.deltas.len() } else { 0 }];
        if !plan.rpn_samples.is_empty() {
            let norm = 1.0 / plan.rpn_samples.len() as f64;
            for &(i, positive) in &plan.rpn_samples {
                let (v, d) = binary_term(rpn.logits[i], positive, 0.0);
                out.rpn_cls += v * norm;
                if want {
                    d_obj[i] += w.rpn_cls * scale * norm * d;
                }
            }
        }
        if !plan.rpn_box_targets.is_empty() {
            let norm = 1.0 / plan.rpn_box_targets.len() as f64;
            for &(i, t) in &plan.rpn_box_targets {
                for k in 0..4 {
                    let (v, d) = smooth_l1(rpn.deltas[4 * i + k] - t[k]);
                    out.rpn_box += v * norm;
                    if want {
                        d_del[4 * i + k] += w.rpn_box * scale * norm * d;
                    }
                }
            }
        }

        let k = self.arch.num_classes;
        let bo = self.arch.box_outputs();
        let mut stage_grads = Vec::new();
        for (s, (sp, cache)) in plan.stages.iter().zip(&caches.stages).enumerate() {
            let mut dl = vec![0.0; if want { cache.logits.len() } else { 0 }];
            let mut dd = vec![0.0; if want { cache.deltas.len() } else { 0 }];
            let g = want.then_some((dl.as_mut_slice(), w.cls * scale));
            out.stage_cls[s] = cls_loss_logits(&cache.logits, &sp.targets, cfg.cls_loss, g);
            if let Some(pt) = &sp.pseudo {
                let g = want.then_some((dl.as_mut_slice(), w.pseudo_pos * scale, w.pseudo_neg * scale));
                let (p, n) = pseudo_loss_logits(&cache.logits, k, pt, g);
                out.pseudo_pos += p;
                out.pseudo_neg += n;
            }
            let g = want.then_some((dd.as_mut_slice(), w.box_reg * scale));
            out.box_reg += loss_box_with_grad(&cache.deltas, bo, &sp.box_targets, self.arch.box_mode, g);
            stage_grads.push((dl, dd));
        }
        out.total = out.weighted_total(w);

        if let Some((g, _)) = grads.as_mut() {
            let mut dfeat = vec![0.0; caches.backbone.features().len()];
            for (s, (dl, dd)) in stage_grads.iter().enumerate() {
                self.stage_backward(s, &caches.stages[s], dl, dd, g, &mut dfeat);
            }
            self.rpn_backward(rpn, &d_obj, &d_del, g, &mut dfeat);
            self.backbone_backward(&caches.backbone, dfeat, g);
        }
        out
    }

    /// Loss of a frozen plan at the current parameters.
    pub fn plan_loss(&self, plan: &ImagePlan, cfg: &GraphConfig) -> LossBreakdown {
        let caches = self.caches_for(plan);
        self.evaluate(plan, &caches, cfg, None)
    }

    /// Loss and exact gradients of a frozen plan.
    pub fn plan_gradients(&self, plan: &ImagePlan, cfg: &GraphConfig) -> Result<(LossBreakdown, Gradients)> {
        let caches = self.caches_for(plan);
        let mut grads = ParamSet::zeros_like(self.params);
        let loss = self.evaluate(plan, &caches, cfg, Some((&mut grads, 1.0)));
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss:?}")));
        }
        Ok((loss, grads))
    }

    /// Loss of a frozen plan plus a fingerprint of every ReLU's on/off
    /// state, used to detect finite-difference steps that cross a kink.
    pub fn plan_loss_and_pattern(&self, plan: &ImagePlan, cfg: &GraphConfig) -> (LossBreakdown, u64) {
        let caches = self.caches_for(plan);
        let loss = self.evaluate(plan, &caches, cfg, None);
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |xs: &[f64]| {
            for &x in xs {
                h ^= u64::from(x > 0.0);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for c in &caches.backbone.convs {
            feed(&c.out);
        }
        feed(&caches.rpn.conv.out);
        for s in &caches.stages {
            feed(&s.hidden);
        }
        (loss, h)
    }

    /// Plan every sample, then return the batch-mean loss and gradients.
    /// Plans are returned for inspection.
    pub fn train_batch(
        &self,
        samples: &[TrainSample<'_>],
        cfg: &GraphConfig,
        rng: &mut SplitMix64,
    ) -> Result<(LossBreakdown, Gradients, Vec<ImagePlan>)> {
        if samples.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let scale = 1.0 / samples.len() as f64;
        let mut grads = ParamSet::zeros_like(self.params);
        let mut total = LossBreakdown::zero(self.arch.num_stages());
        let mut plans = Vec::with_capacity(samples.len());
        for s in samples {
            let (plan, caches) = self.plan_with_caches(s, cfg, rng)?;
            let loss = self.evaluate(&plan, &caches, cfg, Some((&mut grads, scale)));
            total.add_scaled(&loss, scale);
            plans.push(plan);
        }
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("loss {total:?}")));
        }
        Ok((total, grads, plans))
    }
}
