//! Teacher inference, dual-threshold filtering, per-class F-beta threshold
//! calibration and frame mapping of pseudo boxes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY, ScoredBox};
use crate::image::Image;
use crate::labelspace::{SubSpaceMask, UnifiedLabelSpace};
use crate::model::{ArchConfig, DetectConfig, Network};
use crate::schedule::TeacherState;
use crate::synthdata::{Annotation, AugmentationRecord, SceneDataset};
use crate::util::{read_json, write_json};

/// Dual-threshold pseudo boxes of one image. `high` is a subset of `low`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub high: Vec<ScoredBox>,
    pub low: Vec<ScoredBox>,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassThresholds {
    /// `T_h` per unified class.
    pub high: Vec<f64>,
    /// Global `T_l`.
    pub low: f64,
    pub beta: f64,
    pub teacher_version: u64,
    /// Iteration at which the thresholds were calibrated.
    pub calibrated_at: u64,
}

impl PerClassThresholds {
    pub fn uniform(num_classes: usize, high: f64, low: f64) -> Result<Self> {
        let t = Self {
            high: vec![high; num_classes],
            low,
            beta: 1.0,
            teacher_version: 0,
            calibrated_at: 0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low > 0.0 && self.low < 1.0) {
            return Err(Error::Invalid(format!("T_l = {} outside (0, 1)", self.low)));
        }
        if let Some(h) = self.high.iter().find(|&&h| !(h >= self.low && h < 1.0)) {
            return Err(Error::Invalid(format!(
                "T_h = {h} outside [T_l = {}, 1)",
                self.low
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub beta: f64,
    pub grid: Vec<f64>,
    pub match_iou: f64,
    pub fallback: f64,
    pub low_threshold: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            grid: (1..20).map(|k| k as f64 / 20.0).collect(),
            match_iou: 0.5,
            fallback: 0.8,
            low_threshold: 0.2,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = self.grid.windows(2).all(|w| w[0] < w[1]);
        let inside = self.grid.iter().all(|&t| t > 0.0 && t < 1.0);
        if self.grid.is_empty() || !increasing || !inside {
            return Err(Error::Config(
                "threshold grid must be strictly increasing inside (0, 1)".into(),
            ));
        }
        if !(self.beta > 0.0) || !(self.low_threshold > 0.0 && self.low_threshold < 1.0) {
            return Err(Error::Config("beta and T_l must be positive, T_l < 1".into()));
        }
        Ok(())
    }
}

/// Eval-phase detections of the teacher on a (weakly augmented) image.
pub fn teacher_infer(
    arch: &ArchConfig,
    teacher: Option<&TeacherState>,
    image: &Image,
) -> Result<Vec<ScoredBox>> {
    let t = teacher.ok_or(Error::NoTeacher)?;
    Network::new(arch, &t.params)?.detect(image, &DetectConfig::default())
}

/// Split detections into high and low tiers, dropping classes inside `mask`.
pub fn filter_dual(
    dets: &[ScoredBox],
    thresholds: &PerClassThresholds,
    mask: &SubSpaceMask,
) -> PseudoLabelSet {
    let mut out = PseudoLabelSet::default();
    for d in dets {
        if mask.contains(d.class_id) || d.score < thresholds.low {
            continue;
        }
        if d.score >= thresholds.high[d.class_id] {
            out.high.push(*d);
        }
        out.low.push(*d);
    }
    out
}

/// Map pseudo boxes through the geometric part of an augmentation.
pub fn transform_pseudo(pseudo: &PseudoLabelSet, record: &AugmentationRecord) -> PseudoLabelSet {
    let map = |v: &[ScoredBox]| {
        v.iter()
            .map(|d| ScoredBox {
                bbox: record.map_box(&d.bbox),
                ..*d
            })
            .collect()
    };
    PseudoLabelSet {
        high: map(&pseudo.high),
        low: map(&pseudo.low),
    }
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

/// Greedy score-descending matching of one class in one image; returns the
/// matched flag per detection (in the given order, which must be sorted by
/// descending score).
fn greedy_flags(dets: &[(f64, BoxXYXY)], gts: &[BoxXYXY], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|(_, b)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou(b, gt);
                if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Per-class `T_h` from precomputed detections against full-label ground
/// truth. Each grid threshold `t` keeps detections with `score >= t`;
/// greedy matching in score order means the matches of a kept prefix equal
/// those of the full greedy run restricted to it.
pub fn fbeta_thresholds(
    detections: &[Vec<ScoredBox>],
    ground_truth: &[Vec<Annotation>],
    num_classes: usize,
    config: &CalibConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if detections.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if detections.len() != ground_truth.len() {
        return Err(Error::LengthMismatch {
            expected: ground_truth.len(),
            actual: detections.len(),
        });
    }
    let mut out = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0usize;
        for (dets, gts) in detections.iter().zip(ground_truth) {
            let g: Vec<BoxXYXY> = gts.iter().filter(|a| a.class_id == c).map(|a| a.bbox).collect();
            n_gt += g.len();
            let mut d: Vec<(f64, BoxXYXY)> = dets
                .iter()
                .filter(|x| x.class_id == c)
                .map(|x| (x.score, x.bbox))
                .collect();
            d.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags = greedy_flags(&d, &g, config.match_iou);
            scored.extend(d.iter().map(|x| x.0).zip(flags));
        }
        if n_gt == 0 || scored.is_empty() {
            out.push(config.fallback.max(config.low_threshold));
            continue;
        }
        let mut best = (f64::NEG_INFINITY, config.fallback);
        for &t in &config.grid {
            let kept = scored.iter().filter(|(s, _)| *s >= t);
            let (n, tp) = kept.fold((0usize, 0usize), |(n, tp), (_, m)| (n + 1, tp + usize::from(*m)));
            let f = if n == 0 {
                0.0
            } else {
                f_beta(tp as f64 / n as f64, tp as f64 / n_gt as f64, config.beta)
            };
            if f >= best.0 {
                best = (f, t);
            }
        }
        out.push(best.1.max(config.low_threshold));
    }
    Ok(out)
}

/// Run the teacher over the calibration set and pick per-class thresholds.
pub fn search_fbeta_thresholds(
    arch: &ArchConfig,
    teacher: &TeacherState,
    calib: &SceneDataset,
    config: &CalibConfig,
    iteration: u64,
) -> Result<PerClassThresholds> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let net = Network::new(arch, &teacher.params)?;
    let det_cfg = DetectConfig::default();
    let mut dets = Vec::with_capacity(calib.len());
    let mut gts = Vec::with_capacity(calib.len());
    for s in &calib.scenes {
        dets.push(net.detect(&s.image, &det_cfg)?);
        gts.push(
            s.annotations
                .iter()
                .filter(|a| calib.mask.contains(a.class_id))
                .copied()
                .collect(),
        );
    }
    let high = fbeta_thresholds(&dets, &gts, arch.num_classes, config)?;
    let t = PerClassThresholds {
        high,
        low: config.low_threshold,
        beta: config.beta,
        teacher_version: teacher.version,
        calibrated_at: iteration,
    };
    t.validate()?;
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PseudoEntry {
    class: String,
    bbox: BoxXYXY,
    score: f64,
    tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PseudoImage {
    file: String,
    scene_id: usize,
    annotations: Vec<PseudoEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PseudoFile {
    dataset: String,
    images: Vec<PseudoImage>,
}

pub fn pseudo_file_name(dataset: &str) -> String {
    format!("pseudo_{dataset}.json")
}

/// Persist per-scene pseudo sets (original image frame). Each box appears
/// once with its tier; high-tier boxes are implicitly also low-tier.
pub fn write_pseudo_file(
    path: &Path,
    dataset: &SceneDataset,
    space: &UnifiedLabelSpace,
    sets: &[PseudoLabelSet],
) -> Result<()> {
    let images = dataset
        .scenes
        .iter()
        .zip(sets)
        .map(|(s, ps)| PseudoImage {
            file: format!("images/{:05}.rgb", s.id),
            scene_id: s.id,
            annotations: ps
                .low
                .iter()
                .map(|d| PseudoEntry {
                    class: space.name(d.class_id).to_string(),
                    bbox: d.bbox,
                    score: d.score,
                    tier: if ps.high.contains(d) { Tier::High } else { Tier::Low },
                })
                .collect(),
        })
        .collect();
    write_json(
        path,
        &PseudoFile {
            dataset: dataset.name.clone(),
            images,
        },
    )
}

pub fn read_pseudo_file(path: &Path, space: &UnifiedLabelSpace) -> Result<Vec<(usize, PseudoLabelSet)>> {
    let f: PseudoFile = read_json(path)?;
    f.images
        .into_iter()
        .map(|img| {
            let mut ps = PseudoLabelSet::default();
            for e in img.annotations {
                let class_id = space
                    .id_of(&e.class)
                    .ok_or_else(|| Error::Invalid(format!("unknown class `{}` in {}", e.class, path.display())))?;
                let d = ScoredBox::new(e.bbox, class_id, e.score)?;
                if e.tier == Tier::High {
                    ps.high.push(d);
                }
                ps.low.push(d);
            }
            Ok((img.scene_id, ps))
        })
        .collect()
}
