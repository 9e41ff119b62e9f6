//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `UODLAB_ACCEPTANCE=1,2,11` restricts the run to the listed criteria.
//! Training runs of the trend criteria are kept under
//! `target/acceptance-runs` for inspection with `uodlab compare`. A finished
//! run there with the same config and dataset is reused instead of retrained.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use uodlab::eval::{default_pmcr_grid, evaluate_detections, pmcr_from_scores};
use uodlab::geometry::{BoxXYXY, ScoredBox};
use uodlab::labelspace::SubSpaceMask;
use uodlab::losses::{
    cls_loss_logits, loss_cls, loss_pseudo_neg, loss_pseudo_pos, pseudo_loss_logits, ClsLossKind,
};
use uodlab::model::gradcheck::{check_gradients, GradCheckConfig};
use uodlab::model::{ParamSet, Tensor};
use uodlab::pseudolabel::{fbeta_thresholds, CalibConfig, PerClassThresholds};
use uodlab::rng::SplitMix64;
use uodlab::schedule::{ema_update, LrKind, TeacherState};
use uodlab::cli::load_run;
use uodlab::synthdata::{build_bundle, bundle_fingerprint, Annotation, DataConfig, DatasetBundle, NESTED_PAIRS, TAXONOMY};
use uodlab::targets::{PseudoState, PseudoTargetMap, RcnTargetMap};
use uodlab::trainer::{
    load_params, run_with_bundle, Checkpoint, ExperimentConfig, RunOptions, RunRecord, Scheme, TrainState,
    CHECKPOINT_DIR, FINAL_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE,
};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------------------
// Criterion 1

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let bundle = common::small_bundle(40, 0);
    let check = GradCheckConfig::default();
    let mut worst = Vec::new();
    let mut ok = true;
    for (i, which) in common::LOSS_CONFIGS.iter().enumerate() {
        let f = common::grad_fixture(which, &bundle);
        let mut rng = SplitMix64::new(1000 + i as u64);
        let report = match check_gradients(&f.arch, &f.params, &f.plans, &f.graph, &check, &mut rng) {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("{which}: {e}")),
        };
        let enough = report.layers.iter().all(|l| l.checked >= check.samples_per_layer);
        ok &= enough && report.passed(check.tolerance);
        worst.push(format!(
            "{which} {:.1e} over {} layers",
            report.max_rel_err(),
            report.layers.len()
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs <= 120.0;
    Outcome::new(
        ok,
        format!(
            "max relative error {} (tolerance {:.0e}), {} samples per layer, {secs:.1}s",
            worst.join("; "),
            check.tolerance,
            check.samples_per_layer
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 2: brute-force oracles

fn oracle_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let area = |r: &BoxXYXY| (r.x2() - r.x1()) * (r.y2() - r.y1());
    inter / (area(a) + area(b) - inter)
}

/// Matches of score-sorted detections against ground truth: every
/// detection claims the free ground truth of largest IoU (first on ties).
fn oracle_match(dets: &[BoxXYXY], gts: &[BoxXYXY], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in dets {
        let mut pick = None;
        let mut best = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            let v = oracle_iou(d, gt);
            if !taken[g] && v >= thr && v > best {
                best = v;
                pick = Some(g);
            }
        }
        if let Some(g) = pick {
            taken[g] = true;
        }
        out.push(pick.is_some());
    }
    out
}

fn sorted_class_dets(dets: &[ScoredBox], c: usize) -> Vec<ScoredBox> {
    let mut d: Vec<ScoredBox> = dets.iter().filter(|x| x.class_id == c).copied().collect();
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
    d
}

/// AP by enumerating the precision/recall pair of every rank and taking,
/// for each of the 101 recall levels, the best precision at or beyond it.
fn oracle_ap(dets: &[Vec<ScoredBox>], gts: &[Vec<Annotation>], c: usize, thr: f64) -> Option<f64> {
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for (d, g) in dets.iter().zip(gts) {
        let g: Vec<BoxXYXY> = g.iter().filter(|a| a.class_id == c).map(|a| a.bbox).collect();
        num_gt += g.len();
        let d = sorted_class_dets(d, c);
        let boxes: Vec<BoxXYXY> = d.iter().map(|x| x.bbox).collect();
        let flags = oracle_match(&boxes, &g, thr);
        ranked.extend(d.iter().map(|x| x.score).zip(flags));
    }
    if num_gt == 0 {
        return None;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pr = Vec::new();
    let mut hits = 0;
    for (k, (_, hit)) in ranked.iter().enumerate() {
        hits += usize::from(*hit);
        pr.push((hits as f64 / (k + 1) as f64, hits as f64 / num_gt as f64));
    }
    let mut total = 0.0;
    for level in 0..=100 {
        let level = level as f64 / 100.0;
        total += pr
            .iter()
            .filter(|(_, r)| *r >= level)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
    }
    Some(total / 101.0)
}

fn oracle_map(dets: &[Vec<ScoredBox>], gts: &[Vec<Annotation>], classes: usize) -> f64 {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut per_thr = Vec::new();
    for &t in &thresholds {
        let aps: Vec<f64> = (0..classes).filter_map(|c| oracle_ap(dets, gts, c, t)).collect();
        if aps.is_empty() {
            per_thr.push(0.0);
        } else {
            per_thr.push(aps.iter().sum::<f64>() / aps.len() as f64);
        }
    }
    per_thr.iter().sum::<f64>() / per_thr.len() as f64
}

fn random_box(rng: &mut StdRng, near: Option<&BoxXYXY>) -> BoxXYXY {
    let (x, y, w, h) = match near {
        Some(b) => (
            b.x1() + rng.gen_range(-2.0..2.0),
            b.y1() + rng.gen_range(-2.0..2.0),
            (b.x2() - b.x1()) + rng.gen_range(-2.0..2.0),
            (b.y2() - b.y1()) + rng.gen_range(-2.0..2.0),
        ),
        None => (
            rng.gen_range(0.0..24.0),
            rng.gen_range(0.0..24.0),
            rng.gen_range(2.0..10.0),
            rng.gen_range(2.0..10.0),
        ),
    };
    BoxXYXY::new(x, y, x + w.max(1.0), y + h.max(1.0)).unwrap()
}

type Instance = (Vec<Vec<ScoredBox>>, Vec<Vec<Annotation>>, usize);

fn random_instance(rng: &mut StdRng) -> Instance {
    let images = rng.gen_range(1..=4);
    let classes = rng.gen_range(1..=3);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<Annotation> = (0..rng.gen_range(0..=4))
            .map(|_| Annotation {
                class_id: rng.gen_range(0..classes),
                bbox: random_box(rng, None),
            })
            .collect();
        let d: Vec<ScoredBox> = (0..rng.gen_range(0..=6))
            .map(|_| {
                let near = if !g.is_empty() && rng.gen_bool(0.7) {
                    Some(g[rng.gen_range(0..g.len())])
                } else {
                    None
                };
                ScoredBox {
                    bbox: random_box(rng, near.as_ref().map(|a| &a.bbox)),
                    class_id: near.map_or_else(|| rng.gen_range(0..classes), |a| a.class_id),
                    score: rng.gen_range(0.0..1.0),
                }
            })
            .collect();
        gts.push(g);
        dets.push(d);
    }
    (dets, gts, classes)
}

fn oracle_fbeta(dets: &[Vec<ScoredBox>], gts: &[Vec<Annotation>], classes: usize, cfg: &CalibConfig) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let n_gt: usize = gts.iter().map(|g| g.iter().filter(|a| a.class_id == c).count()).sum();
            let n_det: usize = dets.iter().map(|d| d.iter().filter(|x| x.class_id == c).count()).sum();
            if n_gt == 0 || n_det == 0 {
                return cfg.fallback.max(cfg.low_threshold);
            }
            let mut best_f = f64::NEG_INFINITY;
            let mut best_t = cfg.fallback;
            for &t in &cfg.grid {
                let (mut kept, mut tp) = (0usize, 0usize);
                for (d, g) in dets.iter().zip(gts) {
                    let d: Vec<BoxXYXY> = sorted_class_dets(d, c)
                        .into_iter()
                        .filter(|x| x.score >= t)
                        .map(|x| x.bbox)
                        .collect();
                    let g: Vec<BoxXYXY> = g.iter().filter(|a| a.class_id == c).map(|a| a.bbox).collect();
                    kept += d.len();
                    tp += oracle_match(&d, &g, cfg.match_iou).iter().filter(|&&m| m).count();
                }
                let f = if kept == 0 {
                    0.0
                } else {
                    let p = tp as f64 / kept as f64;
                    let r = tp as f64 / n_gt as f64;
                    let b2 = cfg.beta * cfg.beta;
                    if b2 * p + r <= 0.0 {
                        0.0
                    } else {
                        (1.0 + b2) * p * r / (b2 * p + r)
                    }
                };
                if f > best_f || (f == best_f && t > best_t) {
                    best_f = f;
                    best_t = t;
                }
            }
            best_t.max(cfg.low_threshold)
        })
        .collect()
}

fn oracle_pmcr(scores: &[Vec<Vec<f64>>], t: f64) -> (usize, usize) {
    let mut p1 = 0;
    let mut p2 = 0;
    for row in scores.iter().flatten() {
        let firing = row.iter().filter(|&&s| s > t).count();
        p1 += usize::from(firing >= 1);
        p2 += usize::from(firing >= 2);
    }
    (p1, p2)
}

fn evaluation_oracles() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2024);
    let mut worst_map = 0.0f64;
    let mut map_fail = 0;
    let mut fbeta_fail = 0;
    let mut pmcr_fail = 0;
    let instances = 1000;
    for _ in 0..instances {
        let (dets, gts, classes) = random_instance(&mut rng);
        if gts.iter().all(Vec::is_empty) {
            continue;
        }
        let got = evaluate_detections(&dets, &gts, classes).unwrap().map;
        let want = oracle_map(&dets, &gts, classes);
        let diff = (got - want).abs();
        worst_map = worst_map.max(diff);
        map_fail += usize::from(diff > 1e-9);

        let mut grid: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).filter(|_| rng.gen_bool(0.6)).collect();
        if grid.is_empty() {
            grid.push(0.5);
        }
        let cfg = CalibConfig {
            beta: [0.5, 1.0, 2.0][rng.gen_range(0..3)],
            grid,
            low_threshold: [0.05, 0.2][rng.gen_range(0..2)],
            ..CalibConfig::default()
        };
        let got = fbeta_thresholds(&dets, &gts, classes, &cfg).unwrap();
        fbeta_fail += usize::from(got != oracle_fbeta(&dets, &gts, classes, &cfg));

        let k = rng.gen_range(1..=6);
        let scores: Vec<Vec<Vec<f64>>> = (0..rng.gen_range(1..=3))
            .map(|_| {
                (0..rng.gen_range(0..=8))
                    .map(|_| (0..k).map(|_| rng.gen_range(0..=20) as f64 / 20.0).collect())
                    .collect()
            })
            .collect();
        let grid = default_pmcr_grid();
        let report = pmcr_from_scores(&scores, &grid);
        for (p, &t) in report.points.iter().zip(&grid) {
            let (p1, p2) = oracle_pmcr(&scores, t);
            let ratio = (p1 > 0).then(|| p2 as f64 / p1 as f64);
            if (p.sum_p1, p.sum_p2, p.pmcr) != (p1, p2, ratio) {
                pmcr_fail += 1;
            }
        }
    }
    Outcome::new(
        map_fail == 0 && fbeta_fail == 0 && pmcr_fail == 0,
        format!(
            "{instances} instances: mAP mismatches {map_fail} (max |diff| {worst_map:.1e}), \
             F-beta threshold mismatches {fbeta_fail}, PMCR mismatches {pmcr_fail}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 3

fn exact_arithmetic() -> Outcome {
    let mut errs: Vec<String> = Vec::new();
    let mut worst = 0.0f64;
    let mut close = |name: &str, got: f64, want: f64| {
        let d = (got - want).abs();
        worst = worst.max(d);
        if d > 1e-12 {
            errs.push(format!("{name}: {got} vs {want}"));
        }
    };

    // EMA with alpha = 0.9.
    let tensor = |v: Vec<f64>| ParamSet {
        tensors: vec![Tensor {
            name: "w".into(),
            shape: vec![v.len()],
            data: v,
        }],
    };
    let mut teacher = TeacherState {
        params: tensor(vec![1.0, -2.0, 0.5]),
        thresholds: PerClassThresholds::uniform(1, 0.8, 0.2).unwrap(),
        version: 1,
        source_iteration: 0,
    };
    ema_update(&mut teacher, &tensor(vec![3.0, 4.0, 0.5]), 0.9).unwrap();
    for (got, want) in teacher.params.tensors[0].data.iter().zip([1.2, -1.4, 0.5]) {
        close("ema", *got, want);
    }

    // PMCR at t = 0.5: rows 1 and 3 fire twice, all three fire.
    let scores = vec![vec![
        vec![0.9, 0.6, 0.1],
        vec![0.7, 0.2, 0.3],
        vec![0.55, 0.52, 0.51],
        vec![0.5, 0.4, 0.3],
    ]];
    let p = pmcr_from_scores(&scores, &[0.5]);
    close("pmcr", p.points[0].pmcr.unwrap_or(f64::NAN), 2.0 / 3.0);

    // Masked classification loss: classes 0 and 1 annotated, class 2 not.
    let mask = SubSpaceMask::from_bit_string(0, "110").unwrap();
    let targets = RcnTargetMap {
        classes: vec![Some(0), None],
        matched: vec![None, None],
        mask: mask.clone(),
    };
    let s = vec![vec![0.8, 0.3, 0.9], vec![0.2, 0.1, 0.7]];
    let bce = -(0.8f64.ln() + 0.7f64.ln() + 0.8f64.ln() + 0.9f64.ln()) / 2.0;
    close("eq1 bce", loss_cls(&s, &targets, ClsLossKind::Bce).unwrap(), bce);
    let focal = -(0.2f64 * 0.2 * 0.8f64.ln()
        + 0.3f64 * 0.3 * 0.7f64.ln()
        + 0.2f64 * 0.2 * 0.8f64.ln()
        + 0.1f64 * 0.1 * 0.9f64.ln())
        / 2.0;
    close(
        "eq1 focal",
        loss_cls(&s, &targets, ClsLossKind::Focal { gamma: 2.0 }).unwrap(),
        focal,
    );

    // Pseudo losses on the unannotated class 2.
    let pt = PseudoTargetMap {
        classes: vec![2],
        states: vec![vec![PseudoState::Positive], vec![PseudoState::Negative]],
        boxes: vec![vec![None], vec![None]],
    };
    close("eq2", loss_pseudo_pos(&s, &pt).unwrap(), -(0.9f64.ln()) / 2.0);
    close("eq3", loss_pseudo_neg(&s, &pt).unwrap(), -(0.3f64.ln()) / 2.0);

    // The logit-space losses used in training agree with the score forms.
    let logits: Vec<f64> = s.iter().flatten().map(|&p| (p / (1.0 - p)).ln()).collect();
    close(
        "eq1 logits",
        cls_loss_logits(&logits, &targets, ClsLossKind::Bce, None),
        bce,
    );
    let (lp, ln) = pseudo_loss_logits(&logits, 3, &pt, None);
    close("eq2 logits", lp, -(0.9f64.ln()) / 2.0);
    close("eq3 logits", ln, -(0.3f64.ln()) / 2.0);

    let (cases, violations) = mask_isolation_fuzz(10_000);
    let ok = errs.is_empty() && violations == 0;
    let mut detail = format!(
        "fixtures max |error| {worst:.1e}; mask isolation {violations} violations in {cases} cases"
    );
    if !errs.is_empty() {
        detail.push_str(&format!("; {}", errs.join("; ")));
    }
    Outcome::new(ok, detail)
}

/// Perturbing scores outside the subspace never changes the masked loss or
/// its in-subspace gradient; perturbing scores inside never changes the
/// pseudo losses.
fn mask_isolation_fuzz(cases: usize) -> (usize, usize) {
    let mut rng = StdRng::seed_from_u64(77);
    let mut violations = 0;
    for _ in 0..cases {
        let k = rng.gen_range(2..=8);
        let mut bits: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
        bits[0] = true;
        bits[k - 1] = false;
        let mask = SubSpaceMask::new(0, bits.clone()).unwrap();
        let members = mask.members();
        let complement = mask.complement_members();
        let n = rng.gen_range(1..=6);
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.gen_range(0.01..0.99)).collect())
            .collect();
        let targets = RcnTargetMap {
            classes: (0..n)
                .map(|_| rng.gen_bool(0.5).then(|| members[rng.gen_range(0..members.len())]))
                .collect(),
            matched: vec![None; n],
            mask: mask.clone(),
        };
        let pt = PseudoTargetMap {
            classes: complement.clone(),
            states: (0..n)
                .map(|_| {
                    complement
                        .iter()
                        .map(|_| match rng.gen_range(0..3) {
                            0 => PseudoState::Positive,
                            1 => PseudoState::Negative,
                            _ => PseudoState::Ignore,
                        })
                        .collect()
                })
                .collect(),
            boxes: vec![vec![None; complement.len()]; n],
        };
        let kind = if rng.gen_bool(0.5) {
            ClsLossKind::Bce
        } else {
            ClsLossKind::Focal { gamma: 2.0 }
        };
        let perturb = |inside: bool, rng: &mut StdRng| -> Vec<Vec<f64>> {
            scores
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(c, &v)| if bits[c] == inside { rng.gen_range(0.01..0.99) } else { v })
                        .collect()
                })
                .collect()
        };
        let base_cls = loss_cls(&scores, &targets, kind).unwrap();
        let base_pos = loss_pseudo_pos(&scores, &pt).unwrap();
        let base_neg = loss_pseudo_neg(&scores, &pt).unwrap();
        let outside = perturb(false, &mut rng);
        let inside = perturb(true, &mut rng);
        if loss_cls(&outside, &targets, kind).unwrap() != base_cls {
            violations += 1;
        }
        if loss_pseudo_pos(&inside, &pt).unwrap() != base_pos || loss_pseudo_neg(&inside, &pt).unwrap() != base_neg {
            violations += 1;
        }

        let to_logits = |s: &[Vec<f64>]| -> Vec<f64> { s.iter().flatten().map(|&p| (p / (1.0 - p)).ln()).collect() };
        let mut g_cls = vec![0.0; n * k];
        cls_loss_logits(&to_logits(&scores), &targets, kind, Some((&mut g_cls, 1.0)));
        let mut g_cls_out = vec![0.0; n * k];
        cls_loss_logits(&to_logits(&outside), &targets, kind, Some((&mut g_cls_out, 1.0)));
        let mut g_ps = vec![0.0; n * k];
        pseudo_loss_logits(&to_logits(&scores), k, &pt, Some((&mut g_ps, 1.0, 1.0)));
        for r in 0..n {
            for c in 0..k {
                let i = r * k + c;
                let leak = if bits[c] { g_ps[i] != 0.0 } else { g_cls[i] != 0.0 };
                if leak || g_cls[i] != g_cls_out[i] {
                    violations += 1;
                }
            }
        }
    }
    (cases, violations)
}

// ---------------------------------------------------------------------------
// Criterion 11

fn determinism_and_persistence() -> Outcome {
    let bundle = common::small_bundle(40, 11);
    let tmp = tempfile::tempdir().unwrap();
    let dir = |n: &str| tmp.path().join(n);
    let mut notes = Vec::new();
    let mut ok = true;

    for scheme in [Scheme::OplPeriodic, Scheme::OfflinePseudo] {
        let cfg = common::short_config(scheme, 30);
        let name = scheme.name();
        let a = dir(&format!("{name}-a"));
        let b = dir(&format!("{name}-b"));
        let r = dir(&format!("{name}-resumed"));
        let run = |d: &Path, o: RunOptions| run_with_bundle(&cfg, &bundle, &RunOptions { out_dir: Some(d.into()), ..o });
        if let Err(e) = run(&a, RunOptions::default()).and(run(&b, RunOptions::default())) {
            return Outcome::new(false, format!("{name}: {e}"));
        }
        let stop = if scheme == Scheme::OfflinePseudo { (2, 10) } else { (1, 20) };
        let resumed = run(
            &r,
            RunOptions {
                stop_at: Some(stop),
                ..RunOptions::default()
            },
        )
        .and_then(|_| {
            run(
                &r,
                RunOptions {
                    resume: true,
                    ..RunOptions::default()
                },
            )
        });
        if let Err(e) = resumed {
            return Outcome::new(false, format!("{name} resume: {e}"));
        }
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap_or_default();
        let same_metrics = read(&a, METRICS_FILE) == read(&b, METRICS_FILE) && !read(&a, METRICS_FILE).is_empty();
        let final_ck = format!("{CHECKPOINT_DIR}/{FINAL_CHECKPOINT}");
        let same_ck = read(&a, &final_ck) == read(&b, &final_ck);
        let resume_same = read(&a, METRICS_FILE) == read(&r, METRICS_FILE) && read(&a, &final_ck) == read(&r, &final_ck);
        ok &= same_metrics && same_ck && resume_same;
        notes.push(format!(
            "{name}: metrics identical {same_metrics}, checkpoints identical {same_ck}, resume identical {resume_same}"
        ));
    }

    let ck_path = dir("opl_periodic-a").join(CHECKPOINT_DIR).join(LAST_CHECKPOINT);
    let roundtrip = (|| -> uodlab::Result<bool> {
        let bytes = fs::read(&ck_path).map_err(|e| uodlab::Error::Invalid(e.to_string()))?;
        let ck = Checkpoint::decode(&bytes, &ck_path)?;
        let copy = dir("copy.uodl");
        ck.save(&copy)?;
        let again = Checkpoint::load(&copy)?;
        let (state, digest) = TrainState::from_checkpoint(&again, &copy)?;
        let rebuilt = state.to_checkpoint(&again.scheme, &digest);
        let student = load_params(&copy, "student", &state.student)?;
        let bits = |p: &ParamSet| -> Vec<u64> { p.tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect() };
        Ok(ck == again
            && fs::read(&copy).map_err(|e| uodlab::Error::Invalid(e.to_string()))? == bytes
            && rebuilt.encode() == bytes
            && bits(&student) == bits(ck.group("student").expect("student group")))
    })();
    let rt = matches!(roundtrip, Ok(true));
    ok &= rt;
    notes.push(format!("checkpoint round trip bit-exact {rt}"));
    Outcome::new(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------
// Trend criteria

const SEEDS: [u64; 3] = [0, 1, 2];

fn runs_root() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let target = exe.ancestors().nth(3).map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    target.join("acceptance-runs")
}

struct Lab {
    bundles: BTreeMap<String, DatasetBundle>,
    runs: BTreeMap<String, RunRecord>,
}

impl Lab {
    fn new() -> Self {
        Self {
            bundles: BTreeMap::new(),
            runs: BTreeMap::new(),
        }
    }

    fn bundle(&mut self, name: &str, data: &DataConfig) -> uodlab::Result<()> {
        if !self.bundles.contains_key(name) {
            self.bundles.insert(name.to_string(), build_bundle(data)?);
        }
        Ok(())
    }

    /// Run (or reuse) one experiment on a named bundle.
    fn run(&mut self, bundle: &str, tag: &str, cfg: &ExperimentConfig) -> uodlab::Result<&RunRecord> {
        let key = format!("{bundle}/{tag}-seed{}", cfg.seed);
        if !self.runs.contains_key(&key) {
            let out = runs_root().join(&key);
            if let Some(rec) = reuse_finished(&out, cfg, &self.bundles[bundle]) {
                let p = rec.final_point().expect("eval points");
                eprintln!("  {key}: reused, mAP {:.4}", p.val.map);
                self.runs.insert(key.clone(), rec);
                return Ok(&self.runs[&key]);
            }
            let start = Instant::now();
            let _ = fs::remove_dir_all(&out);
            let rec = run_with_bundle(
                cfg,
                &self.bundles[bundle],
                &RunOptions {
                    out_dir: Some(out),
                    ..RunOptions::default()
                },
            )?;
            let p = rec.final_point().expect("eval points");
            eprintln!(
                "  {key}: mAP {:.4} RPN recall {:.4} PMCR {:?} ({:.0}s)",
                p.val.map,
                p.val.rpn_recall,
                p.val.pmcr,
                start.elapsed().as_secs_f64()
            );
            self.runs.insert(key.clone(), rec);
        }
        Ok(&self.runs[&key])
    }

    fn final_values(
        &mut self,
        bundle: &str,
        tag: &str,
        base: &ExperimentConfig,
        metric: fn(&RunRecord) -> f64,
    ) -> uodlab::Result<Vec<f64>> {
        let mut out = Vec::new();
        for s in SEEDS {
            let mut cfg = base.clone();
            cfg.seed = s;
            out.push(metric(self.run(bundle, tag, &cfg)?));
        }
        Ok(out)
    }
}

/// A finished run on disk with the same config and dataset, rebuilt from
/// its `run.json` and `metrics.jsonl`.
fn reuse_finished(dir: &Path, cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Option<RunRecord> {
    let run = load_run(dir).ok()?.ok()?;
    let meta = run.meta;
    let same = meta.completed
        && meta.config == *cfg
        && meta.dataset_hash == bundle_fingerprint(bundle)
        && meta.final_point.as_ref() == run.points.last();
    same.then(|| RunRecord {
        label: meta.label,
        dataset_hash: meta.dataset_hash,
        phases: meta.phases,
        points: run.points,
        teacher_events: meta.teacher_events,
        step_losses: Vec::new(),
        completed: true,
    })
}

fn final_map(r: &RunRecord) -> f64 {
    r.final_point().map_or(f64::NAN, |p| p.val.map)
}

fn final_recall(r: &RunRecord) -> f64 {
    r.final_point().map_or(f64::NAN, |p| p.val.rpn_recall)
}

fn final_pmcr(r: &RunRecord) -> f64 {
    r.final_point().and_then(|p| p.val.pmcr).unwrap_or(0.0)
}

const SPLIT: &str = "split3";
const FULL: &str = "full";

fn trend_config(scheme: Scheme) -> ExperimentConfig {
    ExperimentConfig::for_scheme(scheme)
}

fn split_data() -> DataConfig {
    DataConfig::default()
}

fn full_data() -> DataConfig {
    DataConfig {
        full_labels: true,
        ..DataConfig::default()
    }
}

fn category_data(names: &[&str]) -> DataConfig {
    DataConfig {
        full_labels: true,
        categories: Some(names.iter().map(|s| s.to_string()).collect()),
        ..DataConfig::default()
    }
}

fn nested_pair_categories() -> Vec<&'static str> {
    let mut ids: Vec<usize> = NESTED_PAIRS.iter().flat_map(|&(a, b)| [a, b]).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().map(|i| TAXONOMY[i]).collect()
}

fn background_ambiguity(lab: &mut Lab) -> uodlab::Result<Outcome> {
    lab.bundle(SPLIT, &split_data())?;
    lab.bundle(FULL, &full_data())?;
    let base = lab.final_values(SPLIT, "baseline", &trend_config(Scheme::Baseline), final_map)?;
    let full = lab.final_values(FULL, "baseline", &trend_config(Scheme::Baseline), final_map)?;
    let gap = median(&full) - median(&base);
    Ok(Outcome::new(
        gap >= 0.02,
        format!(
            "full-label median mAP {:.4} {} vs masked baseline {:.4} {}, gap {gap:+.4} (need >= +0.02)",
            median(&full),
            fmt_list(&full),
            median(&base),
            fmt_list(&base)
        ),
    ))
}

fn pseudo_labels_recover(lab: &mut Lab) -> uodlab::Result<Outcome> {
    lab.bundle(SPLIT, &split_data())?;
    let base = lab.final_values(SPLIT, "baseline", &trend_config(Scheme::Baseline), final_map)?;
    let opl = lab.final_values(SPLIT, "opl_periodic", &trend_config(Scheme::OplPeriodic), final_map)?;
    let off = lab.final_values(SPLIT, "offline_pseudo", &trend_config(Scheme::OfflinePseudo), final_map)?;
    let (b, o, f) = (median(&base), median(&opl), median(&off));
    Ok(Outcome::new(
        o > b && f > b,
        format!(
            "median mAP: OPL {o:.4} {} ({:+.4}), offline {f:.4} {} ({:+.4}), baseline {b:.4} {}",
            fmt_list(&opl),
            o - b,
            fmt_list(&off),
            f - b,
            fmt_list(&base)
        ),
    ))
}

fn periodic_beats_ema(lab: &mut Lab) -> uodlab::Result<Outcome> {
    lab.bundle(SPLIT, &split_data())?;
    let opl = lab.final_values(SPLIT, "opl_periodic", &trend_config(Scheme::OplPeriodic), final_map)?;
    let ema = lab.final_values(SPLIT, "online_ema", &trend_config(Scheme::OnlineEma), final_map)?;
    let gap = median(&opl) - median(&ema);
    Ok(Outcome::new(
        gap >= -0.005,
        format!(
            "median mAP OPL {:.4} {} vs EMA {:.4} {}, gap {gap:+.4} (tolerance -0.005)",
            median(&opl),
            fmt_list(&opl),
            median(&ema),
            fmt_list(&ema)
        ),
    ))
}

/// `mAP(cycle end) - mAP(cycle midpoint)` for every cycle after burn-in.
fn cycle_gains(rec: &RunRecord, cfg: &ExperimentConfig) -> Vec<f64> {
    let lr = cfg.lr_config();
    if lr.kind != LrKind::CosineCyclic {
        return Vec::new();
    }
    let c = lr.cycle_length;
    let burn_in = cfg.teacher.clone().unwrap_or_default().burn_in_cycles.max(1);
    let map_at = |it: u64| rec.points.iter().find(|p| p.iteration == it).map(|p| p.val.map);
    (burn_in..lr.cycles)
        .filter_map(|k| Some(map_at((k + 1) * c)? - map_at(k * c + c / 2)?))
        .collect()
}

fn teacher_local_maxima(lab: &mut Lab) -> uodlab::Result<Outcome> {
    lab.bundle(SPLIT, &split_data())?;
    let base = trend_config(Scheme::OplPeriodic);
    let mut gains = Vec::new();
    for s in SEEDS {
        let mut cfg = base.clone();
        cfg.seed = s;
        let rec = lab.run(SPLIT, "opl_periodic", &cfg)?;
        gains.extend(cycle_gains(rec, &cfg));
    }
    if gains.is_empty() {
        return Ok(Outcome::new(false, "no cycle after burn-in has both snapshots"));
    }
    let m = median(&gains);
    Ok(Outcome::new(
        m >= 0.0,
        format!(
            "median end-minus-midpoint mAP {m:+.4} over {} cycles {}",
            gains.len(),
            fmt_list(&gains)
        ),
    ))
}

fn pmcr_grows_with_categories(lab: &mut Lab) -> uodlab::Result<Outcome> {
    let sets: [(&str, Vec<&str>); 3] = [
        ("cats12", TAXONOMY.to_vec()),
        ("cats6", vec!["agent", "agent-head", "cart", "cart-wheel", "disc", "ring"]),
        ("cats3", vec!["agent", "cart", "disc"]),
    ];
    let mut medians = Vec::new();
    let mut lines = Vec::new();
    for (name, cats) in &sets {
        lab.bundle(name, &category_data(cats))?;
        let v = lab.final_values(name, "baseline", &trend_config(Scheme::Baseline), final_pmcr)?;
        medians.push(median(&v));
        lines.push(format!("{}: {:.4} {}", cats.len(), median(&v), fmt_list(&v)));
    }
    Ok(Outcome::new(
        medians[0] >= medians[1] && medians[1] >= medians[2],
        format!("median PMCR at t=0.5 by category count {}", lines.join(", ")),
    ))
}

fn category_specific_box(lab: &mut Lab) -> uodlab::Result<Outcome> {
    let cats = nested_pair_categories();
    lab.bundle("pairs", &category_data(&cats))?;
    let shared = lab.final_values("pairs", "shared", &trend_config(Scheme::Baseline), final_map)?;
    let mut cs = trend_config(Scheme::Baseline);
    cs.category_specific_box = true;
    let specific = lab.final_values("pairs", "category_specific", &cs, final_map)?;
    let gap = median(&specific) - median(&shared);
    Ok(Outcome::new(
        gap >= -0.005,
        format!(
            "{} nested-pair categories: category-specific {:.4} {} vs shared {:.4} {}, gap {gap:+.4} (tolerance -0.005)",
            cats.len(),
            median(&specific),
            fmt_list(&specific),
            median(&shared),
            fmt_list(&shared)
        ),
    ))
}

fn pseudo_label_rpn(lab: &mut Lab) -> uodlab::Result<Outcome> {
    lab.bundle(SPLIT, &split_data())?;
    let std_cfg = trend_config(Scheme::OplPeriodic);
    let mut prpn = std_cfg.clone();
    prpn.pseudo_rpn = true;
    let r_std = lab.final_values(SPLIT, "opl_periodic", &std_cfg, final_recall)?;
    let m_std = lab.final_values(SPLIT, "opl_periodic", &std_cfg, final_map)?;
    let r_p = lab.final_values(SPLIT, "opl_periodic_prpn", &prpn, final_recall)?;
    let m_p = lab.final_values(SPLIT, "opl_periodic_prpn", &prpn, final_map)?;
    let dr = median(&r_p) - median(&r_std);
    let dm = median(&m_p) - median(&m_std);
    Ok(Outcome::new(
        dr >= 0.0 && dm.abs() <= 0.02,
        format!(
            "median RPN recall {:.4} vs {:.4} ({dr:+.4}); median mAP {:.4} vs {:.4} ({dm:+.4}, need within 0.02)",
            median(&r_p),
            median(&r_std),
            median(&m_p),
            median(&m_std)
        ),
    ))
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, Box<dyn Fn(&mut Lab) -> Outcome>);

fn trend(f: fn(&mut Lab) -> uodlab::Result<Outcome>) -> Box<dyn Fn(&mut Lab) -> Outcome> {
    Box::new(move |lab| f(lab).unwrap_or_else(|e| Outcome::new(false, format!("error: {e}"))))
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("UODLAB_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: Vec<Criterion> = vec![
        (1, "gradient correctness", Box::new(|_| gradient_correctness())),
        (2, "evaluation oracles", Box::new(|_| evaluation_oracles())),
        (3, "exact arithmetic and mask isolation", Box::new(|_| exact_arithmetic())),
        (4, "background ambiguity", trend(background_ambiguity)),
        (5, "pseudo-labels recover accuracy", trend(pseudo_labels_recover)),
        (6, "periodic teacher vs EMA", trend(periodic_beats_ema)),
        (7, "teacher local maxima", trend(teacher_local_maxima)),
        (8, "PMCR grows with category count", trend(pmcr_grows_with_categories)),
        (9, "category-specific box regression", trend(category_specific_box)),
        (10, "pseudo-label RPN", trend(pseudo_label_rpn)),
        (11, "determinism and persistence", Box::new(|_| determinism_and_persistence())),
    ];
    let mut lab = Lab::new();
    let mut failed = Vec::new();
    for (id, name, f) in &criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(id)) {
            continue;
        }
        let start = Instant::now();
        let o = f(&mut lab);
        println!(
            "criterion {id:>2} {} {name}: {} [{:.0}s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.passed {
            failed.push(*id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
