//! Central finite-difference verification of the analytic gradients.

use serde::{Deserialize, Serialize};

use super::arch::ArchConfig;
use super::graph::{GraphConfig, ImagePlan};
use super::network::Network;
use super::params::{Gradients, ModelParameters, ParamSet};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub samples_per_layer: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Redraws allowed per sample when a step crosses a ReLU kink.
    pub max_redraws: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_layer: 100,
            floor: 1e-6,
            max_redraws: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub layers: Vec<LayerSummary>,
    pub kink_redraws: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.entries.iter().all(|e| e.rel_err <= tolerance)
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(l, _)| l)
}

fn mean_loss(arch: &ArchConfig, params: &ModelParameters, plans: &[ImagePlan], cfg: &GraphConfig) -> Result<(f64, Vec<u64>)> {
    let net = Network::new(arch, params)?;
    let mut total = 0.0;
    let mut patterns = Vec::with_capacity(plans.len());
    for p in plans {
        let (l, pat) = net.plan_loss_and_pattern(p, cfg);
        total += l.total;
        patterns.push(pat);
    }
    Ok((total / plans.len() as f64, patterns))
}

/// Batch-mean analytic gradients of frozen plans.
pub fn plan_batch_gradients(
    arch: &ArchConfig,
    params: &ModelParameters,
    plans: &[ImagePlan],
    cfg: &GraphConfig,
) -> Result<Gradients> {
    if plans.is_empty() {
        return Err(Error::Empty("gradient-check plans"));
    }
    let net = Network::new(arch, params)?;
    let mut g = ParamSet::zeros_like(params);
    for p in plans {
        let (_, gp) = net.plan_gradients(p, cfg)?;
        g.add_assign(&gp);
    }
    g.scale(1.0 / plans.len() as f64);
    Ok(g)
}

/// Compare analytic gradients with central differences on
/// `samples_per_layer` randomly drawn entries of every layer (weights and
/// bias together). Entries whose perturbation flips any ReLU are redrawn.
pub fn check_gradients(
    arch: &ArchConfig,
    params: &ModelParameters,
    plans: &[ImagePlan],
    cfg: &GraphConfig,
    check: &GradCheckConfig,
    rng: &mut SplitMix64,
) -> Result<GradCheckReport> {
    let analytic = plan_batch_gradients(arch, params, plans, cfg)?;
    let (_, base_pattern) = mean_loss(arch, params, plans, cfg)?;

    let mut layers: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for (ti, t) in params.tensors.iter().enumerate() {
        let l = layer_of(&t.name).to_string();
        let slots: Vec<(usize, usize)> = (0..t.len()).map(|j| (ti, j)).collect();
        match layers.iter_mut().find(|(n, _)| *n == l) {
            Some((_, v)) => v.extend(slots),
            None => layers.push((l, slots)),
        }
    }

    let mut work = params.clone();
    let mut entries = Vec::new();
    let mut summaries = Vec::new();
    let mut kink_redraws = 0;
    for (layer, slots) in &layers {
        let mut order: Vec<usize> = (0..slots.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(rng);
        }
        let mut next = 0usize;
        let mut draw = |rng: &mut SplitMix64| {
            let i = if next < order.len() {
                order[next]
            } else {
                (rng.next() % slots.len() as u64) as usize
            };
            next += 1;
            slots[i]
        };
        let mut max_rel = 0.0f64;
        for _ in 0..check.samples_per_layer {
            let mut redraws = 0;
            let entry = loop {
                let (ti, j) = draw(rng);
                let orig = work.tensors[ti].data[j];
                work.tensors[ti].data[j] = orig + check.step;
                let (lp, pp) = mean_loss(arch, &work, plans, cfg)?;
                work.tensors[ti].data[j] = orig - check.step;
                let (lm, pm) = mean_loss(arch, &work, plans, cfg)?;
                work.tensors[ti].data[j] = orig;
                if (pp != base_pattern || pm != base_pattern) && redraws < check.max_redraws {
                    redraws += 1;
                    kink_redraws += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * check.step);
                let a = analytic.tensors[ti].data[j];
                break GradCheckEntry {
                    tensor: params.tensors[ti].name.clone(),
                    index: j,
                    analytic: a,
                    numeric,
                    rel_err: relative_error(a, numeric, check.floor),
                };
            };
            max_rel = max_rel.max(entry.rel_err);
            entries.push(entry);
        }
        summaries.push(LayerSummary {
            layer: layer.clone(),
            checked: check.samples_per_layer,
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport {
        entries,
        layers: summaries,
        kink_redraws,
    })
}
