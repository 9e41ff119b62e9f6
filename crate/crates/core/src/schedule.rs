//! Learning-rate schedules and teacher-update policies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::pseudolabel::PerClassThresholds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Step,
    CosineCyclic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrConfig {
    pub kind: LrKind,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Step schedule: iterations at which the rate is multiplied by `decay`.
    pub milestones: Vec<u64>,
    pub decay: f64,
    /// Cosine schedule: iterations per cycle.
    pub cycle_length: u64,
    pub cycles: u64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            kind: LrKind::CosineCyclic,
            lr_max: 0.01,
            lr_min: 1e-4,
            milestones: vec![4000, 5500],
            decay: 0.1,
            cycle_length: 2000,
            cycles: 3,
        }
    }
}

impl LrConfig {
    pub fn step(lr_max: f64, milestones: Vec<u64>) -> Self {
        Self {
            kind: LrKind::Step,
            lr_max,
            milestones,
            ..Self::default()
        }
    }

    pub fn cosine(lr_max: f64, lr_min: f64, cycle_length: u64, cycles: u64) -> Self {
        Self {
            kind: LrKind::CosineCyclic,
            lr_max,
            lr_min,
            cycle_length,
            cycles,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr_max) || self.lr_min < 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.kind == LrKind::CosineCyclic && self.cycle_length < 2 {
            return Err(Error::Config("cycle_length must be at least 2".into()));
        }
        Ok(())
    }
}

pub fn lr_at(i: u64, config: &LrConfig) -> f64 {
    match config.kind {
        LrKind::Step => {
            let passed = config.milestones.iter().filter(|&&m| m <= i).count() as i32;
            config.lr_max * config.decay.powi(passed)
        }
        LrKind::CosineCyclic => {
            let c = config.cycle_length;
            let phase = (i % c) as f64 / c as f64;
            config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + (PI * phase).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    None,
    Ema,
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherPolicy {
    pub kind: PolicyKind,
    pub alpha: f64,
    /// EMA: the teacher is created after this fraction of all iterations.
    pub ema_burn_in_fraction: f64,
    /// Periodic: the teacher is created at the end of this cycle.
    pub burn_in_cycles: u64,
    pub recalibrate_on_update: bool,
    /// EMA: iterations between threshold recalibrations.
    pub ema_recalibrate_every: u64,
}

impl Default for TeacherPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::None,
            alpha: 0.9996,
            ema_burn_in_fraction: 1.0 / 3.0,
            burn_in_cycles: 1,
            recalibrate_on_update: true,
            ema_recalibrate_every: 500,
        }
    }
}

impl TeacherPolicy {
    pub fn of(kind: PolicyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self, lr: &LrConfig) -> Result<()> {
        match self.kind {
            PolicyKind::Ema if !(self.alpha > 0.0 && self.alpha < 1.0) => {
                Err(Error::Config(format!("EMA alpha {} outside (0, 1)", self.alpha)))
            }
            PolicyKind::Ema if self.ema_recalibrate_every == 0 => {
                Err(Error::Config("ema_recalibrate_every must be positive".into()))
            }
            PolicyKind::Periodic if lr.kind != LrKind::CosineCyclic => Err(Error::Config(
                "the periodic teacher needs a cosine cyclic schedule".into(),
            )),
            PolicyKind::Periodic if self.burn_in_cycles == 0 => {
                Err(Error::Config("burn_in_cycles must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// First iteration after which the teacher exists.
    pub fn ema_burn_in(&self, total_iterations: u64) -> u64 {
        ((total_iterations as f64 * self.ema_burn_in_fraction).floor() as u64).max(1)
    }
}

/// Teacher weights, thresholds and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub params: ModelParameters,
    pub thresholds: PerClassThresholds,
    pub version: u64,
    /// Student iteration the weights were last taken from.
    pub source_iteration: u64,
}

/// `w_T <- alpha * w_T + (1 - alpha) * w_S` for every parameter.
pub fn ema_update(teacher: &mut TeacherState, student: &ModelParameters, alpha: f64) -> Result<()> {
    teacher.params.check_layout(student)?;
    let beta = 1.0 - alpha;
    for (t, s) in teacher.params.tensors.iter_mut().zip(&student.tensors) {
        for (wt, ws) in t.data.iter_mut().zip(&s.data) {
            *wt = alpha * *wt + beta * ws;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherAction {
    None,
    InitTeacher,
    EmaUpdate { recalibrate: bool },
    ReplaceTeacher { recalibrate: bool },
}

/// What to do with the teacher after training step `i`.
pub fn policy_action(i: u64, policy: &TeacherPolicy, lr: &LrConfig, total_iterations: u64) -> TeacherAction {
    match policy.kind {
        PolicyKind::None => TeacherAction::None,
        PolicyKind::Periodic => {
            let c = lr.cycle_length.max(1);
            if (i + 1) % c != 0 {
                return TeacherAction::None;
            }
            let cycle = (i + 1) / c;
            if cycle < policy.burn_in_cycles {
                TeacherAction::None
            } else if cycle == policy.burn_in_cycles {
                TeacherAction::InitTeacher
            } else {
                TeacherAction::ReplaceTeacher {
                    recalibrate: policy.recalibrate_on_update,
                }
            }
        }
        PolicyKind::Ema => {
            let b = policy.ema_burn_in(total_iterations);
            match (i + 1).cmp(&b) {
                std::cmp::Ordering::Less => TeacherAction::None,
                std::cmp::Ordering::Equal => TeacherAction::InitTeacher,
                std::cmp::Ordering::Greater => TeacherAction::EmaUpdate {
                    recalibrate: (i + 1 - b) % policy.ema_recalibrate_every.max(1) == 0,
                },
            }
        }
    }
}
