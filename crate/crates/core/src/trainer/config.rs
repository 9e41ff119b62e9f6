use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClsLossKind, LossWeights};
use crate::model::{ArchConfig, BoxMode, GraphConfig, SgdConfig};
use crate::pseudolabel::CalibConfig;
use crate::schedule::{LrConfig, PolicyKind, TeacherPolicy};
use crate::synthdata::StrongAugConfig;
use crate::targets::{RpnMode, SamplingConfig};
use crate::util::read_json;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Baseline,
    BaselineFocal,
    OfflinePseudo,
    OnlineEma,
    OplPeriodic,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::BaselineFocal => "baseline_focal",
            Scheme::OfflinePseudo => "offline_pseudo",
            Scheme::OnlineEma => "online_ema",
            Scheme::OplPeriodic => "opl_periodic",
        }
    }

    pub fn default_policy(self) -> PolicyKind {
        match self {
            Scheme::OnlineEma => PolicyKind::Ema,
            Scheme::OplPeriodic => PolicyKind::Periodic,
            _ => PolicyKind::None,
        }
    }

    pub fn is_online(self) -> bool {
        matches!(self, Scheme::OnlineEma | Scheme::OplPeriodic)
    }

    pub fn uses_pseudo_labels(self) -> bool {
        self.is_online() || self == Scheme::OfflinePseudo
    }
}

/// One experiment, fully specified by a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scheme: Scheme,
    /// Train the RPN on pseudo boxes as well as ground truth.
    pub pseudo_rpn: bool,
    pub category_specific_box: bool,
    pub focal: bool,
    pub focal_gamma: f64,
    /// Regress boxes toward high-tier pseudo boxes.
    pub pseudo_box: bool,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_interval: u64,
    /// Defaults to a cosine cyclic schedule of three cycles for
    /// `opl_periodic` and to a step schedule otherwise, both spanning
    /// `iterations`.
    pub lr: Option<LrConfig>,
    /// Overrides the scheme's default teacher policy.
    pub teacher: Option<TeacherPolicy>,
    pub dataset_dir: Option<PathBuf>,
    /// Offline scheme: load the teacher from this checkpoint instead of
    /// training it in a first phase.
    pub offline_teacher: Option<PathBuf>,
    pub calib: CalibConfig,
    pub sampling: SamplingConfig,
    pub sgd: SgdConfig,
    pub loss_weights: LossWeights,
    pub strong_aug: StrongAugConfig,
    pub arch: ArchConfig,
    pub pmcr_threshold: f64,
    /// Keep a checkpoint for every eval point, not just the latest.
    pub keep_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            scheme: Scheme::Baseline,
            pseudo_rpn: false,
            category_specific_box: false,
            focal: false,
            focal_gamma: 2.0,
            pseudo_box: false,
            iterations: 6000,
            batch_size: 4,
            seed: 0,
            eval_interval: 500,
            lr: None,
            teacher: None,
            dataset_dir: None,
            offline_teacher: None,
            calib: CalibConfig::default(),
            sampling: SamplingConfig::default(),
            sgd: SgdConfig::default(),
            loss_weights: LossWeights::default(),
            strong_aug: StrongAugConfig::default(),
            arch: ArchConfig::default(),
            pmcr_threshold: 0.5,
            keep_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn for_scheme(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    /// Parse a config file. Every failure is a configuration error.
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path).map_err(|e| match e {
            Error::Io { path, source } => {
                Error::Config(format!("cannot read {}: {source}", path.display()))
            }
            other => Error::Config(other.to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lr_config(&self) -> LrConfig {
        if let Some(lr) = &self.lr {
            return lr.clone();
        }
        let d = LrConfig::default();
        let t = self.iterations;
        if self.scheme == Scheme::OplPeriodic {
            LrConfig::cosine(d.lr_max, d.lr_min, (t / 3).max(2), 3)
        } else {
            LrConfig::step(d.lr_max, vec![t * 2 / 3, t * 11 / 12])
        }
    }

    pub fn policy(&self) -> TeacherPolicy {
        self.teacher
            .clone()
            .unwrap_or_else(|| TeacherPolicy::of(self.scheme.default_policy()))
    }

    pub fn cls_loss(&self) -> ClsLossKind {
        if self.focal || self.scheme == Scheme::BaselineFocal {
            ClsLossKind::Focal {
                gamma: self.focal_gamma,
            }
        } else {
            ClsLossKind::Bce
        }
    }

    pub fn box_mode(&self) -> BoxMode {
        if self.category_specific_box {
            BoxMode::CategorySpecific
        } else {
            BoxMode::Shared
        }
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            sampling: self.sampling,
            rpn_mode: if self.pseudo_rpn {
                RpnMode::PseudoRpn
            } else {
                RpnMode::Standard
            },
            cls_loss: self.cls_loss(),
            pseudo_box: self.pseudo_box,
            weights: self.loss_weights,
        }
    }

    /// Architecture for a label space of `num_classes` and an image side.
    pub fn arch_for(&self, num_classes: usize, image_size: usize) -> ArchConfig {
        ArchConfig {
            num_classes,
            image_size,
            box_mode: self.box_mode(),
            ..self.arch.clone()
        }
    }

    /// Short label used to group runs in comparisons.
    pub fn label(&self) -> String {
        let mut s = self.scheme.name().to_string();
        if self.focal && self.scheme != Scheme::BaselineFocal {
            s.push_str("+focal");
        }
        if self.pseudo_rpn {
            s.push_str("+prpn");
        }
        if self.category_specific_box {
            s.push_str("+mbox");
        }
        if self.pseudo_box {
            s.push_str("+pbox");
        }
        let p = self.policy().kind;
        if p != self.scheme.default_policy() {
            s.push_str(match p {
                PolicyKind::None => "+no_teacher",
                PolicyKind::Ema => "+ema",
                PolicyKind::Periodic => "+periodic",
            });
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return bad("iterations, batch_size and eval_interval must be positive".into());
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return bad("focal_gamma must be a non-negative number".into());
        }
        if !(self.pmcr_threshold > 0.0 && self.pmcr_threshold < 1.0) {
            return bad("pmcr_threshold must lie in (0, 1)".into());
        }
        let lr = self.lr_config();
        lr.validate()?;
        let policy = self.policy();
        policy.validate(&lr)?;
        let allowed = match self.scheme {
            Scheme::Baseline | Scheme::BaselineFocal | Scheme::OfflinePseudo => {
                policy.kind == PolicyKind::None
            }
            s => policy.kind == PolicyKind::None || policy.kind == s.default_policy(),
        };
        if !allowed {
            return bad(format!(
                "teacher policy {:?} is not available for scheme {}",
                policy.kind,
                self.scheme.name()
            ));
        }
        if (self.pseudo_rpn || self.pseudo_box) && !self.scheme.uses_pseudo_labels() {
            return bad(format!(
                "pseudo_rpn and pseudo_box need a pseudo-label scheme, not {}",
                self.scheme.name()
            ));
        }
        if self.offline_teacher.is_some() && self.scheme != Scheme::OfflinePseudo {
            return bad("offline_teacher is only meaningful for offline_pseudo".into());
        }
        let s = &self.sampling;
        if s.rpn_batch == 0 || s.rcn_batch == 0 || s.train_proposals == 0 {
            return bad("sampling batch sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&s.rpn_positive_fraction) || !(0.0..=1.0).contains(&s.rcn_positive_fraction) {
            return bad("sampling fractions must lie in [0, 1]".into());
        }
        if !(self.sgd.momentum >= 0.0 && self.sgd.momentum < 1.0 && self.sgd.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        self.calib.validate()?;
        Ok(())
    }
}
