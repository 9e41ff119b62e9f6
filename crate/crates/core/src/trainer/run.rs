use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_params, Checkpoint};
use super::config::{ExperimentConfig, Scheme};
use super::sampler::{sample_batch, Batch, SamplerState};
use crate::error::{CheckpointError, Error, Result};
use crate::eval::{evaluate_model, RECALL_IOU};
use crate::image::Image;
use crate::losses::LossBreakdown;
use crate::model::{
    init_params, sgd_step, ArchConfig, DetectConfig, GraphConfig, ModelParameters, Network, ParamSet,
    TrainSample,
};
use crate::pseudolabel::{
    filter_dual, pseudo_file_name, search_fbeta_thresholds, transform_pseudo, write_pseudo_file,
    PerClassThresholds, PseudoLabelSet,
};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::schedule::{ema_update, lr_at, policy_action, PolicyKind, TeacherAction, TeacherPolicy, TeacherState};
use crate::synthdata::{
    bundle_fingerprint, draw_record, read_dataset_dir, Annotation, AugMode, DatasetBundle,
};
use crate::util::{write_atomic, write_json};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.uodl";
pub const FINAL_CHECKPOINT: &str = "final.uodl";
pub const OFFLINE_TEACHER_CHECKPOINT: &str = "offline_teacher.uodl";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";
pub const RUN_SCHEMA_VERSION: u32 = 1;

/// Validation metrics of one model snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub rpn_recall: f64,
    pub pmcr_threshold: f64,
    pub pmcr: Option<f64>,
    pub pmcr_sum_p1: usize,
    pub pmcr_sum_p2: usize,
    pub num_detections: usize,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub phase: u32,
    pub iteration: u64,
    pub lr: f64,
    /// Mean loss over the steps since the previous eval point.
    pub loss: LossBreakdown,
    pub steps: u64,
    pub val: ValMetrics,
    pub teacher_version: Option<u64>,
    pub high_thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEvent {
    pub phase: u32,
    /// Number of completed student steps when the event happened.
    pub iteration: u64,
    pub action: TeacherAction,
    pub version: u64,
    pub high_thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseRole {
    /// Produces the frozen teacher of the offline scheme.
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: u32,
    pub role: PhaseRole,
    /// `None` when trained here, otherwise the checkpoint it was loaded from.
    pub loaded_from: Option<PathBuf>,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub dataset_hash: String,
    pub phases: Vec<PhaseRecord>,
    pub points: Vec<MetricPoint>,
    pub teacher_events: Vec<TeacherEvent>,
    /// Per-step losses, filled only when requested in [`RunOptions`].
    pub step_losses: Vec<LossBreakdown>,
    pub completed: bool,
}

impl RunRecord {
    pub fn final_point(&self) -> Option<&MetricPoint> {
        self.points.last()
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub crate_version: String,
    pub label: String,
    pub config: ExperimentConfig,
    pub policy: TeacherPolicy,
    pub graph: GraphConfig,
    pub arch: ArchConfig,
    pub detect: DetectConfig,
    pub dataset_hash: String,
    pub datasets: Vec<DatasetSummary>,
    pub open_defaults: BTreeMap<String, serde_json::Value>,
    pub phases: Vec<PhaseRecord>,
    pub teacher_events: Vec<TeacherEvent>,
    pub completed: bool,
    pub final_point: Option<MetricPoint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub scenes: usize,
    pub mask: String,
}

/// Switches that do not change what a run computes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from `checkpoints/last.uodl` when present.
    pub resume: bool,
    pub record_step_losses: bool,
    /// Stop after the eval point at this (phase, iteration).
    pub stop_at: Option<(u32, u64)>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub phase: u32,
    pub iteration: u64,
    pub seed: u64,
    pub student: ModelParameters,
    pub velocity: ParamSet,
    pub teacher: Option<TeacherState>,
    pub sampler: SamplerState,
    pub interval_loss: LossBreakdown,
    pub interval_steps: u64,
    pub events: Vec<TeacherEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateExtra {
    config_digest: String,
    sampler: SamplerState,
    interval_loss: LossBreakdown,
    interval_steps: u64,
    events: Vec<TeacherEvent>,
    teacher_thresholds: Option<PerClassThresholds>,
    teacher_source_iteration: Option<u64>,
}

impl TrainState {
    pub fn to_checkpoint(&self, scheme: &str, config_digest: &str) -> Checkpoint {
        let mut groups = vec![
            ("student".to_string(), self.student.clone()),
            ("velocity".to_string(), self.velocity.clone()),
        ];
        if let Some(t) = &self.teacher {
            groups.push(("teacher".to_string(), t.params.clone()));
        }
        let extra = StateExtra {
            config_digest: config_digest.to_string(),
            sampler: self.sampler.clone(),
            interval_loss: self.interval_loss.clone(),
            interval_steps: self.interval_steps,
            events: self.events.clone(),
            teacher_thresholds: self.teacher.as_ref().map(|t| t.thresholds.clone()),
            teacher_source_iteration: self.teacher.as_ref().map(|t| t.source_iteration),
        };
        Checkpoint {
            iteration: self.iteration,
            seed: self.seed,
            scheme: scheme.to_string(),
            phase: self.phase,
            teacher_version: self.teacher.as_ref().map(|t| t.version),
            extra: serde_json::to_value(extra).expect("state serializes"),
            groups,
        }
    }

    /// Restore a state; returns it with the digest of the config that wrote it.
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(Self, String)> {
        let header = |m: &str| Error::checkpoint(path, CheckpointError::Header(m.to_string()));
        let extra: StateExtra =
            serde_json::from_value(ck.extra.clone()).map_err(|e| header(&format!("training state: {e}")))?;
        let student = ck.group("student").ok_or_else(|| header("missing student group"))?.clone();
        let velocity = ck.group("velocity").ok_or_else(|| header("missing velocity group"))?.clone();
        let teacher = match (ck.group("teacher"), extra.teacher_thresholds, ck.teacher_version) {
            (Some(p), Some(th), Some(v)) => Some(TeacherState {
                params: p.clone(),
                thresholds: th,
                version: v,
                source_iteration: extra.teacher_source_iteration.unwrap_or(0),
            }),
            (None, None, None) => None,
            _ => return Err(header("incomplete teacher state")),
        };
        Ok((
            Self {
                phase: ck.phase,
                iteration: ck.iteration,
                seed: ck.seed,
                student,
                velocity,
                teacher,
                sampler: extra.sampler,
                interval_loss: extra.interval_loss,
                interval_steps: extra.interval_steps,
                events: extra.events,
            },
            extra.config_digest,
        ))
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub loss: LossBreakdown,
    pub lr: f64,
    pub action: TeacherAction,
}

/// Frozen teacher and its precomputed pseudo sets (offline scheme).
#[derive(Debug, Clone)]
pub struct OfflinePseudo {
    pub teacher: TeacherState,
    /// Indexed by training dataset, then scene index.
    pub sets: Vec<Vec<PseudoLabelSet>>,
}

/// Binds a config to a dataset bundle and runs training steps.
pub struct Trainer<'a> {
    pub config: &'a ExperimentConfig,
    pub bundle: &'a DatasetBundle,
    pub arch: ArchConfig,
    pub graph: GraphConfig,
    pub policy: TeacherPolicy,
    offline: Option<OfflinePseudo>,
}

fn config_digest(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a ExperimentConfig, bundle: &'a DatasetBundle) -> Result<Self> {
        config.validate()?;
        let arch = config.arch_for(bundle.label_space.len(), bundle.image_size());
        arch.validate()?;
        if bundle.train.iter().all(|d| d.is_empty()) {
            return Err(Error::Empty("training datasets"));
        }
        Ok(Self {
            config,
            bundle,
            arch,
            graph: config.graph_config(),
            policy: config.policy(),
            offline: None,
        })
    }

    pub fn set_offline(&mut self, offline: OfflinePseudo) {
        self.offline = Some(offline);
    }

    pub fn offline(&self) -> Option<&OfflinePseudo> {
        self.offline.as_ref()
    }

    fn phase_seed(&self, phase: u32) -> u64 {
        if phase == 1 {
            self.config.seed
        } else {
            derive_seed(self.config.seed, &[tag::INIT, u64::from(phase)])
        }
    }

    pub fn initial_state(&self, phase: u32) -> Result<TrainState> {
        let student = init_params(&self.arch, self.phase_seed(phase))?;
        Ok(TrainState {
            phase,
            iteration: 0,
            seed: self.config.seed,
            velocity: ParamSet::zeros_like(&student),
            student,
            teacher: None,
            sampler: SamplerState::new(self.config.seed, u64::from(phase), self.bundle.train.len()),
            interval_loss: LossBreakdown::zero(self.arch.num_stages()),
            interval_steps: 0,
            events: Vec::new(),
        })
    }

    pub fn calibrate(&self, teacher: &TeacherState, iteration: u64) -> Result<PerClassThresholds> {
        search_fbeta_thresholds(&self.arch, teacher, &self.bundle.calib, &self.config.calib, iteration)
    }

    /// Teacher detections on the original image frame, split by the
    /// dataset's thresholds and restricted to its unannotated classes.
    fn teacher_pseudo(
        &self,
        net: &Network<'_>,
        thresholds: &PerClassThresholds,
        image: &Image,
        mask: &crate::labelspace::SubSpaceMask,
        weak_rng: Option<&mut SplitMix64>,
    ) -> Result<PseudoLabelSet> {
        let detect = DetectConfig::default();
        let dets = match weak_rng {
            Some(rng) => {
                let weak = draw_record(AugMode::Weak, image, &self.config.strong_aug, rng);
                let mut d = net.detect(&weak.apply_image(image), &detect)?;
                for x in &mut d {
                    x.bbox = weak.map_box(&x.bbox);
                }
                d
            }
            None => net.detect(image, &detect)?,
        };
        Ok(filter_dual(&dets, thresholds, mask))
    }

    /// Freeze `teacher` and precompute pseudo sets for every training scene.
    pub fn precompute_offline(&self, teacher: TeacherState) -> Result<OfflinePseudo> {
        let net = Network::new(&self.arch, &teacher.params)?;
        let mut sets = Vec::with_capacity(self.bundle.train.len());
        for ds in &self.bundle.train {
            let mut v = Vec::with_capacity(ds.len());
            for s in &ds.scenes {
                v.push(if ds.mask.is_full() {
                    PseudoLabelSet::default()
                } else {
                    self.teacher_pseudo(&net, &teacher.thresholds, &s.image, &ds.mask, None)?
                });
            }
            sets.push(v);
        }
        Ok(OfflinePseudo { teacher, sets })
    }

    /// One optimizer step on `batch`, followed by the teacher policy.
    pub fn train_step(&self, state: &mut TrainState, batch: &Batch) -> Result<StepResult> {
        let cfg = self.config;
        let i = state.iteration;
        let stream = u64::from(state.phase);
        let ds = &self.bundle.train[batch.dataset];
        let lr_cfg = cfg.lr_config();
        let lr = lr_at(i, &lr_cfg);

        let teacher_net = match (&state.teacher, ds.mask.is_full()) {
            (Some(t), false) => Some((Network::new(&self.arch, &t.params)?, &t.thresholds)),
            _ => None,
        };
        let offline = self.offline.as_ref().filter(|_| state.phase > 1);

        let mut images = Vec::with_capacity(batch.scenes.len());
        let mut gts: Vec<Vec<Annotation>> = Vec::with_capacity(batch.scenes.len());
        let mut pseudo: Vec<Option<PseudoLabelSet>> = Vec::with_capacity(batch.scenes.len());
        for (b, &si) in batch.scenes.iter().enumerate() {
            let scene = &ds.scenes[si];
            let mut srng = SplitMix64::derived(state.seed, &[tag::STRONG_AUG, stream, i, b as u64]);
            let strong = draw_record(AugMode::Strong, &scene.image, &cfg.strong_aug, &mut srng);
            images.push(strong.apply_image(&scene.image));
            gts.push(
                scene
                    .annotations
                    .iter()
                    .map(|a| Annotation {
                        class_id: a.class_id,
                        bbox: strong.map_box(&a.bbox),
                    })
                    .collect(),
            );
            let set = if let Some((net, th)) = &teacher_net {
                let mut wrng = SplitMix64::derived(state.seed, &[tag::WEAK_AUG, stream, i, b as u64]);
                Some(self.teacher_pseudo(net, th, &scene.image, &ds.mask, Some(&mut wrng))?)
            } else {
                offline.map(|o| o.sets[batch.dataset][si].clone())
            };
            pseudo.push(set.map(|s| transform_pseudo(&s, &strong)));
        }
        let samples: Vec<TrainSample<'_>> = (0..images.len())
            .map(|b| TrainSample {
                image: &images[b],
                gt: &gts[b],
                mask: &ds.mask,
                pseudo: pseudo[b].as_ref(),
            })
            .collect();

        let (loss, grads, _) = {
            let net = Network::new(&self.arch, &state.student)?;
            let mut rng = SplitMix64::derived(state.seed, &[tag::SAMPLING, stream, i]);
            net.train_batch(&samples, &self.graph, &mut rng)?
        };
        sgd_step(&mut state.student, &mut state.velocity, &grads, lr, &cfg.sgd)?;
        state.iteration += 1;

        let action = if self.config.scheme.is_online() {
            policy_action(i, &self.policy, &lr_cfg, cfg.iterations)
        } else {
            TeacherAction::None
        };
        self.apply_action(state, action)?;
        Ok(StepResult { loss, lr, action })
    }

    fn apply_action(&self, state: &mut TrainState, action: TeacherAction) -> Result<()> {
        let done = state.iteration;
        let recalibrate = match action {
            TeacherAction::None => return Ok(()),
            TeacherAction::InitTeacher => {
                let placeholder = PerClassThresholds::uniform(
                    self.arch.num_classes,
                    self.config.calib.fallback,
                    self.config.calib.low_threshold,
                )?;
                state.teacher = Some(TeacherState {
                    params: state.student.clone(),
                    thresholds: placeholder,
                    version: 1,
                    source_iteration: done,
                });
                true
            }
            TeacherAction::EmaUpdate { recalibrate } => {
                let t = state.teacher.as_mut().ok_or(Error::NoTeacher)?;
                ema_update(t, &state.student, self.policy.alpha)?;
                t.version += 1;
                t.source_iteration = done;
                recalibrate
            }
            TeacherAction::ReplaceTeacher { recalibrate } => {
                let t = state.teacher.as_mut().ok_or(Error::NoTeacher)?;
                t.params = state.student.clone();
                t.version += 1;
                t.source_iteration = done;
                recalibrate
            }
        };
        let t = state.teacher.as_ref().ok_or(Error::NoTeacher)?;
        let thresholds = if recalibrate { Some(self.calibrate(t, done)?) } else { None };
        let t = state.teacher.as_mut().ok_or(Error::NoTeacher)?;
        if let Some(th) = thresholds {
            t.thresholds = th;
        }
        // EMA updates happen every step; only record the ones that matter.
        if !matches!(action, TeacherAction::EmaUpdate { recalibrate: false }) {
            state.events.push(TeacherEvent {
                phase: state.phase,
                iteration: done,
                action,
                version: t.version,
                high_thresholds: recalibrate.then(|| t.thresholds.high.clone()),
            });
        }
        Ok(())
    }

    pub fn evaluate(&self, params: &ModelParameters) -> Result<ValMetrics> {
        let t = self.config.pmcr_threshold;
        let ev = evaluate_model(&self.arch, params, &self.bundle.val, &[t])?;
        let p = &ev.pmcr.points[0];
        Ok(ValMetrics {
            map: ev.detection.map,
            ap50: ev.detection.ap50,
            ap75: ev.detection.ap75,
            per_class_ap: ev.detection.per_class_ap,
            rpn_recall: ev.recall.recall,
            pmcr_threshold: t,
            pmcr: p.pmcr,
            pmcr_sum_p1: p.sum_p1,
            pmcr_sum_p2: p.sum_p2,
            num_detections: ev.detection.num_detections,
        })
    }

    fn open_defaults(&self) -> BTreeMap<String, serde_json::Value> {
        use serde_json::json;
        let c = self.config;
        let mut m = BTreeMap::new();
        m.insert(
            "dataset_sampling".into(),
            json!("one dataset per batch, chosen with probability proportional to its scene count; scenes from per-dataset epoch shuffles"),
        );
        m.insert(
            "burn_in".into(),
            match self.policy.kind {
                PolicyKind::Ema => json!({
                    "rule": "teacher created after floor(fraction * iterations) steps",
                    "fraction": self.policy.ema_burn_in_fraction,
                    "iterations": self.policy.ema_burn_in(c.iterations),
                }),
                PolicyKind::Periodic => json!({
                    "rule": "teacher created at the end of cosine cycle burn_in_cycles",
                    "burn_in_cycles": self.policy.burn_in_cycles,
                    "iterations": self.policy.burn_in_cycles * c.lr_config().cycle_length,
                }),
                PolicyKind::None => json!(null),
            },
        );
        m.insert("ema_alpha".into(), json!(self.policy.alpha));
        m.insert("ema_recalibrate_every".into(), json!(self.policy.ema_recalibrate_every));
        m.insert("low_threshold".into(), json!(c.calib.low_threshold));
        m.insert(
            "fbeta_search".into(),
            json!({
                "beta": c.calib.beta,
                "grid": c.calib.grid,
                "match_iou": c.calib.match_iou,
                "fallback": c.calib.fallback,
                "ties": "higher threshold wins",
            }),
        );
        m.insert("sampling".into(), serde_json::to_value(c.sampling).expect("serializes"));
        m.insert("loss_weights".into(), serde_json::to_value(c.loss_weights).expect("serializes"));
        m.insert(
            "rpn_assignment".into(),
            json!({"positive_iou": crate::targets::RPN_POSITIVE_IOU, "negative_iou": crate::targets::RPN_NEGATIVE_IOU}),
        );
        m.insert("pseudo_match_iou".into(), json!(crate::targets::PSEUDO_MATCH_IOU));
        m.insert(
            "rpn_recall".into(),
            json!({"iou": RECALL_IOU, "proposals": "all post-NMS proposals"}),
        );
        m.insert("map".into(), json!("101-point interpolated AP, IoU 0.50:0.05:0.95, mean over classes with ground truth"));
        m.insert("teacher_view".into(), json!("weak augmentation (horizontal flip); student sees the strong view"));
        m.insert("offline_teacher_view".into(), json!("original image"));
        m
    }

    fn metadata(&self, dataset_hash: &str, record: &RunRecord) -> RunMetadata {
        RunMetadata {
            schema_version: RUN_SCHEMA_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            label: self.config.label(),
            config: self.config.clone(),
            policy: self.policy.clone(),
            graph: self.graph,
            arch: self.arch.clone(),
            detect: DetectConfig::default(),
            dataset_hash: dataset_hash.to_string(),
            datasets: self
                .bundle
                .train
                .iter()
                .chain([&self.bundle.val, &self.bundle.calib])
                .map(|d| DatasetSummary {
                    name: d.name.clone(),
                    scenes: d.len(),
                    mask: d.mask.to_bit_string(),
                })
                .collect(),
            open_defaults: self.open_defaults(),
            phases: record.phases.clone(),
            teacher_events: record.teacher_events.clone(),
            completed: record.completed,
            final_point: record.final_point().cloned(),
        }
    }
}

/// Output sink for one run directory.
struct RunDir {
    root: Option<PathBuf>,
}

impl RunDir {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(name))
    }

    fn checkpoint_path(&self, name: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(CHECKPOINT_DIR).join(name))
    }

    fn append_point(&self, p: &MetricPoint) -> Result<()> {
        let Some(path) = self.path(METRICS_FILE) else { return Ok(()) };
        let mut line = serde_json::to_string(p).expect("metric point serializes");
        line.push('\n');
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
        f.sync_data().map_err(|e| Error::io(&path, e))
    }

    fn rewrite_points(&self, points: &[MetricPoint]) -> Result<()> {
        let Some(path) = self.path(METRICS_FILE) else { return Ok(()) };
        let mut s = String::new();
        for p in points {
            s.push_str(&serde_json::to_string(p).expect("metric point serializes"));
            s.push('\n');
        }
        write_atomic(&path, s.as_bytes())
    }
}

/// Read the eval points of a `metrics.jsonl` file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Load the dataset named by the config and run it.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<RunRecord> {
    config.validate()?;
    let dir = config
        .dataset_dir
        .as_ref()
        .ok_or_else(|| Error::Config("dataset_dir is required".into()))?;
    let bundle = read_dataset_dir(dir)?;
    run_with_bundle(config, &bundle, options)
}

/// Run every phase of an experiment on an in-memory bundle.
pub fn run_with_bundle(config: &ExperimentConfig, bundle: &DatasetBundle, options: &RunOptions) -> Result<RunRecord> {
    let mut trainer = Trainer::new(config, bundle)?;
    let dataset_hash = bundle_fingerprint(bundle);
    let digest = config_digest(config);
    let out = RunDir {
        root: options.out_dir.clone(),
    };
    if let Some(root) = &out.root {
        let ck = root.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    }

    let mut record = RunRecord {
        label: config.label(),
        dataset_hash: dataset_hash.clone(),
        phases: Vec::new(),
        points: Vec::new(),
        teacher_events: Vec::new(),
        step_losses: Vec::new(),
        completed: false,
    };

    let resumed = match out.checkpoint_path(LAST_CHECKPOINT) {
        Some(p) if options.resume && p.exists() => {
            let ck = Checkpoint::load(&p)?;
            let (state, d) = TrainState::from_checkpoint(&ck, &p)?;
            if d != digest {
                return Err(Error::Config(format!(
                    "{} was written by a different configuration",
                    p.display()
                )));
            }
            state.student.check_layout(&init_params(&trainer.arch, 0)?)?;
            let metrics = out.path(METRICS_FILE).expect("run directory");
            let kept: Vec<MetricPoint> = if metrics.exists() {
                read_metrics(&metrics)?
                    .into_iter()
                    .filter(|m| (m.phase, m.iteration) <= (state.phase, state.iteration))
                    .collect()
            } else {
                Vec::new()
            };
            out.rewrite_points(&kept)?;
            record.points = kept;
            info!("resuming phase {} at iteration {}", state.phase, state.iteration);
            Some(state)
        }
        _ => None,
    };
    if resumed.is_none() {
        out.rewrite_points(&[])?;
    }
    let mut state = match resumed {
        Some(s) => s,
        None => trainer.initial_state(1)?,
    };
    let write_meta = |trainer: &Trainer<'_>, record: &RunRecord| -> Result<()> {
        match out.path(RUN_FILE) {
            Some(p) => write_json(&p, &trainer.metadata(&dataset_hash, record)),
            None => Ok(()),
        }
    };
    write_meta(&trainer, &record)?;

    if config.scheme == Scheme::OfflinePseudo {
        let teacher_params = if let Some(path) = &config.offline_teacher {
            record.phases.push(PhaseRecord {
                phase: 1,
                role: PhaseRole::Teacher,
                loaded_from: Some(path.clone()),
                iterations: 0,
            });
            let expected = init_params(&trainer.arch, 0)?;
            let p = load_params(path, "student", &expected)?;
            if state.phase == 1 {
                state = trainer.initial_state(2)?;
            }
            p
        } else {
            record.phases.push(PhaseRecord {
                phase: 1,
                role: PhaseRole::Teacher,
                loaded_from: None,
                iterations: config.iterations,
            });
            let teacher_ck = out.checkpoint_path(OFFLINE_TEACHER_CHECKPOINT);
            if state.phase == 1 {
                if !run_phase(&trainer, &mut state, &out, &digest, options, &mut record)? {
                    write_meta(&trainer, &record)?;
                    return Ok(record);
                }
                if let Some(p) = &teacher_ck {
                    state.to_checkpoint(config.scheme.name(), &digest).save(p)?;
                }
                let p = state.student.clone();
                state = trainer.initial_state(2)?;
                p
            } else {
                let p = teacher_ck.ok_or_else(|| Error::Invalid("resuming phase 2 needs a run directory".into()))?;
                load_params(&p, "student", &state.student)?
            }
        };
        let mut teacher = TeacherState {
            params: teacher_params,
            thresholds: PerClassThresholds::uniform(
                trainer.arch.num_classes,
                config.calib.fallback,
                config.calib.low_threshold,
            )?,
            version: 1,
            source_iteration: config.iterations,
        };
        teacher.thresholds = trainer.calibrate(&teacher, config.iterations)?;
        let offline = trainer.precompute_offline(teacher)?;
        if let Some(root) = &out.root {
            for (ds, sets) in bundle.train.iter().zip(&offline.sets) {
                write_pseudo_file(&root.join(pseudo_file_name(&ds.name)), ds, &bundle.label_space, sets)?;
            }
        }
        trainer.set_offline(offline);
        record.phases.push(PhaseRecord {
            phase: 2,
            role: PhaseRole::Student,
            loaded_from: None,
            iterations: config.iterations,
        });
    } else {
        record.phases.push(PhaseRecord {
            phase: 1,
            role: PhaseRole::Student,
            loaded_from: None,
            iterations: config.iterations,
        });
    }

    if !run_phase(&trainer, &mut state, &out, &digest, options, &mut record)? {
        write_meta(&trainer, &record)?;
        return Ok(record);
    }
    if let Some(p) = out.checkpoint_path(FINAL_CHECKPOINT) {
        state.to_checkpoint(config.scheme.name(), &digest).save(&p)?;
    }
    record.completed = true;
    write_meta(&trainer, &record)?;
    Ok(record)
}

/// Train `state` to the configured iteration count. Returns `false` when
/// stopped early by [`RunOptions::stop_at`].
fn run_phase(
    trainer: &Trainer<'_>,
    state: &mut TrainState,
    out: &RunDir,
    digest: &str,
    options: &RunOptions,
    record: &mut RunRecord,
) -> Result<bool> {
    let cfg = trainer.config;
    while state.iteration < cfg.iterations {
        let batch = sample_batch(&trainer.bundle.train, cfg.batch_size, &mut state.sampler)?;
        let step = match trainer.train_step(state, &batch) {
            Ok(s) => s,
            Err(e) => {
                if let (Error::NonFinite(_), Some(p)) = (&e, out.path(DIAGNOSTIC_FILE)) {
                    let dump = serde_json::json!({
                        "error": e.to_string(),
                        "phase": state.phase,
                        "iteration": state.iteration,
                        "lr": lr_at(state.iteration, &cfg.lr_config()),
                        "dataset": batch.dataset_id,
                        "scenes": batch.scenes,
                        "last_point": record.points.last(),
                    });
                    if let Err(w) = write_json(&p, &dump) {
                        warn!("could not write diagnostic dump: {w}");
                    }
                }
                return Err(e);
            }
        };
        state.interval_loss.add_scaled(&step.loss, 1.0);
        state.interval_steps += 1;
        if options.record_step_losses {
            record.step_losses.push(step.loss.clone());
        }
        let done = state.iteration;
        if done % cfg.eval_interval == 0 || done == cfg.iterations {
            let val = trainer.evaluate(&state.student)?;
            let mut loss = state.interval_loss.clone();
            let n = state.interval_steps.max(1) as f64;
            let mut mean = LossBreakdown::zero(loss.stage_cls.len());
            mean.add_scaled(&loss, 1.0 / n);
            loss = mean;
            let point = MetricPoint {
                phase: state.phase,
                iteration: done,
                lr: step.lr,
                loss,
                steps: state.interval_steps,
                val,
                teacher_version: state.teacher.as_ref().map(|t| t.version),
                high_thresholds: state.teacher.as_ref().map(|t| t.thresholds.high.clone()),
            };
            info!(
                "phase {} iter {done}: loss {:.4} mAP {:.4} AP50 {:.4} recall {:.3}",
                state.phase, point.loss.total, point.val.map, point.val.ap50, point.val.rpn_recall
            );
            out.append_point(&point)?;
            record.points.push(point);
            state.interval_loss = LossBreakdown::zero(state.interval_loss.stage_cls.len());
            state.interval_steps = 0;
            let ck = state.to_checkpoint(cfg.scheme.name(), digest);
            if let Some(p) = out.checkpoint_path(LAST_CHECKPOINT) {
                ck.save(&p)?;
            }
            if cfg.keep_checkpoints {
                if let Some(p) = out.checkpoint_path(&format!("phase{}_{:06}.uodl", state.phase, done)) {
                    ck.save(&p)?;
                }
            }
            if options.stop_at == Some((state.phase, done)) {
                record.teacher_events = state.events.clone();
                return Ok(false);
            }
        }
    }
    record.teacher_events = state.events.clone();
    Ok(true)
}
