use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{default_pmcr_grid, evaluate_model, pmcr, EvalReport, PmcrReport, RecallReport};
use crate::model::{init_params, ArchConfig, ModelParameters};
use crate::synthdata::{bundle_fingerprint, read_dataset_dir, DatasetBundle, SceneDataset};
use crate::trainer::{load_params, RunMetadata, RUN_FILE};
use crate::util::{file_sha256, read_json};

pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const PMCR_JSON: &str = "pmcr.json";
pub const PMCR_CSV: &str = "pmcr.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Val,
    Calib,
}

/// Input document of the `eval` and `pmcr` subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCommandConfig {
    #[serde(default = "one")]
    pub schema_version: u32,
    pub checkpoint: PathBuf,
    pub dataset_dir: PathBuf,
    #[serde(default = "val")]
    pub split: EvalSplit,
    /// Parameter group inside the checkpoint.
    #[serde(default = "student")]
    pub group: String,
    /// Taken from the run directory's `run.json` when absent.
    #[serde(default)]
    pub arch: Option<ArchConfig>,
    #[serde(default = "default_pmcr_grid")]
    pub pmcr_grid: Vec<f64>,
}

fn one() -> u32 {
    1
}
fn val() -> EvalSplit {
    EvalSplit::Val
}
fn student() -> String {
    "student".into()
}

impl EvalCommandConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != 1 {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if !self.checkpoint.is_file() {
            return bad(format!("checkpoint {} does not exist", self.checkpoint.display()));
        }
        if !self.dataset_dir.is_dir() {
            return bad(format!("dataset_dir {} is not a directory", self.dataset_dir.display()));
        }
        if self.pmcr_grid.is_empty() || self.pmcr_grid.iter().any(|t| !(0.0..1.0).contains(t)) {
            return bad("pmcr_grid needs thresholds in [0, 1)".into());
        }
        if self.arch.is_none() && self.run_metadata_path().is_none() {
            return bad(format!(
                "no arch given and no {RUN_FILE} found next to {}",
                self.checkpoint.display()
            ));
        }
        Ok(())
    }

    /// `run.json` of the run directory that holds the checkpoint.
    fn run_metadata_path(&self) -> Option<PathBuf> {
        let dir = self.checkpoint.parent()?;
        [dir.join(RUN_FILE), dir.parent()?.join(RUN_FILE)]
            .into_iter()
            .find(|p| p.is_file())
    }

    fn resolve_arch(&self) -> Result<ArchConfig> {
        match (&self.arch, self.run_metadata_path()) {
            (Some(a), _) => Ok(a.clone()),
            (None, Some(p)) => Ok(read_json::<RunMetadata>(&p)?.arch),
            (None, None) => Err(Error::Config("architecture unknown".into())),
        }
    }
}

struct Loaded {
    arch: ArchConfig,
    params: ModelParameters,
    bundle: DatasetBundle,
    checkpoint_sha256: String,
}

impl Loaded {
    fn split(&self, s: EvalSplit) -> &SceneDataset {
        match s {
            EvalSplit::Val => &self.bundle.val,
            EvalSplit::Calib => &self.bundle.calib,
        }
    }
}

fn load(cfg: &EvalCommandConfig) -> Result<Loaded> {
    let arch = cfg.resolve_arch()?;
    arch.validate()?;
    let bundle = read_dataset_dir(&cfg.dataset_dir)?;
    if bundle.label_space.len() != arch.num_classes || bundle.image_size() != arch.image_size {
        return Err(Error::Config(format!(
            "dataset has {} classes at {}px but the model expects {} at {}px",
            bundle.label_space.len(),
            bundle.image_size(),
            arch.num_classes,
            arch.image_size
        )));
    }
    let params = load_params(&cfg.checkpoint, &cfg.group, &init_params(&arch, 0)?)?;
    Ok(Loaded {
        arch,
        params,
        checkpoint_sha256: file_sha256(&cfg.checkpoint)?,
        bundle,
    })
}

#[derive(Debug, Clone, Serialize)]
struct ClassAp<'a> {
    class: &'a str,
    ap: Option<f64>,
    rpn_recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct EvalDocument<'a> {
    checkpoint: &'a Path,
    checkpoint_sha256: &'a str,
    dataset_hash: String,
    split: EvalSplit,
    map: f64,
    ap50: f64,
    ap75: f64,
    num_images: usize,
    num_detections: usize,
    num_ground_truth: usize,
    rpn_recall: f64,
    rpn_recall_iou: f64,
    per_class: Vec<ClassAp<'a>>,
}

/// Results of `eval` plus the report files it writes.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub detection: EvalReport,
    pub recall: RecallReport,
    pub files: Vec<(String, Vec<u8>)>,
}

pub fn run_eval(cfg: &EvalCommandConfig) -> Result<EvalOutput> {
    let l = load(cfg)?;
    let ev = evaluate_model(&l.arch, &l.params, l.split(cfg.split), &[0.5])?;
    let names = l.bundle.label_space.names();
    let per_class: Vec<ClassAp<'_>> = names
        .iter()
        .enumerate()
        .map(|(c, n)| ClassAp {
            class: n.as_str(),
            ap: ev.detection.per_class_ap[c],
            rpn_recall: ev.recall.per_class[c],
        })
        .collect();
    let mut csv = String::from("class,ap,rpn_recall\n");
    for r in &per_class {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", r.class, f(r.ap), f(r.rpn_recall)));
    }
    let doc = EvalDocument {
        checkpoint: &cfg.checkpoint,
        checkpoint_sha256: &l.checkpoint_sha256,
        dataset_hash: bundle_fingerprint(&l.bundle),
        split: cfg.split,
        map: ev.detection.map,
        ap50: ev.detection.ap50,
        ap75: ev.detection.ap75,
        num_images: ev.detection.num_images,
        num_detections: ev.detection.num_detections,
        num_ground_truth: ev.detection.num_ground_truth,
        rpn_recall: ev.recall.recall,
        rpn_recall_iou: ev.recall.iou_threshold,
        per_class,
    };
    let files = vec![
        (EVAL_JSON.to_string(), pretty(&doc)),
        (EVAL_CSV.to_string(), csv.into_bytes()),
    ];
    Ok(EvalOutput {
        detection: ev.detection,
        recall: ev.recall,
        files,
    })
}

#[derive(Debug, Clone, Serialize)]
struct PmcrDocument<'a> {
    checkpoint: &'a Path,
    checkpoint_sha256: &'a str,
    dataset_hash: String,
    split: EvalSplit,
    #[serde(flatten)]
    report: &'a PmcrReport,
}

pub fn run_pmcr(cfg: &EvalCommandConfig) -> Result<Vec<(String, Vec<u8>)>> {
    let l = load(cfg)?;
    let report = pmcr(&l.arch, &l.params, l.split(cfg.split), &cfg.pmcr_grid)?;
    let doc = PmcrDocument {
        checkpoint: &cfg.checkpoint,
        checkpoint_sha256: &l.checkpoint_sha256,
        dataset_hash: bundle_fingerprint(&l.bundle),
        split: cfg.split,
        report: &report,
    };
    Ok(vec![
        (PMCR_JSON.to_string(), pretty(&doc)),
        (PMCR_CSV.to_string(), report.to_csv().into_bytes()),
    ])
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("report serializes");
    b.push(b'\n');
    b
}
