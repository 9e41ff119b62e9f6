//! Fixtures shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use uodlab::geometry::ScoredBox;
use uodlab::losses::ClsLossKind;

use uodlab::model::{init_params, ArchConfig, BoxMode, GraphConfig, ImagePlan, ModelParameters, Network, TrainSample};
use uodlab::pseudolabel::PseudoLabelSet;
use uodlab::rng::SplitMix64;
use uodlab::synthdata::{build_bundle, DataConfig, DatasetBundle};
use uodlab::trainer::{ExperimentConfig, Scheme};

pub const LOSS_CONFIGS: [&str; 4] = ["bce", "focal", "pseudo", "mbox"];

pub fn small_bundle(scenes: usize, seed: u64) -> DatasetBundle {
    let mut data = DataConfig::default();
    data.gen.scene_count = scenes;
    data.gen.seed = seed;
    build_bundle(&data).expect("bundle")
}

/// A short run that still crosses every teacher event of its scheme.
pub fn short_config(scheme: Scheme, iterations: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_scheme(scheme);
    c.iterations = iterations;
    c.eval_interval = iterations / 3;
    c.batch_size = 2;
    c
}

pub struct GradFixture {
    pub arch: ArchConfig,
    pub params: ModelParameters,
    pub graph: GraphConfig,
    pub plans: Vec<ImagePlan>,
}

/// Two frozen image plans for one of [`LOSS_CONFIGS`].
pub fn grad_fixture(which: &str, bundle: &DatasetBundle) -> GradFixture {
    let ds = &bundle.train[0];
    let mode = if which == "mbox" {
        BoxMode::CategorySpecific
    } else {
        BoxMode::Shared
    };
    let arch = ArchConfig::with_classes(bundle.label_space.len(), mode);
    let params = init_params(&arch, 5).expect("params");
    let mut graph = GraphConfig::default();
    if which == "focal" {
        graph.cls_loss = ClsLossKind::Focal { gamma: 2.0 };
    }
    let hidden = ds.mask.complement_members()[0];
    let pseudo: Vec<PseudoLabelSet> = ds
        .scenes
        .iter()
        .take(2)
        .map(|s| {
            let high: Vec<ScoredBox> = s
                .annotations
                .first()
                .map(|a| ScoredBox {
                    bbox: a.bbox,
                    class_id: hidden,
                    score: 0.9,
                })
                .into_iter()
                .collect();
            PseudoLabelSet {
                low: high.clone(),
                high,
            }
        })
        .collect();
    let net = Network::new(&arch, &params).expect("network");
    let mut rng = SplitMix64::new(1);
    let plans = ds
        .scenes
        .iter()
        .take(2)
        .enumerate()
        .map(|(i, s)| {
            let sample = TrainSample {
                image: &s.image,
                gt: &s.annotations,
                mask: &ds.mask,
                pseudo: (which == "pseudo").then(|| &pseudo[i]),
            };
            net.plan(&sample, &graph, &mut rng).expect("plan")
        })
        .collect();
    GradFixture {
        arch,
        params,
        graph,
        plans,
    }
}
