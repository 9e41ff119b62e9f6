//! The two-stage cascade detector.

pub mod arch;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod roi;

pub use arch::{ArchConfig, BoxMode};
pub use graph::{GraphConfig, ImagePlan, StagePlan, TrainSample};
pub use network::{DetectConfig, Network, NetworkOutputs, Phase, StageOutputs};
pub use optim::{sgd_step, SgdConfig};
pub use params::{init_params, zero_params, Gradients, ModelParameters, ParamSet, Tensor};
pub use roi::roi_extract;
