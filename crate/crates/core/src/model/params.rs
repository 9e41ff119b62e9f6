use serde::{Deserialize, Serialize};

use super::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::rng::{tag, SplitMix64};

/// A named, shaped array of 64-bit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered set of named tensors; used for weights, gradients and
/// optimizer buffers alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

pub type ModelParameters = ParamSet;
pub type Gradients = ParamSet;

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            tensors: other
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Invalid("parameter layouts differ".into()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.fill(0.0);
        }
    }
}

/// Indices of every tensor inside a detector's [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub conv: [(usize, usize); 3],
    pub rpn_conv: (usize, usize),
    pub rpn_obj: (usize, usize),
    pub rpn_delta: (usize, usize),
    pub stages: Vec<StageLayout>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageLayout {
    pub fc: (usize, usize),
    pub cls: (usize, usize),
    pub bbox: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform with variance `2 / fan_in`, for layers followed by a ReLU.
    He { fan_in: usize },
    Normal(f64),
    Const(f64),
}

fn specs(arch: &ArchConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = Vec::new();
    let push_conv = |v: &mut Vec<_>, name: &str, cin: usize, cout: usize| {
        v.push((
            format!("{name}.weight"),
            vec![3, 3, cin, cout],
            Init::He { fan_in: 9 * cin },
        ));
        v.push((format!("{name}.bias"), vec![cout], Init::Const(0.0)));
    };
    let mut cin = arch.in_channels;
    for (i, &c) in arch.backbone_channels.iter().enumerate() {
        push_conv(&mut v, &format!("backbone.conv{}", i + 1), cin, c);
        cin = c;
    }
    push_conv(&mut v, "rpn.conv", cin, arch.rpn_channels);
    let dense = |v: &mut Vec<_>, name: &str, fi: usize, fo: usize, init: Init, bias: f64| {
        v.push((format!("{name}.weight"), vec![fi, fo], init));
        v.push((format!("{name}.bias"), vec![fo], Init::Const(bias)));
    };
    let a = arch.anchors_per_cell();
    dense(&mut v, "rpn.objectness", arch.rpn_channels, a, Init::Normal(0.01), 0.0);
    dense(&mut v, "rpn.delta", arch.rpn_channels, 4 * a, Init::Normal(0.001), 0.0);
    for s in 0..arch.num_stages() {
        let p = format!("rcn{}", s + 1);
        let fi = arch.roi_dim();
        dense(&mut v, &format!("{p}.fc"), fi, arch.hidden, Init::He { fan_in: fi }, 0.0);
        dense(
            &mut v,
            &format!("{p}.cls"),
            arch.hidden,
            arch.num_classes,
            Init::Normal(0.01),
            arch.class_bias_init,
        );
        dense(
            &mut v,
            &format!("{p}.box"),
            arch.hidden,
            arch.box_outputs(),
            Init::Normal(0.001),
            0.0,
        );
    }
    v
}

pub fn layout(arch: &ArchConfig) -> Layout {
    let pair = |i: usize| (2 * i, 2 * i + 1);
    Layout {
        conv: [pair(0), pair(1), pair(2)],
        rpn_conv: pair(3),
        rpn_obj: pair(4),
        rpn_delta: pair(5),
        stages: (0..arch.num_stages())
            .map(|s| StageLayout {
                fc: pair(6 + 3 * s),
                cls: pair(7 + 3 * s),
                bbox: pair(8 + 3 * s),
            })
            .collect(),
    }
}

/// Zero-valued tensors with the detector's names and shapes.
pub fn zero_params(arch: &ArchConfig) -> ModelParameters {
    ParamSet {
        tensors: specs(arch)
            .into_iter()
            .map(|(n, s, _)| Tensor::zeros(n, s))
            .collect(),
    }
}

/// He-uniform weights for the ReLU layers, small Gaussian weights for the
/// output heads, zero biases except the class heads (`arch.class_bias_init`). Values are drawn tensor by tensor, element by
/// element, from one splitmix64 stream derived from `seed`.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ModelParameters> {
    arch.validate()?;
    let mut rng = SplitMix64::derived(seed, &[tag::INIT]);
    let tensors = specs(arch)
        .into_iter()
        .map(|(name, shape, init)| {
            let mut t = Tensor::zeros(name, shape);
            match init {
                Init::He { fan_in } => {
                    let a = (6.0 / fan_in as f64).sqrt();
                    for v in &mut t.data {
                        *v = rng.uniform(-a, a);
                    }
                }
                Init::Normal(std) => {
                    for v in &mut t.data {
                        *v = std * rng.normal();
                    }
                }
                Init::Const(c) => t.data.fill(c),
            }
            t
        })
        .collect();
    Ok(ParamSet { tensors })
}
