use serde::{Deserialize, Serialize};

use super::params::{Gradients, ModelParameters, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// One SGD step with momentum and L2 weight decay:
/// `v <- m v + g + wd w`, `w <- w - lr v`.
///
/// The update is computed before anything is written, so on error both
/// `params` and `velocity` are left untouched.
pub fn sgd_step(
    params: &mut ModelParameters,
    velocity: &mut ParamSet,
    grads: &Gradients,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(velocity)?;
    let mut new_v = velocity.clone();
    let mut new_w = params.clone();
    for ((w, v), g) in new_w
        .tensors
        .iter_mut()
        .zip(&mut new_v.tensors)
        .zip(&grads.tensors)
    {
        for ((wi, vi), gi) in w.data.iter_mut().zip(&mut v.data).zip(&g.data) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *wi;
            *wi -= lr * *vi;
        }
    }
    if !new_w.is_finite() || !new_v.is_finite() {
        return Err(Error::NonFinite("parameter update".into()));
    }
    *params = new_w;
    *velocity = new_v;
    Ok(())
}
