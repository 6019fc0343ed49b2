//! SGD with weight decay and (Nesterov) momentum.

use serde::{Deserialize, Serialize};

use super::tensor::ParamSet;
use super::ModelError;

/// Velocity buffers, one per parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub velocity: ParamSet,
}

impl MomentumState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        MomentumState {
            velocity: params.zeros_like(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

/// One in-place SGD update.
///
/// `g = grad + wd * w`, `v = momentum * v + g`, and the applied step is
/// `g + momentum * v` with Nesterov, `v` otherwise.
pub fn sgd_step(
    params: &mut ParamSet,
    grad: &ParamSet,
    state: &mut MomentumState,
    cfg: SgdConfig,
) -> Result<(), ModelError> {
    params.check_compatible(grad)?;
    params.check_compatible(&state.velocity)?;
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
        nesterov,
    } = cfg;
    for ((w, g), v) in params
        .flat_mut()
        .zip(grad.flat())
        .zip(state.velocity.flat_mut())
    {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        let step = if nesterov { g + momentum * *v } else { *v };
        *w -= lr * step;
    }
    Ok(())
}
