//! The shared classifier `f(x, W)`: parameters, static batch normalization,
//! forward/backward passes and the SGD optimizer.

mod network;
mod optim;
mod sbn;
mod tensor;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use network::{argmax, softmax_in_place, Activation, ImageShape, ModelConfig, Network, NormSource};
pub use optim::{sgd_step, MomentumState, SgdConfig};
pub use sbn::{pool_layer, pool_state, LayerContribution, Moments, SbnLayer, SbnState};
pub use tensor::{linear_combine, Matrix, ParamEntry, ParamSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },
    #[error("batch of size {0} cannot be standardized with batch statistics")]
    DegenerateBatch(usize),
    #[error("empty input batch")]
    EmptyBatch,
    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },
    #[error("statistics pooled over zero samples")]
    DegenerateStatistics,
    #[error("empty parameter list")]
    Empty,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

impl ModelError {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        ModelError::Shape {
            context: context.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }
}

/// Model parameters plus the sBN statistics needed for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub sbn: SbnState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Top-1 accuracy of `probs` against class indices.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}
