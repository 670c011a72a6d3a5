//! Small dense/graph neural kernel with hand-written gradients.

use ndarray::Array2;
use thiserror::Error;

mod checkpoint;
mod gcn;
mod gradcheck;
mod loss;
mod mlp;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gcn::{gcn_backward, gcn_forward, gcn_forward_cached, GcnCache, NormalizedAdjacency};
pub use gradcheck::{finite_diff_check, GradCheckReport, REL_ERROR_FLOOR};
pub use loss::{bce_loss_and_grad, softmax_ce_loss_and_grad, softmax_rows, BCE_EPS};
pub use mlp::{mlp_backward, mlp_forward, mlp_forward_cached, MlpCache};
pub use optim::{AdamConfig, Optimizer};
pub use params::{Architecture, ModelParams};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss mask selects no rows")]
    EmptyMask,
    #[error("masked row {0} has no label")]
    MissingLabel(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Pre-softmax class scores, one row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Array2<f64>);

impl Logits {
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.0
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
