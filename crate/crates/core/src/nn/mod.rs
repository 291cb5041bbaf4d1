//! Minimal CPU network stack: tensors, layers with hand-written backward
//! passes, presets, the CCC loss, Adam and checkpoints.

use std::path::PathBuf;

use thiserror::Error;

pub mod activation;
pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gemm;
pub mod gru;
pub mod linear;
pub mod loss;
pub mod model;
pub mod pool;
pub mod residual;
pub mod spec;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{checkpoint_of, restore, load_checkpoint, save_checkpoint, warm_start, Checkpoint, LoadedCheckpoint, WarmStartReport};
pub use loss::{loss_1mccc, loss_1mccc_with, LossStats};
pub use model::{Layer, Model, Param, Tape};
pub use spec::{FrameShape, LayerSpec, ModelSpec};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
