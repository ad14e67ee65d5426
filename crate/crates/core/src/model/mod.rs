//! Multistage vision transformer mapping Fourier embeddings to Zernike
//! coefficients, with its training loop, gradient check and checkpoints.

pub mod config;
pub mod gradcheck;
mod ops;
pub mod params;
pub mod train;
pub mod transformer;

pub use config::{rpe_len, ModelConfig, Optimizer, StageConfig, TrainConfig};
pub use gradcheck::{grad_check, GradCheckReport, GradCheckScope, GRAD_CHECK_STEP};
pub use params::{ParamStore, Tensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use train::{fit, learning_rate, steps_per_epoch, train, Dataset, EpochRecord, StopReason, TrainReport};
pub use transformer::{
    backward, forward, forward_stages, forward_train, loss_mse, loss_mse_grad, merge_patches, patchify, radial_encoding,
    radial_vector, stack_embeddings, ForwardCache,
};

use crate::embedding::FourierEmbedding;
use crate::error::Result;
use crate::scalar::Real;
use crate::zernike::ZernikeCoeffs;

/// Evaluation-mode predictions for a set of embeddings.
pub fn predict<T: Real>(params: &ParamStore<T>, embeddings: &[&FourierEmbedding]) -> Result<Vec<ZernikeCoeffs>> {
    let x = stack_embeddings::<T>(embeddings)?;
    let out = forward(params, &x)?;
    out.rows()
        .into_iter()
        .map(|r| ZernikeCoeffs::from_slice(&r.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()))
        .collect()
}

/// Prediction for a single embedding.
pub fn predict_one<T: Real>(params: &ParamStore<T>, e: &FourierEmbedding) -> Result<ZernikeCoeffs> {
    Ok(predict(params, &[e])?.remove(0))
}
