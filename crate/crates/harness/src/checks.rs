//! End-to-end gradient check of the full transmission pipeline.

use mambajscc_core::gradcheck::{check_gradients, GradCheckReport};
use mambajscc_core::params::Bindings;
use mambajscc_core::tensor::TensorError;
use mambajscc_core::{ChannelKind, ChannelRealization, CodecError, JsccModel, ModelConfig, Tensor};

use crate::data::synthetic_image;
use crate::error::Result;
use crate::metrics::mse_loss;

pub const FD_STEP: f64 = 1e-5;

fn as_tensor_error(e: CodecError) -> TensorError {
    match e {
        CodecError::Tensor(t) => t,
        other => TensorError::Format(other.to_string()),
    }
}

/// Checks `d MSE / d θ` of encode → channel (fixed noise) → decode on
/// `coords` random coordinates of every parameter tensor.
pub fn pipeline_gradcheck(cfg: &ModelConfig, channel: ChannelKind, snr_db: f64, seed: u64, coords: usize) -> Result<GradCheckReport> {
    let model = JsccModel::new(cfg.clone(), seed)?;
    let image = synthetic_image(cfg.image_height, seed);
    let real = ChannelRealization::new(channel, snr_db, seed);
    let params: Vec<Tensor> = model.store.iter().map(|(_, _, t)| t.clone()).collect();
    let report = check_gradients(&params, FD_STEP, Some((coords, seed)), |g, vars| {
        let p = Bindings::from_vars(vars.to_vec());
        let x = g.constant(image.clone());
        let out = model.forward(g, &p, x, &real).map_err(as_tensor_error)?;
        mse_loss(g, x, out.reconstruction)
    })?;
    Ok(report)
}
