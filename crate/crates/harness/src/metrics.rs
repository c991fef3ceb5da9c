//! Distortion metrics.

use mambajscc_core::tensor::{Result, Tensor, TensorError};
use mambajscc_core::{Graph, Var};

/// Mean squared error as a graph node.
pub fn mse_loss(g: &mut Graph, s: Var, s_hat: Var) -> Result<Var> {
    let d = g.sub(s_hat, s)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// How reconstructions in `[0, 1]` are mapped to the 8-bit range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PixelMode {
    /// Clamp and scale by 255.
    #[default]
    Continuous,
    /// Clamp, scale by 255 and round to integers.
    Rounded,
}

pub fn to_pixels(t: &Tensor, mode: PixelMode) -> Tensor {
    t.map(|x| {
        let v = x.clamp(0.0, 1.0) * 255.0;
        match mode {
            PixelMode::Continuous => v,
            PixelMode::Rounded => v.round(),
        }
    })
}

/// `10·log10(max² / mse)`; `+∞` when the images agree exactly.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// PSNR of pixel-range images; `s_hat` is clamped to `[0, max_val]` first.
pub fn psnr(s: &Tensor, s_hat: &Tensor, max_val: f64) -> Result<f64> {
    let clamped = s_hat.map(|x| x.clamp(0.0, max_val));
    Ok(psnr_from_mse(mse(s, &clamped)?, max_val))
}

/// PSNR of `[0, 1]` images after de-normalization.
pub fn image_psnr(s: &Tensor, s_hat: &Tensor, mode: PixelMode) -> Result<f64> {
    psnr(&to_pixels(s, mode), &to_pixels(s_hat, mode), 255.0)
}
