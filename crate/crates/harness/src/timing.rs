//! Wall-clock inference delay.

use std::time::Instant;

use mambajscc_core::{ChannelRealization, JsccModel, Tensor};

use crate::error::Result;

pub const WARMUPS: usize = 5;
pub const MIN_REPS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct TimingStats {
    pub reps: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Median of at least [`MIN_REPS`] full forwards after [`WARMUPS`] untimed ones.
pub fn time_inference(model: &JsccModel, image: &Tensor, real: &ChannelRealization, reps: usize) -> Result<TimingStats> {
    let reps = reps.max(MIN_REPS);
    for _ in 0..WARMUPS {
        model.reconstruct(image, real)?;
    }
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        model.reconstruct(image, real)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    let median_ms = if reps % 2 == 1 {
        ms[reps / 2]
    } else {
        0.5 * (ms[reps / 2 - 1] + ms[reps / 2])
    };
    Ok(TimingStats {
        reps,
        median_ms,
        min_ms: ms[0],
        max_ms: ms[reps - 1],
    })
}
