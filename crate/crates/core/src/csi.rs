//! Channel-state conditioning.
//!
//! Each codec half owns one [`CsiEncoder`] mapping the SNR in dB to a
//! length-`m` vector; every block owns a [`CsiEmbed`] projecting that vector
//! to one additive offset per scan channel.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{normal, Bindings, ParamId, ParamStore};
use crate::ssm::PROJ_INIT_STD;
use crate::tensor::{Result, Tensor, TensorError};

/// Base of the sinusoidal frequency ladder.
pub const PE_BASE: f64 = 10000.0;

/// `pe[2i] = sin(snr / base^(2i/d))`, `pe[2i+1] = cos(snr / base^(2i/d))`.
pub fn sinusoidal_encode(snr_db: f64, d_pe: usize) -> Result<Tensor> {
    if !snr_db.is_finite() {
        return Err(TensorError::NonFinite {
            op: "sinusoidal_encode",
            value: snr_db,
        });
    }
    if d_pe == 0 || !d_pe.is_multiple_of(2) {
        return Err(TensorError::InvalidShape {
            op: "sinusoidal_encode",
            shape: vec![d_pe],
            reason: "embedding dimension must be even and positive".into(),
        });
    }
    let mut pe = vec![0.0; d_pe];
    for i in 0..d_pe / 2 {
        let angle = snr_db / PE_BASE.powf((2 * i) as f64 / d_pe as f64);
        pe[2 * i] = angle.sin();
        pe[2 * i + 1] = angle.cos();
    }
    Tensor::new(&[d_pe], pe)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsiVector {
    pub values: Vec<f64>,
    pub source_snr_db: f64,
}

fn linear(g: &mut Graph, w: Var, b: Var, x: Var) -> Result<Var> {
    let n = g.value(x).numel();
    let col = g.reshape(x, &[n, 1])?;
    let y = g.matmul(w, col)?;
    let out = g.shape(y)[0];
    let y = g.reshape(y, &[out])?;
    g.add_bias(y, b, true)
}

/// Sinusoidal coding → FC → Swish → FC.
#[derive(Clone, Debug)]
pub struct CsiEncoder {
    pub d_pe: usize,
    pub len: usize,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl CsiEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, len: usize, d_pe: usize, rng: &mut R) -> Self {
        let fc1_w = store.add(
            format!("{prefix}.fc1.w"),
            normal(rng, &[len, d_pe], (1.0 / d_pe as f64).sqrt()),
        );
        let fc1_b = store.add(format!("{prefix}.fc1.b"), Tensor::zeros(&[len]));
        let fc2_w = store.add(
            format!("{prefix}.fc2.w"),
            normal(rng, &[len, len], (1.0 / len as f64).sqrt()),
        );
        let fc2_b = store.add(format!("{prefix}.fc2.b"), Tensor::zeros(&[len]));
        Self {
            d_pe,
            len,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, snr_db: f64) -> Result<Var> {
        let pe = g.constant(sinusoidal_encode(snr_db, self.d_pe)?);
        let hidden = linear(g, p[self.fc1_w], p[self.fc1_b], pe)?;
        let hidden = g.swish(hidden);
        linear(g, p[self.fc2_w], p[self.fc2_b], hidden)
    }

    /// Evaluates the encoder outside of any training graph.
    pub fn encode(&self, store: &ParamStore, snr_db: f64) -> Result<CsiVector> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let u = self.forward(&mut g, &p, snr_db)?;
        Ok(CsiVector {
            values: g.value(u).data().to_vec(),
            source_snr_db: snr_db,
        })
    }
}

/// Per-block FC from the CSI vector to one value per scan channel.
#[derive(Clone, Debug)]
pub struct CsiEmbed {
    pub len: usize,
    pub channels: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl CsiEmbed {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, len: usize, channels: usize, rng: &mut R) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            normal(rng, &[channels, len], PROJ_INIT_STD),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[channels]));
        Self {
            len,
            channels,
            w,
            b,
        }
    }

    /// `FC(u)`: the per-channel offsets, shape `[channels]`.
    pub fn project(&self, g: &mut Graph, p: &Bindings, u: Var) -> Result<Var> {
        linear(g, p[self.w], p[self.b], u)
    }
}

/// `out[c, :, :] = patches[c, :, :] + FC(u)[c]`.
pub fn embed_csi(g: &mut Graph, p: &Bindings, embed: &CsiEmbed, u: Var, patches: Var) -> Result<Var> {
    let shift = embed.project(g, p, u)?;
    g.add_bias(patches, shift, true)
}
