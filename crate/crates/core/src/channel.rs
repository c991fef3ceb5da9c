//! Power normalization, AWGN / block-Rayleigh channels and MMSE equalization.
//!
//! Signals travel as `[c, 2, L]` tensors: `c` complex channels, row 0 the
//! real parts and row 1 the imaginary parts of `L` symbols. This is a plain
//! reshape of the encoder's `[2c, h, w]` output, where channel `2i` holds the
//! real and `2i+1` the imaginary part of complex channel `i`.
//!
//! SNR is per complex symbol at unit signal power: `σ² = 10^(−SNR/10)`.
//! Noise and the fading coefficient enter the graph as constants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        })
    }
}

impl FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(format!("unknown channel {other:?} (awgn|rayleigh)")),
        }
    }
}

/// `σ²` per complex symbol; zero for an infinite SNR.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// One circularly-symmetric `CN(0, 1)` draw.
pub fn draw_fading<R: Rng>(rng: &mut R) -> (f64, f64) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    (re * s, im * s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelRealization {
    pub kind: ChannelKind,
    pub snr_db: f64,
    /// Block-fading coefficient; `1 + 0i` for AWGN.
    pub h: (f64, f64),
    pub noise_seed: u64,
}

const FADING_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

impl ChannelRealization {
    /// Draws the fading coefficient (Rayleigh) from `noise_seed`'s stream.
    pub fn new(kind: ChannelKind, snr_db: f64, noise_seed: u64) -> Self {
        let h = match kind {
            ChannelKind::Awgn => (1.0, 0.0),
            ChannelKind::Rayleigh => {
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                rng.set_stream(FADING_STREAM);
                draw_fading(&mut rng)
            }
        };
        Self {
            kind,
            snr_db,
            h,
            noise_seed,
        }
    }

    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.snr_db)
    }

    /// Complex noise for `len` symbols laid out `[.., 2, L]` like `shape`.
    pub fn noise(&self, shape: &[usize]) -> Tensor {
        let sigma = (self.noise_variance() / 2.0).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        rng.set_stream(NOISE_STREAM);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSignal {
    /// `[c, 2, L]` symbols.
    pub symbols: Var,
    /// Factor applied by power normalization (1 when none was applied).
    pub power_scale: f64,
    /// Set when normalization met an all-zero input and left it unscaled.
    pub degenerate_power: bool,
}

/// Reshapes `[2c, h, w]` real channels into `[c, 2, h·w]` complex symbols.
pub fn pack_complex(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[0].is_multiple_of(2) {
        return Err(TensorError::InvalidShape {
            op: "pack_complex",
            shape: s,
            reason: "expected [2c, h, w]".into(),
        });
    }
    g.reshape(x, &[s[0] / 2, 2, s[1] * s[2]])
}

/// Inverse of [`pack_complex`].
pub fn unpack_complex(g: &mut Graph, sig: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(sig)[0];
    g.reshape(sig, &[2 * c, h, w])
}

/// Mean `|symbol|²` of a `[.., 2, L]` tensor.
pub fn mean_symbol_power(t: &Tensor) -> f64 {
    let n_sym = t.numel() / 2;
    t.data().iter().map(|x| x * x).sum::<f64>() / n_sym as f64
}

/// Scales packed symbols to unit mean power. Differentiable.
pub fn power_normalize(g: &mut Graph, symbols: Var) -> Result<ChannelSignal> {
    let power = mean_symbol_power(g.value(symbols));
    if power == 0.0 {
        return Ok(ChannelSignal {
            symbols,
            power_scale: 1.0,
            degenerate_power: true,
        });
    }
    let n_sym = g.value(symbols).numel() / 2;
    let sq = g.mul(symbols, symbols)?;
    let total = g.sum(sq);
    let mean = g.scale(total, 1.0 / n_sym as f64);
    let scale = g.powf(mean, -0.5);
    let power_scale = g.value(scale).item();
    let out = g.scale_by(symbols, scale)?;
    Ok(ChannelSignal {
        symbols: out,
        power_scale,
        degenerate_power: false,
    })
}

/// `y = h·x + n`, with `h = 1` on AWGN.
pub fn transmit(g: &mut Graph, sig: ChannelSignal, real: &ChannelRealization) -> Result<ChannelSignal> {
    let faded = match real.kind {
        ChannelKind::Awgn => sig.symbols,
        ChannelKind::Rayleigh => g.complex_scale(sig.symbols, real.h.0, real.h.1)?,
    };
    let out = if real.noise_variance() == 0.0 {
        faded
    } else {
        let noise = g.constant(real.noise(g.shape(faded)));
        g.add(faded, noise)?
    };
    Ok(ChannelSignal {
        symbols: out,
        ..sig
    })
}

/// `x̂ = conj(h)·y / (|h|² + σ²)`; AWGN passes through unchanged.
pub fn mmse_equalize(g: &mut Graph, sig: ChannelSignal, real: &ChannelRealization) -> Result<ChannelSignal> {
    if real.kind == ChannelKind::Awgn {
        return Ok(sig);
    }
    let (hr, hi) = real.h;
    let denom = hr * hr + hi * hi + real.noise_variance();
    let out = g.complex_scale(sig.symbols, hr / denom, -hi / denom)?;
    Ok(ChannelSignal {
        symbols: out,
        ..sig
    })
}

/// `x̂ = y / h`, used as the baseline MMSE is compared against.
pub fn zero_forcing(g: &mut Graph, sig: ChannelSignal, real: &ChannelRealization) -> Result<ChannelSignal> {
    let (hr, hi) = real.h;
    let mag = hr * hr + hi * hi;
    let out = g.complex_scale(sig.symbols, hr / mag, -hi / mag)?;
    Ok(ChannelSignal {
        symbols: out,
        ..sig
    })
}
