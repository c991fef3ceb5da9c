use rand::Rng;

use super::{vs6_forward, AbarRule, DirectionVars, Vs6Vars};
use crate::graph::{Graph, Var};
use crate::params::{normal, Bindings, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Layer-norm epsilon used inside every block.
pub const NORM_EPS: f64 = 1e-5;

/// Standard deviation of the V-S6 projection matrices at initialization.
pub const PROJ_INIT_STD: f64 = 0.02;

/// Initial diagonal of `δ`, so `Δ` starts at small positive time steps.
pub const DELTA_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsmConfig {
    /// State dimension `N`.
    pub state_dim: usize,
    /// Channel expansion of the scan branch.
    pub expand: usize,
    /// Depthwise kernel size of the scan branch (odd, same padding).
    pub conv_kernel: usize,
    pub abar_rule: AbarRule,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            state_dim: 16,
            expand: 2,
            conv_kernel: 3,
            abar_rule: AbarRule::MatrixExp,
        }
    }
}

/// One VSSM block over a `[c, h, w]` grid:
///
/// ```text
/// n   = LayerNorm_c(x)
/// s   = V-S6_per_channel( SiLU(DWConv(W_in·n)) + csi )
/// out = x + W_out·( s ⊙ SiLU(W_gate·n) )
/// ```
///
/// The V-S6 weights of all `c_z = expand·c` channels are stored stacked,
/// e.g. `h1` is `[c_z, 4, N, D]`.
#[derive(Clone, Debug)]
pub struct VssmBlock {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub cfg: SsmConfig,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub g: ParamId,
    pub delta: ParamId,
    pub h1: ParamId,
    pub h2: ParamId,
    pub h3: ParamId,
    pub a: ParamId,
    pub d: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

fn lecun<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    normal(rng, shape, (1.0 / fan_in as f64).sqrt())
}

impl VssmBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        height: usize,
        width: usize,
        cfg: SsmConfig,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let cz = cfg.expand * c;
        let n = cfg.state_dim;
        let seq = height * width;
        let k = cfg.conv_kernel;
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);

        let norm_gamma = add("norm.gamma", Tensor::ones(&[c]));
        let norm_beta = add("norm.beta", Tensor::zeros(&[c]));
        let in_w = add("in_proj.w", normal(rng, &[cz, c], PROJ_INIT_STD));
        let in_b = add("in_proj.b", Tensor::zeros(&[cz]));
        let conv_w = add("dwconv.w", lecun(rng, &[cz, 1, k, k], k * k));
        let conv_b = add("dwconv.b", Tensor::zeros(&[cz]));

        let g = add("vs6.g", normal(rng, &[cz, 4, 1, n], PROJ_INIT_STD));
        let mut delta0 = Tensor::zeros(&[cz, 4, n, n]);
        let mut a0 = Tensor::zeros(&[cz, 4, n, n]);
        for blk in 0..cz * 4 {
            for i in 0..n {
                delta0.data_mut()[blk * n * n + i * n + i] = DELTA_INIT;
                a0.data_mut()[blk * n * n + i * n + i] = -1.0;
            }
        }
        let delta = add("vs6.delta", delta0);
        let h1 = add("vs6.h1", normal(rng, &[cz, 4, n, seq], PROJ_INIT_STD));
        let h2 = add("vs6.h2", normal(rng, &[cz, 4, n, seq], PROJ_INIT_STD));
        let h3 = add("vs6.h3", normal(rng, &[cz, 4, n, seq], PROJ_INIT_STD));
        let a = add("vs6.a", a0);
        let d = add("vs6.d", Tensor::ones(&[cz, 4, 1, 1]));

        let gate_w = add("gate_proj.w", normal(rng, &[cz, c], PROJ_INIT_STD));
        let gate_b = add("gate_proj.b", Tensor::zeros(&[cz]));
        let out_w = add("out_proj.w", normal(rng, &[c, cz], PROJ_INIT_STD));
        let out_b = add("out_proj.b", Tensor::zeros(&[c]));

        Self {
            channels,
            height,
            width,
            cfg,
            norm_gamma,
            norm_beta,
            in_w,
            in_b,
            conv_w,
            conv_b,
            g,
            delta,
            h1,
            h2,
            h3,
            a,
            d,
            gate_w,
            gate_b,
            out_w,
            out_b,
        }
    }

    /// Channels seen by the V-S6 modules, `c_z`.
    pub fn inner_channels(&self) -> usize {
        self.cfg.expand * self.channels
    }

    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }

    /// Slices the stacked V-S6 weights of channel `i`.
    pub fn vs6_vars(&self, g: &mut Graph, p: &Bindings, i: usize) -> Result<Vs6Vars> {
        let mut per_channel = [p[self.g]; 7];
        for (slot, id) in per_channel
            .iter_mut()
            .zip([self.g, self.delta, self.h1, self.h2, self.h3, self.a, self.d])
        {
            *slot = g.select(p[id], i)?;
        }
        let mut dirs = Vec::with_capacity(4);
        for j in 0..4 {
            let m: Vec<Var> = per_channel
                .iter()
                .map(|&v| g.select(v, j))
                .collect::<Result<_>>()?;
            dirs.push(DirectionVars {
                g: m[0],
                delta: m[1],
                h1: m[2],
                h2: m[3],
                h3: m[4],
                a: m[5],
                d: m[6],
            });
        }
        Ok(Vs6Vars {
            dirs: dirs.try_into().expect("four directions"),
        })
    }

    /// `csi_add`, when present, is one additive value per scan channel.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, csi_add: Option<Var>) -> Result<Var> {
        let (c, h, w) = (self.channels, self.height, self.width);
        if g.shape(x) != [c, h, w] {
            return Err(TensorError::InvalidShape {
                op: "vssm_block_forward",
                shape: g.shape(x).to_vec(),
                reason: format!("expected [{c}, {h}, {w}]"),
            });
        }
        let cz = self.inner_channels();
        let flat = g.reshape(x, &[c, h * w])?;
        let tokens = g.transpose2d(flat)?;
        let normed = g.layer_norm(tokens, p[self.norm_gamma], p[self.norm_beta], NORM_EPS)?;
        let normed = g.transpose2d(normed)?;

        let b1 = g.matmul(p[self.in_w], normed)?;
        let b1 = g.add_bias(b1, p[self.in_b], true)?;
        let b1 = g.reshape(b1, &[cz, h, w])?;
        let b1 = g.depthwise_conv2d(b1, p[self.conv_w], self.cfg.conv_kernel / 2)?;
        let b1 = g.add_bias(b1, p[self.conv_b], true)?;
        let mut b1 = g.silu(b1);
        if let Some(add) = csi_add {
            b1 = g.add_bias(b1, add, true)?;
        }

        let mut scanned = Vec::with_capacity(cz);
        for i in 0..cz {
            let z = g.select(b1, i)?;
            let vars = self.vs6_vars(g, p, i)?;
            scanned.push(vs6_forward(g, z, &vars, self.cfg.abar_rule)?);
        }
        let s = g.stack(&scanned)?;
        let s = g.reshape(s, &[cz, h * w])?;

        let gate = g.matmul(p[self.gate_w], normed)?;
        let gate = g.add_bias(gate, p[self.gate_b], true)?;
        let gate = g.silu(gate);
        let mixed = g.mul(s, gate)?;

        let out = g.matmul(p[self.out_w], mixed)?;
        let out = g.add_bias(out, p[self.out_b], true)?;
        let out = g.add(flat, out)?;
        g.reshape(out, &[c, h, w])
    }
}
