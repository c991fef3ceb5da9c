//! Visual selective scan: four directional flattenings of a 2-D patch, one
//! state-space recurrence per direction, and the merge back to 2-D.
//!
//! `vec(·)` is column-major stacking, so `v1` scans down columns and `v2`
//! (the vectorized transpose) scans along rows. `v3` and `v4` are their
//! reversals. The merge undoes each ordering so every term lands in the
//! original orientation.

mod block;

pub use block::{SsmConfig, VssmBlock, DELTA_INIT, NORM_EPS, PROJ_INIT_STD};

use nalgebra::DMatrix;

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Upper clamp on every exponent fed to `exp`.
pub const EXP_CLAMP: f64 = 20.0;

/// How the state matrix is discretized from `Δ·A`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AbarRule {
    /// `Ā = expm(Δ·A)`, the zero-order-hold state transition.
    #[default]
    MatrixExp,
    /// `Ā = exp(Δ·A)` applied entry by entry.
    Elementwise,
}

impl AbarRule {
    pub fn as_str(self) -> &'static str {
        match self {
            AbarRule::MatrixExp => "matrix",
            AbarRule::Elementwise => "elementwise",
        }
    }
}

impl std::str::FromStr for AbarRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "matrix" => Ok(AbarRule::MatrixExp),
            "elementwise" => Ok(AbarRule::Elementwise),
            other => Err(format!("unknown abar rule {other:?} (matrix|elementwise)")),
        }
    }
}

/// The seven learnable matrices of one scan direction, bound on a graph.
///
/// Shapes: `g[1,N]`, `delta[N,N]`, `h1/h2/h3[N,D]`, `a[N,N]`, `d[1,1]`.
#[derive(Clone, Copy, Debug)]
pub struct DirectionVars {
    pub g: Var,
    pub delta: Var,
    pub h1: Var,
    pub h2: Var,
    pub h3: Var,
    pub a: Var,
    pub d: Var,
}

/// Parameters of one V-S6 module: exactly four directions.
#[derive(Clone, Copy, Debug)]
pub struct Vs6Vars {
    pub dirs: [DirectionVars; 4],
}

/// Plain-value parameters of one direction, for building test instances.
#[derive(Clone, Debug)]
pub struct DirectionParams {
    pub g: Tensor,
    pub delta: Tensor,
    pub h1: Tensor,
    pub h2: Tensor,
    pub h3: Tensor,
    pub a: Tensor,
    pub d: Tensor,
}

impl DirectionParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DirectionVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        DirectionVars {
            g: leaf(&self.g),
            delta: leaf(&self.delta),
            h1: leaf(&self.h1),
            h2: leaf(&self.h2),
            h3: leaf(&self.h3),
            a: leaf(&self.a),
            d: leaf(&self.d),
        }
    }
}

/// Hidden state of a scan driven one element at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    pub h: Vec<f64>,
    pub t: usize,
}

impl ScanState {
    pub fn new(state_dim: usize) -> Self {
        Self {
            h: vec![0.0; state_dim],
            t: 0,
        }
    }

    /// Advances by one element and returns `y_t`.
    pub fn step(&mut self, abar: &Tensor, bbar: &Tensor, c: &Tensor, d: f64, v: f64) -> f64 {
        let n = self.h.len();
        let a = abar.data();
        let next: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| a[i * n + j] * self.h[j]).sum::<f64>() + bbar.data()[i] * v)
            .collect();
        self.h = next;
        self.t += 1;
        c.data().iter().zip(&self.h).map(|(c, h)| c * h).sum::<f64>() + d * v
    }
}

/// `[v1, v2, v3, v4] = [vec(z), vec(zᵀ), R(vec(z)), R(vec(zᵀ))]`, each of
/// length `h·w`.
pub fn flatten_four_directions(g: &mut Graph, z: Var) -> Result<[Var; 4]> {
    let shape = g.shape(z).to_vec();
    let &[h, w] = shape.as_slice() else {
        return Err(TensorError::InvalidShape {
            op: "flatten_four_directions",
            shape,
            reason: "expected a 2-D patch".into(),
        });
    };
    let zt = g.transpose2d(z)?;
    let v1 = g.reshape(zt, &[h * w])?;
    let v2 = g.reshape(z, &[h * w])?;
    let v3 = g.reverse(v1);
    let v4 = g.reverse(v2);
    Ok([v1, v2, v3, v4])
}

/// `Δ = (H1·v)·G + δ`, `B = H2·v`, `C = (H3·v)ᵀ`.
pub fn project_parameters(g: &mut Graph, v: Var, p: &DirectionVars) -> Result<(Var, Var, Var)> {
    let d = g.value(v).numel();
    let col = g.reshape(v, &[d, 1])?;
    let h1v = g.matmul(p.h1, col)?;
    let outer = g.matmul(h1v, p.g)?;
    let delta = g.add(outer, p.delta)?;
    let b = g.matmul(p.h2, col)?;
    let h3v = g.matmul(p.h3, col)?;
    let n = g.shape(h3v)[0];
    let c = g.reshape(h3v, &[1, n])?;
    Ok((delta, b, c))
}

/// `Ā` from `Δ·A` under `rule`, and the first-order `B̄ = Δ·B`.
pub fn discretize_taylor(
    g: &mut Graph,
    delta: Var,
    a: Var,
    b: Var,
    rule: AbarRule,
) -> Result<(Var, Var)> {
    let da = g.matmul(delta, a)?;
    let clamped = g.clamp_max(da, EXP_CLAMP);
    let abar = match rule {
        AbarRule::MatrixExp => g.expm(clamped)?,
        AbarRule::Elementwise => g.exp(clamped),
    };
    let bbar = g.matmul(delta, b)?;
    Ok((abar, bbar))
}

/// Exact zero-order hold:
/// `Ā = expm(ΔA)`, `B̄ = (ΔA)⁻¹ (expm(ΔA) − I) Δ B`.
pub fn discretize_zoh_exact(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = delta.shape()[0];
    let dm = DMatrix::from_row_slice(n, n, delta.data());
    let am = DMatrix::from_row_slice(n, n, a.data());
    let bm = DMatrix::from_row_slice(n, 1, b.data());
    let m = &dm * &am;
    let inv = m
        .clone()
        .try_inverse()
        .ok_or(TensorError::Singular("discretize_zoh_exact"))?;
    let e = m.exp();
    let bbar = inv * (&e - DMatrix::identity(n, n)) * (&dm * bm);
    let to_vec = |x: &DMatrix<f64>| -> Vec<f64> {
        (0..x.nrows())
            .flat_map(|i| (0..x.ncols()).map(move |j| x[(i, j)]))
            .collect()
    };
    Ok((
        Tensor::new(&[n, n], to_vec(&e))?,
        Tensor::new(&[n, 1], to_vec(&bbar))?,
    ))
}

/// Column-major reshape of a flat vector into an `rows×cols` matrix.
fn column_major(g: &mut Graph, y: Var, rows: usize, cols: usize) -> Result<Var> {
    let t = g.reshape(y, &[cols, rows])?;
    g.transpose2d(t)
}

/// Rebuilds the four directional matrices from flat scan outputs:
/// `Y¹, Y³` as `h×w` and `Y², Y⁴` as `w×h`.
pub fn fold_outputs(g: &mut Graph, ys: [Var; 4], h: usize, w: usize) -> Result<[Var; 4]> {
    Ok([
        column_major(g, ys[0], h, w)?,
        column_major(g, ys[1], w, h)?,
        column_major(g, ys[2], h, w)?,
        column_major(g, ys[3], w, h)?,
    ])
}

/// `Y = Y¹ + (Y²)ᵀ + R(Y³ + (Y⁴)ᵀ)`.
pub fn merge_directions(g: &mut Graph, ys: [Var; 4]) -> Result<Var> {
    let y2t = g.transpose2d(ys[1])?;
    let y4t = g.transpose2d(ys[3])?;
    let front = g.add(ys[0], y2t)?;
    let back = g.add(ys[2], y4t)?;
    let back = g.reverse(back);
    g.add(front, back)
}

/// One V-S6 module applied to a single `h×w` patch.
pub fn vs6_forward(g: &mut Graph, z: Var, p: &Vs6Vars, rule: AbarRule) -> Result<Var> {
    let (h, w) = {
        let s = g.shape(z);
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "vs6_forward",
                shape: s.to_vec(),
                reason: "expected a 2-D patch".into(),
            });
        }
        (s[0], s[1])
    };
    let vs = flatten_four_directions(g, z)?;
    let mut ys = [vs[0]; 4];
    for (j, dir) in p.dirs.iter().enumerate() {
        let (delta, b, c) = project_parameters(g, vs[j], dir)?;
        let (abar, bbar) = discretize_taylor(g, delta, dir.a, b, rule)?;
        ys[j] = g.selective_scan(vs[j], abar, bbar, c, dir.d)?;
    }
    let mats = fold_outputs(g, ys, h, w)?;
    merge_directions(g, mats)
}
