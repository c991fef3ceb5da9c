//! Central finite-difference checks of graph gradients.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of every backward rule it is compared against.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; central differences cannot resolve relative error below it.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares autodiff gradients of the scalar built by `f` against central
/// differences with step `step`.
///
/// With `per_input = Some((k, seed))` only `k` randomly chosen coordinates of
/// each input are perturbed; otherwise every coordinate is.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    step: f64,
    per_input: Option<(usize, u64)>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = per_input.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match (&mut rng, per_input) {
            (Some(rng), Some((k, _))) if k < t.numel() => sample(rng, t.numel(), k).into_vec(),
            _ => (0..t.numel()).collect(),
        };
        for idx in coords {
            let orig = t.data()[idx];
            work[ti].data_mut()[idx] = orig + step;
            let plus = evaluate(&f, &work)?;
            work[ti].data_mut()[idx] = orig - step;
            let minus = evaluate(&f, &work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[idx];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Reduces `x` to a scalar with fixed pseudo-random weights, so every
/// output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = crate::params::normal(&mut rng, g.shape(x), 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn positive(t: Tensor) -> Tensor {
    t.map(|x| x.abs() + 0.5)
}

/// One named primitive: input shapes, an input transform and the op.
struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    positive: bool,
    build: Build,
}

const CASES: &[Case] = &[
    Case { name: "add", shapes: &[&[2, 3], &[2, 3]], positive: false, build: |g, v| g.add(v[0], v[1]) },
    Case { name: "sub", shapes: &[&[2, 3], &[2, 3]], positive: false, build: |g, v| g.sub(v[0], v[1]) },
    Case { name: "mul", shapes: &[&[2, 3], &[2, 3]], positive: false, build: |g, v| g.mul(v[0], v[1]) },
    Case { name: "scale", shapes: &[&[5]], positive: false, build: |g, v| Ok(g.scale(v[0], -1.7)) },
    Case { name: "add_scalar", shapes: &[&[5]], positive: false, build: |g, v| Ok(g.add_scalar(v[0], 0.3)) },
    Case { name: "scale_by", shapes: &[&[2, 2], &[1]], positive: false, build: |g, v| g.scale_by(v[0], v[1]) },
    Case { name: "exp", shapes: &[&[4]], positive: false, build: |g, v| Ok(g.exp(v[0])) },
    Case { name: "reciprocal", shapes: &[&[4]], positive: true, build: |g, v| Ok(g.reciprocal(v[0])) },
    Case { name: "powf", shapes: &[&[4]], positive: true, build: |g, v| Ok(g.powf(v[0], -0.5)) },
    Case { name: "silu", shapes: &[&[6]], positive: false, build: |g, v| Ok(g.silu(v[0])) },
    Case { name: "clamp_max", shapes: &[&[6]], positive: false, build: |g, v| {
        let s = g.scale(v[0], 10.0);
        Ok(g.clamp_max(s, 100.0))
    } },
    Case { name: "reverse", shapes: &[&[2, 3]], positive: false, build: |g, v| Ok(g.reverse(v[0])) },
    Case { name: "transpose2d", shapes: &[&[2, 3]], positive: false, build: |g, v| g.transpose2d(v[0]) },
    Case { name: "reshape", shapes: &[&[2, 3]], positive: false, build: |g, v| g.reshape(v[0], &[3, 2]) },
    Case { name: "select", shapes: &[&[3, 2, 2]], positive: false, build: |g, v| g.select(v[0], 1) },
    Case { name: "stack", shapes: &[&[2, 2], &[2, 2]], positive: false, build: |g, v| g.stack(&[v[0], v[1]]) },
    Case { name: "sum", shapes: &[&[2, 3]], positive: false, build: |g, v| Ok(g.sum(v[0])) },
    Case { name: "mean", shapes: &[&[2, 3]], positive: false, build: |g, v| Ok(g.mean(v[0])) },
    Case { name: "matmul", shapes: &[&[2, 3], &[3, 4]], positive: false, build: |g, v| g.matmul(v[0], v[1]) },
    Case { name: "expm", shapes: &[&[3, 3]], positive: false, build: |g, v| g.expm(v[0]) },
    Case { name: "conv2d", shapes: &[&[2, 5, 5], &[3, 2, 3, 3]], positive: false, build: |g, v| g.conv2d(v[0], v[1], 1, 1) },
    Case { name: "conv2d_stride2", shapes: &[&[2, 6, 6], &[3, 2, 2, 2]], positive: false, build: |g, v| g.conv2d(v[0], v[1], 2, 0) },
    Case { name: "depthwise_conv2d", shapes: &[&[3, 4, 5], &[3, 1, 3, 3]], positive: false, build: |g, v| g.depthwise_conv2d(v[0], v[1], 1) },
    Case { name: "add_bias_leading", shapes: &[&[3, 2, 2], &[3]], positive: false, build: |g, v| g.add_bias(v[0], v[1], true) },
    Case { name: "add_bias_trailing", shapes: &[&[2, 3], &[3]], positive: false, build: |g, v| g.add_bias(v[0], v[1], false) },
    Case { name: "layer_norm", shapes: &[&[3, 4], &[4], &[4]], positive: false, build: |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5) },
    Case { name: "pixel_shuffle", shapes: &[&[8, 2, 2]], positive: false, build: |g, v| g.pixel_shuffle(v[0], 2) },
    Case { name: "pixel_unshuffle", shapes: &[&[2, 4, 4]], positive: false, build: |g, v| g.pixel_unshuffle(v[0], 2) },
    Case { name: "complex_scale", shapes: &[&[2, 2, 3]], positive: false, build: |g, v| g.complex_scale(v[0], 0.6, -1.3) },
    Case { name: "selective_scan", shapes: &[&[7], &[3, 3], &[3, 1], &[1, 3], &[1, 1]], positive: false, build: |g, v| {
        let a = g.scale(v[1], 0.3);
        g.selective_scan(v[0], a, v[2], v[3], v[4])
    } },
];

/// Gradient checks of every differentiable graph primitive on random
/// inputs drawn from `seed`, reduced through [`weighted_sum`].
pub fn primitive_suite(seed: u64, step: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(CASES.len());
    for case in CASES {
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let t = crate::params::normal(&mut rng, s, 1.0);
                if case.positive {
                    positive(t)
                } else {
                    t
                }
            })
            .collect();
        let build = case.build;
        let report = check_gradients(&inputs, step, None, |g, v| {
            let y = build(g, v)?;
            weighted_sum(g, y, seed)
        })?;
        out.push((case.name, report));
    }
    Ok(out)
}
