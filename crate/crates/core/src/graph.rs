//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its nodes in creation
//! order, so the node list is already topologically sorted. [`Graph::backward`]
//! walks it once in reverse and accumulates gradients into every node that
//! participates in a differentiable path from a `param` leaf.
//!
//! Broadcasting is limited to scalar-tensor forms (`scale`, `scale_by`,
//! `add_scalar`) and the explicit per-axis `add_bias`.

use crate::linalg;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Exp(Var),
    Reciprocal(Var),
    Powf(Var, f64),
    Silu(Var),
    ClampMax(Var, f64),
    Reverse(Var),
    Transpose2d(Var),
    Reshape(Var),
    Select(Var, usize),
    Stack(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Expm(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        padding: usize,
    },
    AddBias {
        x: Var,
        b: Var,
        leading: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    ComplexScale {
        x: Var,
        re: f64,
        im: f64,
    },
    SelectiveScan {
        v: Var,
        abar: Var,
        bbar: Var,
        c: Var,
        d: Var,
        states: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape: nodes in creation order plus their gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    macs: u64,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_out(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations recorded by forward evaluation so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Every node in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Name of the op that produced `v`, e.g. `"MatMul"` or `"Leaf"`.
    pub fn op_name(&self, v: Var) -> String {
        let name = format!("{:?}", self.nodes[v.0].op);
        name.split([' ', '(', '{']).next().unwrap_or("").to_string()
    }

    /// First node whose value holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.vars().find(|&v| !self.value(v).all_finite())
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as data: no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `x · s` where `s` is a one-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(invalid("scale_by", ts.shape(), "scale must have one element"));
        }
        let k = ts.item();
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn reciprocal(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Reciprocal(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// Swish with unit β, which coincides with SiLU.
    pub fn swish(&mut self, x: Var) -> Var {
        self.silu(x)
    }

    pub fn clamp_max(&mut self, x: Var, max: f64) -> Var {
        self.unary(x, |v| v.min(max), Op::ClampMax(x, max))
    }

    /// Reverses the flat element order, keeping the shape.
    pub fn reverse(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut data = t.data().to_vec();
        data.reverse();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Reverse(x), rg)
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[r, c] = t.shape() else {
            return Err(invalid("transpose2d", t.shape(), "expected rank 2"));
        };
        let value = Tensor::from_parts(vec![c, r], linalg::transpose(t.data(), r, c));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose2d(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape).map_err(|_| {
            invalid(
                "reshape",
                self.shape(x),
                format!("cannot reshape into {shape:?}"),
            )
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Index along the leading axis. A rank-1 input yields a one-element tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let n0 = t.shape()[0];
        if index >= n0 {
            return Err(invalid("select", t.shape(), format!("index {index} out of range")));
        }
        let inner: Vec<usize> = if t.rank() == 1 {
            vec![1]
        } else {
            t.shape()[1..].to_vec()
        };
        let len: usize = inner.iter().product();
        let data = t.data()[index * len..(index + 1) * len].to_vec();
        let value = Tensor::from_parts(inner, data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Select(x, index), rg))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("stack", &[], "nothing to stack"));
        };
        let inner = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(first).numel());
        for &p in parts {
            let t = self.value(p);
            if t.shape() != inner.as_slice() {
                return Err(mismatch("stack", self.value(first), t));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Stack(parts.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(mismatch("matmul", ta, tb));
        };
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let data = linalg::matmul(ta.data(), tb.data(), m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), rg))
    }

    /// Matrix exponential of a square matrix.
    pub fn expm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[n, n2] = t.shape() else {
            return Err(invalid("expm", t.shape(), "expected a square matrix"));
        };
        if n != n2 {
            return Err(invalid("expm", t.shape(), "expected a square matrix"));
        }
        let data = linalg::expm(t.data(), n);
        self.macs += EXPM_MAC_FACTOR * (n * n * n) as u64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, n], data), Op::Expm(x), rg))
    }

    /// Cross-correlation of `x[C_in,H,W]` with `w[C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (&[ci, h, wd], &[co, ci2, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(mismatch("conv2d", tx, tw));
        };
        if ci != ci2 || kh != kw || kh == 0 || stride == 0 {
            return Err(mismatch("conv2d", tx, tw));
        }
        let k = kh;
        let (Some(oh), Some(ow)) = (conv_out(h, k, stride, padding), conv_out(wd, k, stride, padding))
        else {
            return Err(invalid("conv2d", tx.shape(), "non-positive output size"));
        };
        let (xd, wdat) = (tx.data(), tw.data());
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for c in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((o * ci + c) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                out[(o * oh + oy) * ow + ox] +=
                                    wv * xd[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        self.macs += (co * ci * k * k * oh * ow) as u64;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(vec![co, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Per-channel convolution of `x[C,H,W]` with `w[C,1,k,k]`, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (&[c, h, wd], &[c2, 1, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(mismatch("depthwise_conv2d", tx, tw));
        };
        if c != c2 || kh != kw {
            return Err(mismatch("depthwise_conv2d", tx, tw));
        }
        let k = kh;
        let (Some(oh), Some(ow)) = (conv_out(h, k, 1, padding), conv_out(wd, k, 1, padding)) else {
            return Err(invalid("depthwise_conv2d", tx.shape(), "non-positive output size"));
        };
        let (xd, wdat) = (tx.data(), tw.data());
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[(ch * k + ky) * k + kx];
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            out[(ch * oh + oy) * ow + ox] +=
                                wv * xd[(ch * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
            }
        }
        self.macs += (c * k * k * oh * ow) as u64;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(vec![c, oh, ow], out),
            Op::DepthwiseConv2d { x, w, padding },
            rg,
        ))
    }

    /// Adds `b[n]` along the leading axis (`leading = true`, one value per
    /// slice `x[i, ..]`) or along the trailing axis (one value per column).
    pub fn add_bias(&mut self, x: Var, b: Var, leading: bool) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let axis_len = if leading {
            tx.shape()[0]
        } else {
            *tx.shape().last().unwrap()
        };
        if tb.numel() != axis_len {
            return Err(mismatch("add_bias", tx, tb));
        }
        let bd = tb.data();
        let inner = tx.numel() / tx.shape()[0];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = if leading { i / inner } else { i % axis_len };
                v + bd[j]
            })
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias { x, b, leading }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    /// A zero-variance row with `eps = 0` maps to `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape().last().unwrap();
        if tg.numel() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.numel() != d {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = var + eps;
            let s = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            rstd[r] = s;
            for j in 0..d {
                let xh = (row[j] - mean) * s;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// `[C·r², H, W] → [C, rH, rW]`; output channel `c` at offset `(i, j)`
    /// inside each `r×r` cell reads input channel `c·r² + i·r + j`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = self.value(x);
        let &[cr, h, w] = t.shape() else {
            return Err(invalid("pixel_shuffle", t.shape(), "expected rank 3"));
        };
        if r == 0 || cr % (r * r) != 0 {
            return Err(invalid("pixel_shuffle", t.shape(), format!("channels not divisible by {r}²")));
        }
        let c = cr / (r * r);
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in shuffle_pairs(c, h, w, r) {
            out[dst] = t.data()[src];
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, h * r, w * r], out),
            Op::PixelShuffle(x, r),
            rg,
        ))
    }

    /// Exact inverse of [`Graph::pixel_shuffle`]: `[C, rH, rW] → [C·r², H, W]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = self.value(x);
        let &[c, hr, wr] = t.shape() else {
            return Err(invalid("pixel_unshuffle", t.shape(), "expected rank 3"));
        };
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(invalid("pixel_unshuffle", t.shape(), format!("spatial dims not divisible by {r}")));
        }
        let (h, w) = (hr / r, wr / r);
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in shuffle_pairs(c, h, w, r) {
            out[src] = t.data()[dst];
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c * r * r, h, w], out),
            Op::PixelUnshuffle(x, r),
            rg,
        ))
    }

    /// Multiplies complex symbols by the constant `re + i·im`. The input is
    /// laid out `[.., 2, L]`: row 0 holds real parts, row 1 imaginary parts.
    pub fn complex_scale(&mut self, x: Var, re: f64, im: f64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 || t.shape()[t.rank() - 2] != 2 {
            return Err(invalid("complex_scale", t.shape(), "expected [.., 2, L] layout"));
        }
        let l = t.shape()[t.rank() - 1];
        let mut out = t.data().to_vec();
        for block in out.chunks_exact_mut(2 * l) {
            let (rp, ip) = block.split_at_mut(l);
            for (a, b) in rp.iter_mut().zip(ip.iter_mut()) {
                let (xr, xi) = (*a, *b);
                *a = re * xr - im * xi;
                *b = re * xi + im * xr;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ComplexScale { x, re, im }, rg))
    }

    /// Linear recurrence `h_t = Ā h_{t−1} + B̄ v_t`, `y_t = C h_t + D v_t`
    /// from `h_0 = 0` over every element of `v`.
    ///
    /// Shapes: `abar[N,N]`, `bbar[N,1]`, `c[1,N]`, `d[1,1]`; the output has
    /// shape `[len(v)]`.
    pub fn selective_scan(&mut self, v: Var, abar: Var, bbar: Var, c: Var, d: Var) -> Result<Var> {
        let n = self.shape(abar)[0];
        let check = |g: &Graph, var: Var, want: &[usize]| -> Result<()> {
            if g.shape(var) != want {
                return Err(invalid("selective_scan", g.shape(var), format!("expected {want:?}")));
            }
            Ok(())
        };
        check(self, abar, &[n, n])?;
        check(self, bbar, &[n, 1])?;
        check(self, c, &[1, n])?;
        check(self, d, &[1, 1])?;
        let (vd, a, b, cd, dd) = (
            self.value(v).data(),
            self.value(abar).data(),
            self.value(bbar).data(),
            self.value(c).data(),
            self.value(d).item(),
        );
        let len = vd.len();
        let mut states = vec![0.0; len * n];
        let mut y = vec![0.0; len];
        let mut h = vec![0.0; n];
        let mut next = vec![0.0; n];
        for t in 0..len {
            for i in 0..n {
                let mut acc = b[i] * vd[t];
                for j in 0..n {
                    acc += a[i * n + j] * h[j];
                }
                next[i] = acc;
            }
            std::mem::swap(&mut h, &mut next);
            states[t * n..(t + 1) * n].copy_from_slice(&h);
            y[t] = cd.iter().zip(&h).map(|(ci, hi)| ci * hi).sum::<f64>() + dd * vd[t];
        }
        self.macs += scan_macs(len, n);
        let rg = self.rg(&[v, abar, bbar, c, d]);
        Ok(self.push(
            Tensor::from_parts(vec![len], y),
            Op::SelectiveScan {
                v,
                abar,
                bbar,
                c,
                d,
                states,
            },
            rg,
        ))
    }

    /// Runs reverse-mode accumulation from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Adds a contribution into `v`'s gradient buffer if `v` needs one.
    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g, &self.nodes);
    }

    fn propagate(&mut self, i: usize, gy: &[f64]) {
        // The op is moved out while its saved buffers are read, then restored.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |g, _| add_into(g, gy));
                self.acc(*b, |g, _| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |g, _| add_into(g, gy));
                self.acc(*b, |g, _| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |g, nodes| {
                    let bv = nodes[b.0].value.data();
                    for k in 0..g.len() {
                        g[k] += gy[k] * bv[k];
                    }
                });
                self.acc(b, |g, nodes| {
                    let av = nodes[a.0].value.data();
                    for k in 0..g.len() {
                        g[k] += gy[k] * av[k];
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(*x, |g, _| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * s));
            }
            Op::AddScalar(x) => self.acc(*x, |g, _| add_into(g, gy)),
            Op::ScaleBy(x, s) => {
                let (x, s) = (*x, *s);
                self.acc(x, |g, nodes| {
                    let k = nodes[s.0].value.item();
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * k);
                });
                self.acc(s, |g, nodes| {
                    let xv = nodes[x.0].value.data();
                    g[0] += xv.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::Exp(x) => {
                self.acc(*x, |g, nodes| {
                    let y = nodes[i].value.data();
                    for k in 0..g.len() {
                        g[k] += gy[k] * y[k];
                    }
                });
            }
            Op::Reciprocal(x) => {
                self.acc(*x, |g, nodes| {
                    let y = nodes[i].value.data();
                    for k in 0..g.len() {
                        g[k] -= gy[k] * y[k] * y[k];
                    }
                });
            }
            Op::Powf(x, p) => {
                let (x, p) = (*x, *p);
                self.acc(x, |g, nodes| {
                    let xv = nodes[x.0].value.data();
                    for k in 0..g.len() {
                        g[k] += gy[k] * p * xv[k].powf(p - 1.0);
                    }
                });
            }
            Op::Silu(x) => {
                let x = *x;
                self.acc(x, |g, nodes| {
                    let xv = nodes[x.0].value.data();
                    for k in 0..g.len() {
                        let s = sigmoid(xv[k]);
                        g[k] += gy[k] * s * (1.0 + xv[k] * (1.0 - s));
                    }
                });
            }
            Op::ClampMax(x, max) => {
                let (x, max) = (*x, *max);
                self.acc(x, |g, nodes| {
                    let xv = nodes[x.0].value.data();
                    for k in 0..g.len() {
                        if xv[k] <= max {
                            g[k] += gy[k];
                        }
                    }
                });
            }
            Op::Reverse(x) => {
                self.acc(*x, |g, _| {
                    for (gk, d) in g.iter_mut().zip(gy.iter().rev()) {
                        *gk += d;
                    }
                });
            }
            Op::Transpose2d(x) => {
                let x = *x;
                self.acc(x, |g, nodes| {
                    let s = nodes[x.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    // gy is [c, r]
                    for a in 0..r {
                        for b in 0..c {
                            g[a * c + b] += gy[b * r + a];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(*x, |g, _| add_into(g, gy)),
            Op::Select(x, index) => {
                let (x, index) = (*x, *index);
                let len = gy.len();
                self.acc(x, |g, _| add_into(&mut g[index * len..(index + 1) * len], gy));
            }
            Op::Stack(parts) => {
                let len = gy.len() / parts.len();
                for (p, &v) in parts.iter().enumerate() {
                    self.acc(v, |g, _| add_into(g, &gy[p * len..(p + 1) * len]));
                }
            }
            Op::Sum(x) => {
                let d = gy[0];
                self.acc(*x, |g, _| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Mean(x) => {
                let d = gy[0];
                self.acc(*x, |g, _| {
                    let n = g.len() as f64;
                    g.iter_mut().for_each(|g| *g += d / n);
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.shape(a);
                    (s[0], s[1])
                };
                let n = self.shape(b)[1];
                self.acc(a, |g, nodes| {
                    let bt = linalg::transpose(nodes[b.0].value.data(), k, n);
                    linalg::matmul_acc(gy, &bt, g, m, n, k);
                });
                self.acc(b, |g, nodes| {
                    let at = linalg::transpose(nodes[a.0].value.data(), m, k);
                    linalg::matmul_acc(&at, gy, g, k, m, n);
                });
            }
            Op::Expm(x) => {
                let x = *x;
                self.acc(x, |g, nodes| {
                    let n = nodes[x.0].value.shape()[0];
                    let adj = linalg::expm_adjoint(nodes[x.0].value.data(), gy, n);
                    add_into(g, &adj);
                });
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => self.conv2d_backward(i, *x, *w, *stride, *padding, gy),
            Op::DepthwiseConv2d { x, w, padding } => {
                self.depthwise_backward(i, *x, *w, *padding, gy)
            }
            Op::AddBias { x, b, leading } => {
                let (x, b, leading) = (*x, *b, *leading);
                self.acc(x, |g, _| add_into(g, gy));
                self.acc(b, |g, nodes| {
                    let s = nodes[x.0].value.shape();
                    let inner = gy.len() / s[0];
                    let axis = g.len();
                    for (k, d) in gy.iter().enumerate() {
                        let j = if leading { k / inner } else { k % axis };
                        g[j] += d;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma).iter().product::<usize>();
                let rows = rstd.len();
                let gv = self.value(*gamma).data().to_vec();
                self.acc(*gamma, |g, _| {
                    for k in 0..gy.len() {
                        g[k % d] += gy[k] * xhat[k];
                    }
                });
                self.acc(*beta, |g, _| {
                    for k in 0..gy.len() {
                        g[k % d] += gy[k];
                    }
                });
                self.acc(*x, |g, _| {
                    for r in 0..rows {
                        let sl = r * d..(r + 1) * d;
                        let gx: Vec<f64> = gy[sl.clone()].iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let xh = &xhat[sl.clone()];
                        let mean_g = gx.iter().sum::<f64>() / d as f64;
                        let mean_gx = gx.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            g[r * d + j] += rstd[r] * (gx[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                });
            }
            Op::PixelShuffle(x, r) => {
                let (x, r) = (*x, *r);
                let s = self.shape(Var(i)).to_vec();
                self.acc(x, |g, _| {
                    for (src, dst) in shuffle_pairs(s[0], s[1] / r, s[2] / r, r) {
                        g[src] += gy[dst];
                    }
                });
            }
            Op::PixelUnshuffle(x, r) => {
                let (x, r) = (*x, *r);
                let s = self.shape(x).to_vec();
                self.acc(x, |g, _| {
                    for (src, dst) in shuffle_pairs(s[0], s[1] / r, s[2] / r, r) {
                        g[dst] += gy[src];
                    }
                });
            }
            Op::ComplexScale { x, re, im } => {
                let (x, re, im) = (*x, *re, *im);
                let l = *self.shape(x).last().unwrap();
                self.acc(x, |g, _| {
                    for (gb, yb) in g.chunks_exact_mut(2 * l).zip(gy.chunks_exact(2 * l)) {
                        let (gr, gi) = gb.split_at_mut(l);
                        let (yr, yi) = yb.split_at(l);
                        for k in 0..l {
                            gr[k] += re * yr[k] + im * yi[k];
                            gi[k] += -im * yr[k] + re * yi[k];
                        }
                    }
                });
            }
            Op::SelectiveScan {
                v,
                abar,
                bbar,
                c,
                d,
                states,
            } => self.scan_backward(*v, *abar, *bbar, *c, *d, states, gy),
        }
        self.nodes[i].op = op;
    }

    fn conv2d_backward(&mut self, i: usize, x: Var, w: Var, stride: usize, padding: usize, gy: &[f64]) {
        let (ci, h, wd) = {
            let s = self.shape(x);
            (s[0], s[1], s[2])
        };
        let (co, k) = {
            let s = self.shape(w);
            (s[0], s[2])
        };
        let (oh, ow) = {
            let s = self.shape(Var(i));
            (s[1], s[2])
        };
        let taps = move |oy: usize, ky: usize, ox: usize, kx: usize| -> Option<(usize, usize)> {
            let iy = (oy * stride + ky) as isize - padding as isize;
            let ix = (ox * stride + kx) as isize - padding as isize;
            if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                None
            } else {
                Some((iy as usize, ix as usize))
            }
        };
        self.acc(x, |g, nodes| {
            let wdat = nodes[w.0].value.data();
            for o in 0..co {
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wdat[((o * ci + c) * k + ky) * k + kx];
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    if let Some((iy, ix)) = taps(oy, ky, ox, kx) {
                                        g[(c * h + iy) * wd + ix] += wv * gy[(o * oh + oy) * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        self.acc(w, |g, nodes| {
            let xd = nodes[x.0].value.data();
            for o in 0..co {
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut s = 0.0;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    if let Some((iy, ix)) = taps(oy, ky, ox, kx) {
                                        s += xd[(c * h + iy) * wd + ix] * gy[(o * oh + oy) * ow + ox];
                                    }
                                }
                            }
                            g[((o * ci + c) * k + ky) * k + kx] += s;
                        }
                    }
                }
            }
        });
    }

    fn depthwise_backward(&mut self, i: usize, x: Var, w: Var, padding: usize, gy: &[f64]) {
        let (c, h, wd) = {
            let s = self.shape(x);
            (s[0], s[1], s[2])
        };
        let k = self.shape(w)[2];
        let (oh, ow) = {
            let s = self.shape(Var(i));
            (s[1], s[2])
        };
        let tap = move |o: usize, kk: usize, len: usize| -> Option<usize> {
            let p = (o + kk) as isize - padding as isize;
            (p >= 0 && p < len as isize).then_some(p as usize)
        };
        self.acc(x, |g, nodes| {
            let wdat = nodes[w.0].value.data();
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[(ch * k + ky) * k + kx];
                        for oy in 0..oh {
                            let Some(iy) = tap(oy, ky, h) else { continue };
                            for ox in 0..ow {
                                let Some(ix) = tap(ox, kx, wd) else { continue };
                                g[(ch * h + iy) * wd + ix] += wv * gy[(ch * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
            }
        });
        self.acc(w, |g, nodes| {
            let xd = nodes[x.0].value.data();
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut s = 0.0;
                        for oy in 0..oh {
                            let Some(iy) = tap(oy, ky, h) else { continue };
                            for ox in 0..ow {
                                let Some(ix) = tap(ox, kx, wd) else { continue };
                                s += xd[(ch * h + iy) * wd + ix] * gy[(ch * oh + oy) * ow + ox];
                            }
                        }
                        g[(ch * k + ky) * k + kx] += s;
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_backward(&mut self, v: Var, abar: Var, bbar: Var, c: Var, d: Var, states: &[f64], gy: &[f64]) {
        let n = self.shape(abar)[0];
        let len = gy.len();
        let vd = self.value(v).data().to_vec();
        let a = self.value(abar).data().to_vec();
        let b = self.value(bbar).data().to_vec();
        let cd = self.value(c).data().to_vec();
        let dd = self.value(d).item();

        // Adjoint of the hidden state, swept backwards in time.
        let mut lambda = vec![0.0; len * n];
        let mut carry = vec![0.0; n];
        for t in (0..len).rev() {
            for i in 0..n {
                lambda[t * n + i] = cd[i] * gy[t] + carry[i];
            }
            for j in 0..n {
                carry[j] = (0..n).map(|i| a[i * n + j] * lambda[t * n + i]).sum();
            }
        }
        let h_prev = |t: usize, j: usize| if t == 0 { 0.0 } else { states[(t - 1) * n + j] };

        self.acc(v, |g, _| {
            for t in 0..len {
                let bl: f64 = (0..n).map(|i| b[i] * lambda[t * n + i]).sum();
                g[t] += dd * gy[t] + bl;
            }
        });
        self.acc(abar, |g, _| {
            for t in 0..len {
                for i in 0..n {
                    let l = lambda[t * n + i];
                    for j in 0..n {
                        g[i * n + j] += l * h_prev(t, j);
                    }
                }
            }
        });
        self.acc(bbar, |g, _| {
            for t in 0..len {
                for i in 0..n {
                    g[i] += lambda[t * n + i] * vd[t];
                }
            }
        });
        self.acc(c, |g, _| {
            for t in 0..len {
                for i in 0..n {
                    g[i] += gy[t] * states[t * n + i];
                }
            }
        });
        self.acc(d, |g, _| {
            g[0] += gy.iter().zip(&vd).map(|(a, b)| a * b).sum::<f64>();
        });
    }
}

/// Nominal MAC charge of one `expm` on an `N×N` argument, in units of `N³`.
/// Scaling-and-squaring cost varies with the argument norm; complexity
/// accounting uses this fixed factor so counts are analytic.
pub const EXPM_MAC_FACTOR: u64 = 10;

/// MACs of one recurrent scan: per element `N²` for `Ā h`, `N` for `B̄ v`
/// and `N` for `C h`.
pub fn scan_macs(len: usize, state_dim: usize) -> u64 {
    (len * (state_dim * state_dim + 2 * state_dim)) as u64
}

fn add_into(g: &mut [f64], d: &[f64]) {
    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
}

/// `(input index, output index)` pairs of a pixel shuffle from
/// `[c·r², h, w]` to `[c, h·r, w·r]`.
fn shuffle_pairs(c: usize, h: usize, w: usize, r: usize) -> impl Iterator<Item = (usize, usize)> {
    let (oh, ow) = (h * r, w * r);
    (0..c).flat_map(move |ch| {
        (0..r).flat_map(move |i| {
            (0..r).flat_map(move |j| {
                let src_c = ch * r * r + i * r + j;
                (0..h).flat_map(move |y| {
                    (0..w).map(move |x| {
                        let src = (src_c * h + y) * w + x;
                        let dst = (ch * oh + y * r + i) * ow + x * r + j;
                        (src, dst)
                    })
                })
            })
        })
    })
}
