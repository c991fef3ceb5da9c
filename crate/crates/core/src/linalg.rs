//! Small dense kernels on row-major slices shared by the graph ops.

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn norm1(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const TAYLOR_TERMS: usize = 18;

/// Matrix exponential by scaling and squaring with a fixed-degree Taylor
/// polynomial. The scaled argument has 1-norm at most 1/2, which keeps the
/// truncation error below f64 resolution.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm = norm1(a, n);
    let squarings = if norm > 0.5 && norm.is_finite() {
        ((norm / 0.5).log2().ceil() as i32).clamp(0, 64) as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings as i32);
    let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();

    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=TAYLOR_TERMS {
        let mut next = matmul(&term, &scaled, n, n, n);
        let inv_k = 1.0 / k as f64;
        next.iter_mut().for_each(|x| *x *= inv_k);
        for (r, t) in result.iter_mut().zip(&next) {
            *r += t;
        }
        term = next;
    }
    for _ in 0..squarings {
        result = matmul(&result, &result, n, n, n);
    }
    result
}

/// Adjoint of `expm` at `a`: given `g = ∂L/∂expm(a)`, returns `∂L/∂a`.
///
/// Uses the block identity `expm([[X, E], [0, X]]) = [[e^X, L(X, E)], [0, e^X]]`
/// with `X = aᵀ`, where `L` is the Fréchet derivative.
pub fn expm_adjoint(a: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    let gnorm = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if gnorm == 0.0 {
        return vec![0.0; n * n];
    }
    let at = transpose(a, n, n);
    let m = 2 * n;
    let mut block = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            block[i * m + j] = at[i * n + j];
            block[(i + n) * m + (j + n)] = at[i * n + j];
            block[i * m + (j + n)] = g[i * n + j] / gnorm;
        }
    }
    let e = expm(&block, m);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = e[i * m + (j + n)] * gnorm;
        }
    }
    out
}
