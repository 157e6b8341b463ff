//! Dense f64 kernels shared by both experts.
//!
//! Conventions: matrices are row-major `Vec<f64>`. A linear layer stores its
//! weight as `(in_dim x out_dim)` and computes `y = x W + b`, which keeps the
//! forward pass, the weight gradient, and (given a transposed copy of `W`)
//! the input gradient all streaming over contiguous rows. The transposed
//! copies are built once per micro-batch in `params::TransposedWeights`.

pub const LN_EPS: f64 = 1e-5;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// y = x W + b, with x `(n x in)`, W `(in x out)` row-major.
pub fn linear_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    y: &mut [f64],
    n: usize,
    in_dim: usize,
    out_dim: usize,
) {
    debug_assert_eq!(x.len(), n * in_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert_eq!(y.len(), n * out_dim);
    for r in 0..n {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        match b {
            Some(bias) => yr.copy_from_slice(bias),
            None => yr.fill(0.0),
        }
        for (xv, wrow) in xr.iter().zip(w.chunks_exact(out_dim)) {
            axpy(*xv, wrow, yr);
        }
    }
}

/// dx += dy W^T, given `wt` = W transposed, stored `(out x in)` row-major.
pub fn linear_backward_input(
    dy: &[f64],
    wt: &[f64],
    dx: &mut [f64],
    n: usize,
    in_dim: usize,
    out_dim: usize,
) {
    debug_assert_eq!(wt.len(), in_dim * out_dim);
    for r in 0..n {
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for (dv, wtrow) in dyr.iter().zip(wt.chunks_exact(in_dim)) {
            axpy(*dv, wtrow, dxr);
        }
    }
}

/// dW += x^T dy and db += column sums of dy.
pub fn linear_backward_params(
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    mut db: Option<&mut [f64]>,
    n: usize,
    in_dim: usize,
    out_dim: usize,
) {
    debug_assert_eq!(dw.len(), in_dim * out_dim);
    for r in 0..n {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        for (xv, dwrow) in xr.iter().zip(dw.chunks_exact_mut(out_dim)) {
            axpy(*xv, dyr, dwrow);
        }
        if let Some(ref mut bias) = db {
            axpy(1.0, dyr, bias);
        }
    }
}

pub fn transpose(w: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut wt = vec![0.0; w.len()];
    for i in 0..in_dim {
        for o in 0..out_dim {
            wt[o * in_dim + i] = w[i * out_dim + o];
        }
    }
    wt
}

/// Per-row statistics saved by layer norm for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    y: &mut [f64],
    stats: &mut NormStats,
    n: usize,
    d: usize,
) {
    stats.mean.resize(n, 0.0);
    stats.rstd.resize(n, 0.0);
    for r in 0..n {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        stats.mean[r] = mean;
        stats.rstd[r] = rstd;
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            yr[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dy: &[f64],
    x: &[f64],
    gain: &[f64],
    stats: &NormStats,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    n: usize,
    d: usize,
) {
    for r in 0..n {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let dxr = &mut dx[r * d..(r + 1) * d];
        let mean = stats.mean[r];
        let rstd = stats.rstd[r];
        let mut sum_dyg = 0.0;
        let mut sum_dyg_xhat = 0.0;
        for i in 0..d {
            let xhat = (xr[i] - mean) * rstd;
            let dyg = dyr[i] * gain[i];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xhat;
            dgain[i] += dyr[i] * xhat;
            dbias[i] += dyr[i];
        }
        let inv_d = 1.0 / d as f64;
        for i in 0..d {
            let xhat = (xr[i] - mean) * rstd;
            let dyg = dyr[i] * gain[i];
            dxr[i] += rstd * (dyg - inv_d * sum_dyg - xhat * inv_d * sum_dyg_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_forward(x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = gelu(*xv);
    }
}

pub fn gelu_backward(dy: &[f64], x_pre: &[f64], dx: &mut [f64]) {
    for i in 0..dx.len() {
        dx[i] += dy[i] * gelu_grad(x_pre[i]);
    }
}

/// In-place softmax over one row (max-subtracted).
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Backward of `a = softmax(logits)` given `da`, writing `dlogits`.
pub fn softmax_backward_row(a: &[f64], da: &[f64], dlogits: &mut [f64]) {
    let inner = dot(a, da);
    for i in 0..a.len() {
        dlogits[i] = a[i] * (da[i] - inner);
    }
}

/// Sinusoidal features for a scalar time in [0, 1]; `dim` must be even.
/// The time is scaled by 1000 so neighbouring solver steps stay resolvable.
pub fn sinusoidal_time(t: f64, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(dim % 2, 0);
    let half = dim / 2;
    let s = t * 1000.0;
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (s * freq).sin();
        out[half + i] = (s * freq).cos();
    }
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}
