//! Plain-array numeric kernels.
//!
//! Every kernel here is called both by the graph ops in [`crate::graph`] and
//! by the straight-line forward paths in [`crate::vit`], so the two routes
//! produce bit-identical values by construction.

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// C[m,k] += A[m,n] · B[k,n]ᵀ
pub(crate) fn acc_matmul_nt(out: &mut [f64], a: &[f64], m: usize, n: usize, b: &[f64], k: usize) {
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for t in 0..n {
                acc += arow[t] * brow[t];
            }
            orow[j] += acc;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
pub(crate) fn acc_matmul_tn(out: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    debug_assert_eq!(out.len(), k * n);
    for t in 0..m {
        let arow = &a[t * k..(t + 1) * k];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Numerically stable softmax over each row.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Per-row layer normalization with learned scale and shift.
pub(crate) fn layernorm_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let (mean, var) = row_mean_var(row);
        let inv = 1.0 / (var + eps).sqrt();
        let orow = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            orow[c] = (row[c] - mean) * inv * gamma[c] + beta[c];
        }
    }
    out
}

pub(crate) fn row_mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) const GELU_COEFF: f64 = 0.044715;

/// GELU, tanh form: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
/// The derivative in [`gelu_prime`] matches this exact formula, which is what
/// the finite-difference checks differentiate.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Floor applied inside `log` so that zero attention mass contributes a
/// finite value and a bounded gradient; see [`crate::graph::LOG_FLOOR`].
#[inline]
pub(crate) fn log_floored(x: f64, floor: f64) -> f64 {
    x.max(floor).ln()
}
