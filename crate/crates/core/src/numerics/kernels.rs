//! Slice-level forward kernels shared by the tape and the eager API.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Added to row norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// `c[m×q] = a[m×p] · b[p×q]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * q];
    for i in 0..m {
        let out = &mut c[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            let brow = &b[k * q..(k + 1) * q];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    c
}

/// `c[m×q] = a[m×p] · b[q×p]ᵀ`
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * q];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..q {
            c[i * q + j] = dot(arow, &b[j * p..(j + 1) * p]);
        }
    }
    c
}

/// `c[p×q] = a[m×p]ᵀ · b[m×q]`
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * q];
    for i in 0..m {
        let brow = &b[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            let out = &mut c[k * q..(k + 1) * q];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for row in y.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// Log-sum-exp of a slice, stable for large magnitudes.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Standardizes each row; returns `(xhat, rstd)`.
pub fn standardize_rows(x: &[f64], cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (xhat, rstd)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

/// Logistic function kept strictly inside `(0, 1)`.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
