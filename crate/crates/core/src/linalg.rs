//! Small numeric helpers shared across modules.

use ndarray::{Array2, ArrayView1, ArrayViewMut1};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Writes `softmax(scale * src)` into `dst` with max-subtraction.
pub fn softmax_scaled_into(src: ArrayView1<f64>, scale: f64, mut dst: ArrayViewMut1<f64>) {
    let max = src.iter().map(|&x| scale * x).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        let e = (scale * s - max).exp();
        *d = e;
        total += e;
    }
    dst.mapv_inplace(|x| x / total);
}

/// Log-sum-exp of `scale * src`.
pub fn log_sum_exp_scaled(src: ArrayView1<f64>, scale: f64) -> f64 {
    let max = src.iter().map(|&x| scale * x).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = src.iter().map(|&x| (scale * x - max).exp()).sum();
    max + total.ln()
}

/// Row-wise softmax of a matrix.
pub fn row_softmax(m: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (src, dst) in m.rows().into_iter().zip(out.rows_mut()) {
        softmax_scaled_into(src, 1.0, dst);
    }
    out
}

pub fn sum_squares<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().map(|x| x * x).sum()
}
