//! Primitive layers with explicit forward caches and hand-written backward
//! passes. All math is f64; matrices are row-major with samples on axis 0.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// y = x w^T + b for x (M, in), w (out, in), b (out).
pub fn linear_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

/// Returns (dx, dw, db) for upstream dy (M, out).
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Layer norm across features, one statistic pair per row.
pub fn layer_norm_forward(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, NormCache) {
    let f = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).unwrap();
    let var = x.map_axis(Axis(1), |row| {
        let m = row.sum() / f;
        row.iter().map(|&v| (v - m).powi(2)).sum::<f64>() / f
    });
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let mut xhat = x.clone();
    for (mut row, (&m, &is)) in xhat.rows_mut().into_iter().zip(mean.iter().zip(inv_std.iter())) {
        row.mapv_inplace(|v| (v - m) * is);
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        row.zip_mut_with(gamma, |v, &g| *v *= g);
        row += beta;
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    cache: &NormCache,
    gamma: &Array1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let f = dy.ncols() as f64;
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * &gamma.view().insert_axis(Axis(0));
    let sum_dxhat = dxhat.sum_axis(Axis(1));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1));
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let is = cache.inv_std[i];
        for (j, v) in row.iter_mut().enumerate() {
            *v = is / f
                * (f * dxhat[[i, j]] - sum_dxhat[i] - cache.xhat[[i, j]] * sum_dxhat_xhat[i]);
        }
    }
    (dx, dgamma, dbeta)
}

pub struct BatchNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    /// Refreshed running statistics to commit after a training step.
    pub new_running_mean: Array1<f64>,
    pub new_running_var: Array1<f64>,
}

/// Train-mode batch norm over axis 0: per-feature batch statistics with
/// biased variance. The returned cache carries the updated running stats
/// (running = momentum * running + (1 - momentum) * batch) for the caller to
/// commit; `x` itself is normalized with the batch statistics.
pub fn batch_norm_train_forward(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
) -> (Array2<f64>, BatchNormCache) {
    let m = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).unwrap();
    let var = x.map_axis(Axis(0), |col| {
        let mu = col.sum() / m;
        col.iter().map(|&v| (v - mu).powi(2)).sum::<f64>() / m
    });
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut xhat = x.clone();
    for mut row in xhat.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[j]) * inv_std[j];
        }
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        row.zip_mut_with(gamma, |v, &g| *v *= g);
        row += beta;
    }
    let new_running_mean = running_mean * BN_MOMENTUM + &(mean.mapv(|v| v * (1.0 - BN_MOMENTUM)));
    let new_running_var = running_var * BN_MOMENTUM + &(var.mapv(|v| v * (1.0 - BN_MOMENTUM)));
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            new_running_mean,
            new_running_var,
        },
    )
}

/// Eval-mode batch norm: normalizes with the stored running statistics.
pub fn batch_norm_eval_forward(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
) -> Array2<f64> {
    let inv_std = running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - running_mean[j]) * inv_std[j] * gamma[j] + beta[j];
        }
    }
    y
}

/// Backward through train-mode batch norm, differentiating the batch
/// statistics as well. Returns (dx, dgamma, dbeta).
pub fn batch_norm_train_backward(
    cache: &BatchNormCache,
    gamma: &Array1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let m = dy.nrows() as f64;
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * &gamma.view().insert_axis(Axis(0));
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cache.inv_std[j] / m
                * (m * dxhat[[i, j]] - sum_dxhat[j] - cache.xhat[[i, j]] * sum_dxhat_xhat[j]);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// dx from the pre-activation input.
pub fn relu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Inverted dropout. Returns the scaled output and the multiplicative mask
/// (entries 0 or 1/keep) so the backward pass replays the same pattern.
pub fn dropout_forward(x: &Array2<f64>, p: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    if p == 0.0 {
        return (x.clone(), Array2::ones(x.raw_dim()));
    }
    let keep = 1.0 - p;
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    (x * &mask, mask)
}

pub fn dropout_backward(mask: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    dy * mask
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let denom = row.sum();
        row.mapv_inplace(|v| v / denom);
    }
    y
}

/// Backward of row-wise softmax: dx = p * (dp - rowsum(dp * p)).
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let inner = (dp * p).sum_axis(Axis(1));
    let mut dx = dp.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = p[[i, j]] * (*v - inner[i]);
        }
    }
    dx
}

/// Sinusoidal positional encoding table (n, d): column 2j holds
/// sin(i / 10000^(2j/d)) and column 2j+1 the matching cosine.
pub fn positional_encoding(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(i, c)| {
        let j = (c / 2) as f64;
        let angle = i as f64 / 10000f64.powf(2.0 * j / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
