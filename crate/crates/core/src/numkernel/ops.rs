use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// `log(sum(exp(v)))` with the max factored out.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes every row to zero mean and unit variance, then applies
/// `gain * x + bias` column-wise.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], epsilon: f64) -> Result<Matrix> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::Dimension(format!(
            "layer norm over {} columns with gain {} and bias {}",
            x.cols(),
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (normalized, _) = normalize_row(x.row(r), epsilon);
        for ((o, n), (g, b)) in out
            .row_mut(r)
            .iter_mut()
            .zip(&normalized)
            .zip(gain.iter().zip(bias))
        {
            *o = g * n + b;
        }
    }
    Ok(out)
}

/// Returns the standardized row and `1/sqrt(var + eps)`.
pub(crate) fn normalize_row(row: &[f64], epsilon: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + epsilon).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn apply_dropout<R: Rng + ?Sized>(x: &Matrix, rng: &mut R, rate: f64) -> Matrix {
    let mask = dropout_mask(rng, x.len(), rate);
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    out
}
