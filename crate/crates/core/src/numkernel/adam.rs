use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        AdamState {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            config,
        }
    }

    pub fn for_param(param: &Matrix, config: AdamConfig) -> Self {
        AdamState::new(param.rows(), param.cols(), config)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<()> {
    param.check_same_shape(grad, "adam gradient")?;
    param.check_same_shape(&state.first_moment, "adam state")?;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}
