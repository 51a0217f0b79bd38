//! Cosine learning-rate schedule and decoupled-weight-decay Adam.

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Scalar};

/// `peak * 0.5 * (1 + cos(pi * step / total_steps))`: peak at step 0, decaying
/// to zero exactly at `total_steps`, no warmup, no floor.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr step {step} outside 0..{total_steps}"
        )));
    }
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

/// Adam hyperparameters with decoupled weight decay.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamParams {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        Self::with_weight_decay(0.0)
    }
}

/// First and second moment estimates plus the per-parameter step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: DenseMatrix<T>,
    v: DenseMatrix<T>,
    step: u32,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(param: &DenseMatrix<T>) -> Self {
        AdamState {
            m: DenseMatrix::zeros(param.rows(), param.cols()),
            v: DenseMatrix::zeros(param.rows(), param.cols()),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)` with bias-corrected
/// moments. Updates `param` and `state` in place.
pub fn adamw_step<T: Scalar>(
    param: &mut DenseMatrix<T>,
    grad: &DenseMatrix<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::Contract(format!(
            "adamw_step shapes disagree: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.step += 1;
    let t = state.step;

    let beta1 = T::of_f64(hp.beta1);
    let beta2 = T::of_f64(hp.beta2);
    let one_m_beta1 = T::of_f64(1.0 - hp.beta1);
    let one_m_beta2 = T::of_f64(1.0 - hp.beta2);
    let corr1 = T::of_f64(1.0 - hp.beta1.powi(t as i32));
    let corr2 = T::of_f64(1.0 - hp.beta2.powi(t as i32));
    let eps = T::of_f64(hp.eps);
    let lr_t = T::of_f64(lr);
    let decay = T::of_f64(1.0 - lr * hp.weight_decay);

    let p = param.data_mut();
    let g = grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + one_m_beta1 * g[i];
        v[i] = beta2 * v[i] + one_m_beta2 * g[i] * g[i];
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        p[i] = p[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam state lazily allocated per parameter key; frozen tensors never get an
/// entry because they are never updated.
#[derive(Debug)]
pub struct AdamW<T> {
    hp: AdamParams,
    state: Vec<Option<AdamState<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n_params: usize, hp: AdamParams) -> Self {
        AdamW {
            hp,
            state: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn params(&self) -> &AdamParams {
        &self.hp
    }

    /// Number of parameters with allocated moment state.
    pub fn allocated_states(&self) -> usize {
        self.state.iter().filter(|s| s.is_some()).count()
    }

    pub fn update(
        &mut self,
        key: usize,
        param: &mut DenseMatrix<T>,
        grad: &DenseMatrix<T>,
        lr: f64,
    ) -> Result<()> {
        if key >= self.state.len() {
            return Err(Error::Contract(format!(
                "optimizer key {key} outside 0..{}",
                self.state.len()
            )));
        }
        let state = self.state[key].get_or_insert_with(|| AdamState::zeros_like(param));
        adamw_step(param, grad, state, lr, &self.hp)
    }
}
