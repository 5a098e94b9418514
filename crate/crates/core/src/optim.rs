//! Adam over the two base-embedding matrices.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::loss::GradBuffer;
use crate::model::EmbeddingState;
use crate::par::*;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in {block} embeddings (row {row}, column {col})")]
    NonFiniteGradient {
        block: &'static str,
        row: usize,
        col: usize,
    },
    #[error("shape mismatch in {0} block")]
    ShapeMismatch(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_user: Matrix,
    pub v_user: Matrix,
    pub m_item: Matrix,
    pub v_item: Matrix,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments with the usual defaults (β1 = 0.9, β2 = 0.999, ε = 1e-8).
    pub fn new(state: &EmbeddingState, lr: f64) -> Self {
        let (nu, ni, d) = (state.num_users(), state.num_items(), state.dim());
        Self {
            m_user: Matrix::zeros(nu, d),
            v_user: Matrix::zeros(nu, d),
            m_item: Matrix::zeros(ni, d),
            v_item: Matrix::zeros(ni, d),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_finite(block: &'static str, g: &Matrix) -> Result<(), OptimError> {
    match g.as_slice().iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(k) => Err(OptimError::NonFiniteGradient {
            block,
            row: k / g.cols().max(1),
            col: k % g.cols().max(1),
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn update_block(
    theta: &mut Matrix,
    grad: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    let d = theta.cols().max(1);
    theta
        .as_mut_slice()
        .par_chunks_mut(d)
        .zip(grad.as_slice().par_chunks(d))
        .zip(m.as_mut_slice().par_chunks_mut(d))
        .zip(v.as_mut_slice().par_chunks_mut(d))
        .for_each(|(((t, g), m), v)| {
            for k in 0..t.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                t[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
}

/// One bias-corrected Adam update of `state` in place.
pub fn adam_step(
    state: &mut EmbeddingState,
    grads: &GradBuffer,
    opt: &mut AdamState,
) -> Result<(), OptimError> {
    if grads.user.shape() != state.user.shape() || opt.m_user.shape() != state.user.shape() {
        return Err(OptimError::ShapeMismatch("user"));
    }
    if grads.item.shape() != state.item.shape() || opt.m_item.shape() != state.item.shape() {
        return Err(OptimError::ShapeMismatch("item"));
    }
    check_finite("user", &grads.user)?;
    check_finite("item", &grads.item)?;
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (lr, b1, b2, eps) = (opt.lr, opt.beta1, opt.beta2, opt.eps);
    update_block(
        &mut state.user,
        &grads.user,
        &mut opt.m_user,
        &mut opt.v_user,
        lr,
        b1,
        b2,
        eps,
        bc1,
        bc2,
    );
    update_block(
        &mut state.item,
        &grads.item,
        &mut opt.m_item,
        &mut opt.v_item,
        lr,
        b1,
        b2,
        eps,
        bc1,
        bc2,
    );
    Ok(())
}
