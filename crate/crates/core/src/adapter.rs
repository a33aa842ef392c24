//! Online parameter-level adaptation: EMA of attention-projection gradients,
//! linear mapping to coefficients, and the elementwise weight / feature
//! transformations applied inside attention.
//!
//! The tape-side versions of these operations live in [`crate::backbone`]
//! (`build_coeffs` and the adapted projections in `build_mhsa`); the plain
//! functions here are the module's public contract and are used for state
//! upkeep and in tests.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// EMA of one layer's concatenated Q/K/V gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaGradState {
    pub ema_grad: Tensor,
    pub gamma: f64,
}

impl EmaGradState {
    pub fn zeros(width: usize, gamma: f64) -> Self {
        assert!((0.0..=1.0).contains(&gamma));
        EmaGradState { ema_grad: Tensor::zeros(1, width), gamma }
    }
}

/// ∇̂ ← γ∇̂ + (1−γ)∇_t, elementwise.
pub fn ema_update(state: &mut EmaGradState, grad_t: &Tensor) -> Result<()> {
    if state.ema_grad.shape() != grad_t.shape() {
        return Err(Error::ShapeError(format!(
            "ema shape {:?} vs gradient {:?}",
            state.ema_grad.shape(),
            grad_t.shape()
        )));
    }
    let g = state.gamma;
    for (e, &v) in state.ema_grad.data.iter_mut().zip(&grad_t.data) {
        *e = g * *e + (1.0 - g) * v;
    }
    Ok(())
}

/// In-place EMA update on a bare tensor (the engine's keyed stores).
pub fn ema_update_tensor(ema: &mut Tensor, grad_t: &Tensor, gamma: f64) {
    assert_eq!(ema.shape(), grad_t.shape());
    for (e, &v) in ema.data.iter_mut().zip(&grad_t.data) {
        *e = gamma * *e + (1.0 - gamma) * v;
    }
}

/// coeffs = 1 + flatten(∇̂)·W + b, split into (α, β) halves.
pub fn compute_coeffs(ema_grad: &Tensor, map_w: &Tensor, map_b: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let flat = ema_grad.reshaped(1, ema_grad.len());
    let lin = flat.matmul(map_w);
    let width = lin.cols / 2;
    let coeff: Vec<f64> =
        lin.data.iter().zip(&map_b.data).map(|(a, b)| 1.0 + a + b).collect();
    (coeff[..width].to_vec(), coeff[width..].to_vec())
}

/// Weight and feature transformations: W̃ = α⊙W (α broadcast over input
/// rows), Ẽ = β⊙E (β broadcast over token rows).
pub fn adapt(
    weight: &Tensor,
    embedding: &Tensor,
    alpha: &[f64],
    beta: &[f64],
) -> Result<(Tensor, Tensor)> {
    if alpha.len() != weight.cols || beta.len() != embedding.cols {
        return Err(Error::ShapeError(format!(
            "coefficient widths {}/{} vs shapes {}×{} / {}×{}",
            alpha.len(),
            beta.len(),
            weight.rows,
            weight.cols,
            embedding.rows,
            embedding.cols
        )));
    }
    let mut w = weight.clone();
    for r in 0..w.rows {
        for c in 0..w.cols {
            *w.at_mut(r, c) *= alpha[c];
        }
    }
    let mut e = embedding.clone();
    for r in 0..e.rows {
        for c in 0..e.cols {
            *e.at_mut(r, c) *= beta[c];
        }
    }
    Ok((w, e))
}
