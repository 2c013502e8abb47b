//! Flow-matching loss with the one-step alpha reconstruction term.

use serde::{Deserialize, Serialize};

use super::latent::{check_time, LatentGrid};
use crate::error::{Error, Result};
use crate::layout::LayoutMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub rec: f64,
    pub total: f64,
}

/// `mse = mean((v − (x1 − x0))²)`, `rec = mean_α((x1 − (x_t + (1−t)·v))²)`,
/// `total = mse + λ·rec`.
pub fn compute_losses(
    v_pred: &LatentGrid,
    x0: &LatentGrid,
    x1: &LatentGrid,
    x_t: &LatentGrid,
    t: f64,
    layout: LayoutMode,
    lambda_rec: f64,
) -> Result<LossParts> {
    losses_with_grad(v_pred, x0, x1, x_t, t, layout, lambda_rec).map(|(p, _)| p)
}

/// Loss terms together with `∂total/∂v_pred` in latent element order.
pub(crate) fn losses_with_grad(
    v_pred: &LatentGrid,
    x0: &LatentGrid,
    x1: &LatentGrid,
    x_t: &LatentGrid,
    t: f64,
    layout: LayoutMode,
    lambda_rec: f64,
) -> Result<(LossParts, Vec<f64>)> {
    check_time(t)?;
    if !(lambda_rec >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda_rec must be >= 0, got {lambda_rec}")));
    }
    v_pred.ensure_same_shape(x0)?;
    v_pred.ensure_same_shape(x1)?;
    v_pred.ensure_same_shape(x_t)?;
    let alpha = v_pred.alpha_mask(layout);
    let n = v_pred.data().len() as f64;
    let n_alpha = alpha.iter().filter(|&&a| a).count() as f64;
    let mut mse = 0.0;
    let mut rec = 0.0;
    let mut grad = vec![0.0; v_pred.data().len()];
    for i in 0..grad.len() {
        let v = v_pred.data()[i];
        let diff = v - (x1.data()[i] - x0.data()[i]);
        mse += diff * diff;
        grad[i] = 2.0 * diff / n;
        if alpha[i] {
            let resid = x1.data()[i] - (x_t.data()[i] + (1.0 - t) * v);
            rec += resid * resid;
            grad[i] += lambda_rec * -2.0 * (1.0 - t) * resid / n_alpha;
        }
    }
    mse /= n;
    rec /= n_alpha;
    let parts = LossParts {
        mse,
        rec,
        total: mse + lambda_rec * rec,
    };
    Ok((parts, grad))
}
