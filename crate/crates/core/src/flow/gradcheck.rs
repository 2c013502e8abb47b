//! Finite-difference verification of the analytic gradients.

use rand::Rng;
use serde::Serialize;

use super::latent::{interpolate_path, LatentGrid};
use super::model::{Condition, Denoiser};
use super::train::{batch_loss_and_grads, Draw, TrainExample};
use crate::error::{Error, Result};
use crate::layout::LayoutMode;
use crate::rng::chacha;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter tensor and flat index of the worst entry.
    pub worst_param: String,
    pub worst_index: usize,
}

/// Deterministic draws covering every example; odd examples use the null condition.
pub fn fixed_draws(model: &Denoiser, data: &[TrainExample], seed: u64) -> Vec<Draw> {
    let mut rng = chacha(seed, 0x6C);
    let shape = model.geometry().latent_shape();
    (0..data.len())
        .map(|index| Draw {
            index,
            t: rng.random_range(0.05..0.95),
            drop_condition: index % 2 == 1,
            x0: LatentGrid::standard_normal(shape, &mut rng),
        })
        .collect()
}

fn predictions(model: &Denoiser, data: &[TrainExample], draws: &[Draw]) -> Result<Vec<LatentGrid>> {
    draws
        .iter()
        .map(|d| {
            let ex = &data[d.index];
            let cond = if d.drop_condition {
                Condition::Null
            } else {
                Condition::Given {
                    effect: ex.effect,
                    reference: ex.reference.clone(),
                }
            };
            let xt = interpolate_path(&d.x0, &ex.x1, d.t)?;
            model.forward(&xt, d.t, &cond)
        })
        .collect()
}

/// `L(v⁺) − L(v⁻)` of the batch-mean total loss, summed term by term.
///
/// Each squared residual difference is formed as `(a⁺ − a⁻)(a⁺ + a⁻)`, so the
/// result does not lose the low-order bits that a subtraction of two nearly
/// equal loss totals would.
fn loss_difference(
    plus: &[LatentGrid],
    minus: &[LatentGrid],
    data: &[TrainExample],
    draws: &[Draw],
    layout: LayoutMode,
    lambda_rec: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for ((vp, vm), d) in plus.iter().zip(minus).zip(draws) {
        let x1 = &data[d.index].x1;
        let xt = interpolate_path(&d.x0, x1, d.t)?;
        let alpha = x1.alpha_mask(layout);
        let n = alpha.len() as f64;
        let n_alpha = alpha.iter().filter(|&&a| a).count() as f64;
        let (mut mse, mut rec) = (0.0, 0.0);
        for i in 0..alpha.len() {
            let (p, m) = (vp.data()[i], vm.data()[i]);
            let dv = p - m;
            let u = x1.data()[i] - d.x0.data()[i];
            mse += dv * ((p - u) + (m - u));
            if alpha[i] {
                let base = x1.data()[i] - xt.data()[i];
                let (rp, rm) = (base - (1.0 - d.t) * p, base - (1.0 - d.t) * m);
                rec += -(1.0 - d.t) * dv * (rp + rm);
            }
        }
        total += mse / n + lambda_rec * rec / n_alpha;
    }
    Ok(total / draws.len() as f64)
}

/// Compare analytic gradients of the mean total loss with central differences
/// on `samples` randomly chosen scalar parameters.
pub fn grad_check(
    model: &Denoiser,
    data: &[TrainExample],
    lambda_rec: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("grad check needs at least one example".into()));
    }
    let draws = fixed_draws(model, data, seed);
    let (_, grads) = batch_loss_and_grads(model, data, &draws, lambda_rec)?;

    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let k = samples.min(total);
    // Partial Fisher-Yates over flat indices.
    let mut rng = chacha(seed, 0x6D);
    let mut pool: Vec<usize> = (0..total).collect();
    for i in 0..k {
        let j = rng.random_range(i..total);
        pool.swap(i, j);
    }
    let mut picks = pool[..k].to_vec();
    picks.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: k,
        worst_param: String::new(),
        worst_index: 0,
    };
    let layout = model.geometry().layout;
    let mut probe = model.clone();
    for flat in picks {
        let (mut tensor, mut offset) = (0, flat);
        while offset >= sizes[tensor] {
            offset -= sizes[tensor];
            tensor += 1;
        }
        let orig = probe.params()[tensor].data[offset];
        probe.params_mut()[tensor].data[offset] = orig + FD_STEP;
        let up = predictions(&probe, data, &draws)?;
        probe.params_mut()[tensor].data[offset] = orig - FD_STEP;
        let down = predictions(&probe, data, &draws)?;
        probe.params_mut()[tensor].data[offset] = orig;
        let diff = loss_difference(&up, &down, data, &draws, layout, lambda_rec)?;
        let fd = diff / (2.0 * FD_STEP);
        let an = grads[tensor].as_ref().map_or(0.0, |g| g.data[offset]);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = model.param_names()[tensor].clone();
            report.worst_index = offset;
        }
    }
    Ok(report)
}
