//! Euler integration of the learned velocity field with classifier-free guidance.

use serde::{Deserialize, Serialize};

use super::latent::{decode_latent, encode_frame, LatentGrid};
use super::model::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::layout::{CompositeClip, ReferenceImage};
use crate::rng::chacha;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            cfg_scale: 5.0,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::config("num_steps must be at least 1"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::config("cfg_scale must be finite"));
        }
        Ok(())
    }
}

/// Anything that predicts a velocity for `(x, t, condition)`.
pub trait VelocityField {
    fn velocity(&self, x: &LatentGrid, t: f64, cond: &Condition) -> Result<LatentGrid>;
}

impl VelocityField for Denoiser {
    fn velocity(&self, x: &LatentGrid, t: f64, cond: &Condition) -> Result<LatentGrid> {
        self.forward(x, t, cond)
    }
}

/// Integrate from `x0` over `num_steps` uniform Euler steps `t_k = k/N`.
///
/// With a given condition the velocity is `v_u + s·(v_c − v_u)`; for `s = 1`
/// or a null condition only one branch is evaluated.
pub fn euler_integrate<V: VelocityField + ?Sized>(
    field: &V,
    x0: LatentGrid,
    cond: &Condition,
    num_steps: usize,
    cfg_scale: f64,
) -> Result<LatentGrid> {
    if num_steps == 0 {
        return Err(Error::config("num_steps must be at least 1"));
    }
    let dt = 1.0 / num_steps as f64;
    let mut x = x0;
    for k in 0..num_steps {
        let t = k as f64 / num_steps as f64;
        let v_cond = field.velocity(&x, t, cond)?;
        x.ensure_same_shape(&v_cond)?;
        let guided = matches!(cond, Condition::Given { .. }) && cfg_scale != 1.0;
        if guided {
            let v_unc = field.velocity(&x, t, &Condition::Null)?;
            for ((xi, c), u) in x.data_mut().iter_mut().zip(v_cond.data()).zip(v_unc.data()) {
                *xi += dt * (u + cfg_scale * (c - u));
            }
        } else {
            for (xi, c) in x.data_mut().iter_mut().zip(v_cond.data()) {
                *xi += dt * c;
            }
        }
    }
    Ok(x)
}

/// Initial noise for a sampling run.
pub fn initial_noise(shape: [usize; 4], seed: u64) -> LatentGrid {
    LatentGrid::standard_normal(shape, &mut chacha(seed, 0x5A))
}

/// Generate a joint clip for `reference` and `effect`, returning the final latent too.
pub fn sample_latent(
    model: &Denoiser,
    reference: &ReferenceImage,
    effect: usize,
    cfg: &SampleConfig,
) -> Result<LatentGrid> {
    cfg.validate()?;
    let cond = Condition::Given {
        effect,
        reference: encode_frame(&reference.composed)?,
    };
    let x0 = initial_noise(model.geometry().latent_shape(), cfg.seed);
    euler_integrate(model, x0, &cond, cfg.num_steps, cfg.cfg_scale)
}

/// Generate and decode a joint clip under the model's layout.
pub fn sample_euler(
    model: &Denoiser,
    reference: &ReferenceImage,
    effect: usize,
    cfg: &SampleConfig,
) -> Result<CompositeClip> {
    let lat = sample_latent(model, reference, effect, cfg)?;
    decode_latent(&lat, model.geometry().layout)
}
