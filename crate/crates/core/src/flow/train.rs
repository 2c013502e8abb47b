//! AdamW training with cosine decay and condition dropout.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::latent::LatentGrid;
use super::model::{Condition, Denoiser};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::layout::LayoutMode;
use crate::rng::chacha;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_rec: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub cond_drop_prob: f64,
    pub seed: u64,
    pub layout: LayoutMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 0.3,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            steps: 3000,
            batch_size: 8,
            cond_drop_prob: 0.1,
            seed: 0,
            layout: LayoutMode::WidthWise,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec >= 0.0 && self.lambda_rec.is_finite()) {
            return Err(Error::config(format!("lambda_rec must be >= 0, got {}", self.lambda_rec)));
        }
        if !(0.0..1.0).contains(&self.cond_drop_prob) {
            return Err(Error::config(format!(
                "cond_drop_prob must lie in [0, 1), got {}",
                self.cond_drop_prob
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// One training clip: the clean joint latent and its condition.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub x1: LatentGrid,
    pub reference: LatentGrid,
    pub effect: usize,
}

/// Learning rate at `step` (0-based) of `total`, decayed to zero on a half cosine.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Decoupled-weight-decay Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Mat]) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update; `grads[i] = None` counts as a zero gradient.
    pub fn update(&mut self, params: &mut [Mat], grads: &[Option<Mat>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref();
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for k in 0..p.data.len() {
                let gk = g.map_or(0.0, |g| g.data[k]);
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.data[k] -= lr * (mhat / (vhat.sqrt() + EPS) + weight_decay * p.data[k]);
            }
        }
    }
}

/// Batch-averaged losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub mse: f64,
    pub rec: f64,
    pub total: f64,
}

/// Random draws for one example of a batch.
#[derive(Clone, Debug)]
pub struct Draw {
    pub index: usize,
    pub x0: LatentGrid,
    pub t: f64,
    pub drop_condition: bool,
}

/// The draws of step `step`: example indices, noise, times and dropout flags.
pub fn draw_batch(cfg: &TrainConfig, step: usize, data_len: usize, shape: [usize; 4]) -> Vec<Draw> {
    let mut rng = chacha(cfg.seed, step as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let index = rng.random_range(0..data_len);
            let t: f64 = rng.random();
            let drop_condition = rng.random::<f64>() < cfg.cond_drop_prob;
            let x0 = LatentGrid::standard_normal(shape, &mut rng);
            Draw {
                index,
                x0,
                t,
                drop_condition,
            }
        })
        .collect()
}

/// Sum of per-example gradients in batch order, scaled by `scale`.
fn reduce(grads: Vec<Vec<Option<Mat>>>, scale: f64) -> Vec<Option<Mat>> {
    let mut it = grads.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for g in it {
        for (a, b) in acc.iter_mut().zip(g) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data.iter_mut().zip(&b.data) {
                        *x += y;
                    }
                }
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }
    for m in acc.iter_mut().flatten() {
        for x in &mut m.data {
            *x *= scale;
        }
    }
    acc
}

/// Mean loss and gradient over a set of draws.
pub fn batch_loss_and_grads(
    model: &Denoiser,
    data: &[TrainExample],
    draws: &[Draw],
    lambda_rec: f64,
) -> Result<(super::loss::LossParts, Vec<Option<Mat>>)> {
    let per: Vec<_> = draws
        .par_iter()
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
            model.loss_and_grads(&d.x0, &ex.x1, d.t, &cond, lambda_rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = draws.len() as f64;
    let mut parts = super::loss::LossParts {
        mse: 0.0,
        rec: 0.0,
        total: 0.0,
    };
    let mut grads = Vec::with_capacity(per.len());
    for (p, g) in per {
        parts.mse += p.mse;
        parts.rec += p.rec;
        parts.total += p.total;
        grads.push(g);
    }
    parts.mse /= n;
    parts.rec /= n;
    parts.total /= n;
    Ok((parts, reduce(grads, 1.0 / n)))
}

/// One optimizer step at index `step` (0-based).
pub fn train_step(
    model: &mut Denoiser,
    opt: &mut AdamW,
    data: &[TrainExample],
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossRecord> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let draws = draw_batch(cfg, step, data.len(), model.geometry().latent_shape());
    let (parts, grads) = batch_loss_and_grads(model, data, &draws, cfg.lambda_rec)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            mse: parts.mse,
            rec: parts.rec,
        });
    }
    let lr = cosine_lr(cfg.learning_rate, step, cfg.steps);
    opt.update(model.params_mut(), &grads, lr, cfg.weight_decay);
    Ok(LossRecord {
        step,
        lr,
        mse: parts.mse,
        rec: parts.rec,
        total: parts.total,
    })
}

/// Run `cfg.steps` steps, calling `on_step` after each.
pub fn train(
    model: &mut Denoiser,
    data: &[TrainExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord, &Denoiser) -> Result<()>,
) -> Result<AdamW> {
    cfg.validate()?;
    if cfg.layout != model.geometry().layout {
        return Err(Error::config(format!(
            "training layout {} does not match model layout {}",
            cfg.layout,
            model.geometry().layout
        )));
    }
    let mut opt = AdamW::new(model.params());
    for step in 0..cfg.steps {
        let rec = train_step(model, &mut opt, data, cfg, step)?;
        on_step(&rec, model)?;
    }
    Ok(opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::model::{DenoiserConfig, Geometry, ModelSpec};

    fn tiny() -> (Denoiser, Vec<TrainExample>) {
        let spec = ModelSpec {
            config: DenoiserConfig {
                embed_dim: 8,
                heads: 2,
                blocks: 1,
                ..DenoiserConfig::default()
            },
            geometry: Geometry {
                frames: 3,
                height: 2,
                width: 4,
                layout: LayoutMode::WidthWise,
                num_effects: 2,
            },
        };
        let model = Denoiser::new(spec, 3).unwrap();
        let data = (0..3)
            .map(|i| TrainExample {
                x1: LatentGrid::filled([3, 3, 2, 4], 0.1 * i as f64),
                reference: LatentGrid::filled([1, 3, 2, 4], 0.2 * i as f64),
                effect: i % 2,
            })
            .collect();
        (model, data)
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn zero_lr_and_decay_leaves_params_bit_identical() {
        let (mut model, data) = tiny();
        let before = model.params().to_vec();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            steps: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(model.params(), &before[..]);
    }

    #[test]
    fn fixed_seed_reproduces_trajectory() {
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut model, data) = tiny();
            let mut log = Vec::new();
            train(&mut model, &data, &cfg, |r, _| {
                log.push(r.clone());
                Ok(())
            })
            .unwrap();
            (log, model.params().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.iter().all(|r| r.total.is_finite() && r.total >= 0.0));
    }

    #[test]
    fn loss_decreases_on_a_constant_target() {
        let (mut model, mut data) = tiny();
        data.truncate(1);
        let cfg = TrainConfig {
            steps: 150,
            batch_size: 4,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        train(&mut model, &data, &cfg, |r, _| {
            log.push(r.total);
            Ok(())
        })
        .unwrap();
        let head: f64 = log[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = log[130..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn rejects_bad_config() {
        let bad = [
            TrainConfig {
                lambda_rec: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                cond_drop_prob: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
