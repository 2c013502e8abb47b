//! Evaluation: optical flow, RGBA motion alignment, and soft alpha IoU.

pub mod optical;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optical::{farneback_flow, FlowConfig, FlowField};

use crate::error::{ensure_dim, Error, Result};
use crate::rgba::{AlphaMatte, RgbClip};

/// Default magnitude threshold (pixels) for the direction-consistency region.
pub const DEFAULT_TAU: f64 = 0.1;
/// Magnitude fields with variance below this count as constant.
const FLAT_VARIANCE: f64 = 1e-12;

/// Raw comparison of two flow fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub epe: f64,
    pub angle_deg: f64,
    pub mag_corr: f64,
    pub dir_cos: f64,
}

pub fn flow_pair_metrics(f1: &FlowField, f2: &FlowField, tau: f64) -> Result<PairMetrics> {
    ensure_dim("flow height", f1.height, f2.height)?;
    ensure_dim("flow width", f1.width, f2.width)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidInput(format!("tau must be >= 0, got {tau}")));
    }
    let n = f1.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty flow field".into()));
    }
    let mut epe = 0.0;
    let mut angle = 0.0;
    let mut dir_sum = 0.0;
    let mut dir_n = 0usize;
    let mut m1 = Vec::with_capacity(n);
    let mut m2 = Vec::with_capacity(n);
    for i in 0..n {
        let (u1, v1, u2, v2) = (f1.u[i], f1.v[i], f2.u[i], f2.v[i]);
        epe += (u1 - u2).hypot(v1 - v2);
        // Angle between (u1, v1, 1) and (u2, v2, 1); atan2 keeps identical vectors at exactly 0.
        let cross = [v1 - v2, u2 - u1, u1 * v2 - v1 * u2];
        let cross_norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        let dot = u1 * u2 + v1 * v2 + 1.0;
        angle += cross_norm.atan2(dot).to_degrees();
        let (a, b) = (f1.magnitude(i), f2.magnitude(i));
        m1.push(a);
        m2.push(b);
        if a > tau && b > tau {
            let n1 = u1 * u1 + v1 * v1;
            let n2 = u2 * u2 + v2 * v2;
            dir_sum += ((u1 * u2 + v1 * v2) / (n1 * n2).sqrt()).clamp(-1.0, 1.0);
            dir_n += 1;
        }
    }
    let nf = n as f64;
    Ok(PairMetrics {
        epe: epe / nf,
        angle_deg: angle / nf,
        mag_corr: pearson(&m1, &m2),
        dir_cos: if dir_n == 0 { 1.0 } else { dir_sum / dir_n as f64 },
    })
}

/// Pearson correlation; two flat fields correlate at 1, one flat field at 0.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let (flat_a, flat_b) = (va / n < FLAT_VARIANCE, vb / n < FLAT_VARIANCE);
    match (flat_a, flat_b) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (cov / (va * vb).sqrt()).clamp(-1.0, 1.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub epe: f64,
    pub angle_deg: f64,
    pub mag_corr: f64,
    pub dir_cos: f64,
    pub s_epe: f64,
    pub s_angle: f64,
    pub s_mag: f64,
    pub s_dir: f64,
    pub final_score: f64,
}

impl AlignmentReport {
    /// Normalize averaged raw metrics into the 0–100 score.
    pub fn from_raw(raw: PairMetrics) -> Self {
        let s_epe = (-raw.epe / 10.0).exp();
        let s_angle = (-raw.angle_deg / 45.0).exp();
        let s_mag = (raw.mag_corr + 1.0) / 2.0;
        let s_dir = (raw.dir_cos + 1.0) / 2.0;
        Self {
            epe: raw.epe,
            angle_deg: raw.angle_deg,
            mag_corr: raw.mag_corr,
            dir_cos: raw.dir_cos,
            s_epe,
            s_angle,
            s_mag,
            s_dir,
            final_score: 100.0 * 0.25 * (s_epe + s_angle + s_mag + s_dir),
        }
    }
}

/// Consecutive-pair flows of a clip's channel-mean grayscale frames.
fn clip_flows(clip: &RgbClip, cfg: &FlowConfig) -> Result<Vec<FlowField>> {
    let (h, w) = clip.dims();
    let gray: Vec<Vec<f64>> = clip.frames().iter().map(|f| f.gray()).collect();
    (0..gray.len() - 1)
        .into_par_iter()
        .map(|i| farneback_flow(&gray[i], &gray[i + 1], h, w, cfg))
        .collect()
}

/// Motion agreement between an RGB clip and its alpha clip.
///
/// Raw metrics are averaged over the `f − 1` frame pairs before normalization.
pub fn alignment_score(rgb: &RgbClip, alpha: &RgbClip, cfg: &FlowConfig, tau: f64) -> Result<AlignmentReport> {
    ensure_dim("frame count", rgb.len(), alpha.len())?;
    ensure_dim("height", rgb.dims().0, alpha.dims().0)?;
    ensure_dim("width", rgb.dims().1, alpha.dims().1)?;
    if rgb.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "alignment needs at least 2 frames, got {}",
            rgb.len()
        )));
    }
    let fr = clip_flows(rgb, cfg)?;
    let fa = clip_flows(alpha, cfg)?;
    let pairs = fr
        .iter()
        .zip(&fa)
        .map(|(a, b)| flow_pair_metrics(a, b, tau))
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let mean = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    Ok(AlignmentReport::from_raw(PairMetrics {
        epe: mean(|p| p.epe),
        angle_deg: mean(|p| p.angle_deg),
        mag_corr: mean(|p| p.mag_corr),
        dir_cos: mean(|p| p.dir_cos),
    }))
}

/// Soft Jaccard `Σ min / Σ max` per frame, averaged and scaled to 0–100.
/// Frames where both mattes are empty count as a perfect match.
pub fn soft_alpha_miou(pred: &[AlphaMatte], gt: &[AlphaMatte]) -> Result<f64> {
    ensure_dim("frame count", gt.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::InvalidInput("soft alpha mIoU of an empty clip".into()));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        ensure_dim("height", g.height(), p.height())?;
        ensure_dim("width", g.width(), p.width())?;
        let (mut inter, mut union) = (0.0, 0.0);
        for (a, b) in p.data().iter().zip(g.data()) {
            inter += a.min(*b);
            union += a.max(*b);
        }
        total += if union == 0.0 { 1.0 } else { inter / union };
    }
    Ok(100.0 * total / pred.len() as f64)
}
