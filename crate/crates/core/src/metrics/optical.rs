//! Dense optical flow by polynomial expansion (Farnebäck), coarse to fine.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Intensities are scaled to 8-bit range before expansion so the solver's
/// fixed regularizer behaves as it does on ordinary 8-bit frames.
const INTENSITY_SCALE: f64 = 255.0;
/// Added to the determinant of each 2×2 normal system.
const DET_REG: f64 = 1e-3;
/// Pyramid levels stop before the shorter side drops below this.
const MIN_LEVEL_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    /// Side of the Gaussian averaging window for the displacement equations.
    pub window: usize,
    pub iterations: usize,
    /// Side of the neighbourhood used for the polynomial fit.
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::config(format!(
                "pyramid_scale must lie in (0, 1), got {}",
                self.pyramid_scale
            )));
        }
        if self.window % 2 == 0 || self.poly_n % 2 == 0 {
            return Err(Error::config("window and poly_n must be odd"));
        }
        if self.poly_n < 3 {
            return Err(Error::config("poly_n must be at least 3"));
        }
        if !(self.poly_sigma > 0.0) || self.pyramid_levels == 0 || self.iterations == 0 {
            return Err(Error::config(
                "poly_sigma, pyramid_levels and iterations must be positive",
            ));
        }
        Ok(())
    }
}

/// Per-pixel `(u, v)` displacement: `b(y + v, x + u) ≈ a(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.u[i].hypot(self.v[i])
    }
}

/// A single-channel image.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    /// Bilinear sample with edge replication.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x0 + 1) * fx;
        let bottom = self.at(y0 + 1, x0) * (1.0 - fx) + self.at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with edge replication.
fn blur(p: &Plane, kernel: &[f64]) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; p.data.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * p.at(y as isize, x as isize + i as isize - r))
                .sum();
        }
    }
    let t = Plane {
        h: p.h,
        w: p.w,
        data: tmp,
    };
    let mut out = vec![0.0; p.data.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * t.at(y as isize + i as isize - r, x as isize))
                .sum();
        }
    }
    Plane {
        h: p.h,
        w: p.w,
        data: out,
    }
}

/// Bilinear resize to `(h, w)` by pixel-centre mapping.
fn resize(p: &Plane, h: usize, w: usize) -> Plane {
    let sy = p.h as f64 / h as f64;
    let sx = p.w as f64 / w as f64;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(p.sample((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5));
        }
    }
    Plane { h, w, data }
}

/// Solve the symmetric positive-definite 6×6 system in place (Gauss-Jordan).
fn invert6(m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut a = m;
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let piv = (col..6)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for k in 0..6 {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..6 {
            if r != col {
                let f = a[r][col];
                for k in 0..6 {
                    a[r][k] -= f * a[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    inv
}

/// Local quadratic model `f(x, y) ≈ c + b·(x, y) + (x, y) A (x, y)ᵀ` per pixel.
struct Expansion {
    h: usize,
    w: usize,
    /// `b_x, b_y, A_xx, A_yy, A_xy` planes.
    coeff: [Plane; 5],
}

fn poly_expand(img: &Plane, n: usize, sigma: f64) -> Expansion {
    let r = (n / 2) as isize;
    // Basis 1, x, y, x², y², xy with Gaussian applicability.
    let mut taps = Vec::new();
    let mut gram = [[0.0; 6]; 6];
    for dy in -r..=r {
        for dx in -r..=r {
            let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let (x, y) = (dx as f64, dy as f64);
            let basis = [1.0, x, y, x * x, y * y, x * y];
            for i in 0..6 {
                for j in 0..6 {
                    gram[i][j] += wgt * basis[i] * basis[j];
                }
            }
            taps.push((dy, dx, wgt, basis));
        }
    }
    let ginv = invert6(gram);
    let mut coeff: [Plane; 5] = std::array::from_fn(|_| Plane {
        h: img.h,
        w: img.w,
        data: vec![0.0; img.h * img.w],
    });
    for y in 0..img.h {
        for x in 0..img.w {
            let mut proj = [0.0; 6];
            for (dy, dx, wgt, basis) in &taps {
                let f = wgt * img.at(y as isize + dy, x as isize + dx);
                for k in 0..6 {
                    proj[k] += basis[k] * f;
                }
            }
            let mut c = [0.0; 6];
            for i in 0..6 {
                c[i] = (0..6).map(|j| ginv[i][j] * proj[j]).sum();
            }
            let idx = y * img.w + x;
            coeff[0].data[idx] = c[1];
            coeff[1].data[idx] = c[2];
            coeff[2].data[idx] = c[3];
            coeff[3].data[idx] = c[4];
            coeff[4].data[idx] = c[5] * 0.5;
        }
    }
    Expansion {
        h: img.h,
        w: img.w,
        coeff,
    }
}

/// Normal-equation terms `AᵀA` and `AᵀΔb` for the current displacement.
fn update_matrices(e1: &Expansion, e2: &Expansion, flow: &FlowField) -> [Plane; 5] {
    let (h, w) = (e1.h, e1.w);
    let mut m: [Plane; 5] = std::array::from_fn(|_| Plane {
        h,
        w,
        data: vec![0.0; h * w],
    });
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (flow.u[i], flow.v[i]);
            let (sy, sx) = (y as f64 + dy, x as f64 + dx);
            let s = |k: usize| e2.coeff[k].sample(sy, sx);
            let (b2x, b2y) = (s(0), s(1));
            let a11 = 0.5 * (e1.coeff[2].data[i] + s(2));
            let a22 = 0.5 * (e1.coeff[3].data[i] + s(3));
            let a12 = 0.5 * (e1.coeff[4].data[i] + s(4));
            let db1 = -0.5 * (b2x - e1.coeff[0].data[i]) + a11 * dx + a12 * dy;
            let db2 = -0.5 * (b2y - e1.coeff[1].data[i]) + a12 * dx + a22 * dy;
            m[0].data[i] = a11 * a11 + a12 * a12;
            m[1].data[i] = a12 * (a11 + a22);
            m[2].data[i] = a12 * a12 + a22 * a22;
            m[3].data[i] = a11 * db1 + a12 * db2;
            m[4].data[i] = a12 * db1 + a22 * db2;
        }
    }
    m
}

fn solve_flow(m: &[Plane; 5], kernel: &[f64], flow: &mut FlowField) {
    let g: Vec<Plane> = m.iter().map(|p| blur(p, kernel)).collect();
    for i in 0..flow.len() {
        let (g11, g12, g22, h1, h2) = (g[0].data[i], g[1].data[i], g[2].data[i], g[3].data[i], g[4].data[i]);
        let det = g11 * g22 - g12 * g12 + DET_REG;
        flow.u[i] = (g22 * h1 - g12 * h2) / det;
        flow.v[i] = (g11 * h2 - g12 * h1) / det;
    }
}

/// Farnebäck flow from `a` to `b`, both row-major `height × width` in `[0, 1]`.
pub fn farneback_flow(a: &[f64], b: &[f64], height: usize, width: usize, cfg: &FlowConfig) -> Result<FlowField> {
    cfg.validate()?;
    ensure_dim("flow frame pixels", height * width, a.len())?;
    ensure_dim("flow frame pixels", height * width, b.len())?;
    if height < cfg.poly_n || width < cfg.poly_n {
        return Err(Error::InvalidInput(format!(
            "frame {height}x{width} is smaller than poly_n {}",
            cfg.poly_n
        )));
    }
    let scale = |d: &[f64]| Plane {
        h: height,
        w: width,
        data: d.iter().map(|v| v * INTENSITY_SCALE).collect(),
    };
    let (pa, pb) = (scale(a), scale(b));

    let mut levels = 1;
    while levels < cfg.pyramid_levels {
        let f = cfg.pyramid_scale.powi(levels as i32);
        let (h, w) = ((height as f64 * f).round() as usize, (width as f64 * f).round() as usize);
        if h.min(w) < MIN_LEVEL_SIZE.max(cfg.poly_n) {
            break;
        }
        levels += 1;
    }

    let win_radius = cfg.window / 2;
    let win_kernel = gaussian_kernel(win_radius, 0.3 * cfg.window as f64);
    let smooth = gaussian_kernel(2, (1.0 / cfg.pyramid_scale - 1.0) * 0.5);
    let mut flow: Option<FlowField> = None;
    for k in (0..levels).rev() {
        let f = cfg.pyramid_scale.powi(k as i32);
        let (h, w) = if k == 0 {
            (height, width)
        } else {
            ((height as f64 * f).round() as usize, (width as f64 * f).round() as usize)
        };
        let (la, lb) = if k == 0 {
            (pa.clone(), pb.clone())
        } else {
            (resize(&blur(&pa, &smooth), h, w), resize(&blur(&pb, &smooth), h, w))
        };
        let mut cur = match flow.take() {
            None => FlowField::zeros(h, w),
            Some(prev) => {
                let (ry, rx) = (h as f64 / prev.height as f64, w as f64 / prev.width as f64);
                let pu = Plane {
                    h: prev.height,
                    w: prev.width,
                    data: prev.u,
                };
                let pv = Plane {
                    h: prev.height,
                    w: prev.width,
                    data: prev.v,
                };
                FlowField {
                    height: h,
                    width: w,
                    u: resize(&pu, h, w).data.into_iter().map(|v| v * rx).collect(),
                    v: resize(&pv, h, w).data.into_iter().map(|v| v * ry).collect(),
                }
            }
        };
        let e1 = poly_expand(&la, cfg.poly_n, cfg.poly_sigma);
        let e2 = poly_expand(&lb, cfg.poly_n, cfg.poly_sigma);
        for _ in 0..cfg.iterations {
            let m = update_matrices(&e1, &e2, &cur);
            solve_flow(&m, &win_kernel, &mut cur);
        }
        flow = Some(cur);
    }
    Ok(flow.expect("at least one level"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth textured pattern sampled at `(x − dx, y − dy)`.
    pub(crate) fn pattern(h: usize, w: usize, dx: f64, dy: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 - dx, y as f64 - dy);
                let v = (0.31 * px + 0.17 * py).sin() + (-0.23 * px + 0.37 * py + 1.0).sin() + (0.41 * py - 0.13 * px + 2.0).sin();
                out.push(0.5 + 0.15 * v);
            }
        }
        out
    }

    fn mean_epe(f: &FlowField, u: f64, v: f64) -> f64 {
        (0..f.len()).map(|i| (f.u[i] - u).hypot(f.v[i] - v)).sum::<f64>() / f.len() as f64
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = pattern(64, 64, 0.0, 0.0);
        let f = farneback_flow(&a, &a, 64, 64, &FlowConfig::default()).unwrap();
        assert!(mean_epe(&f, 0.0, 0.0) < 0.05);
    }

    #[test]
    fn recovers_translations() {
        let a = pattern(64, 64, 0.0, 0.0);
        for (dx, dy) in [(2.0, 0.0), (0.0, 3.0), (-1.0, 2.0)] {
            let b = pattern(64, 64, dx, dy);
            let f = farneback_flow(&a, &b, 64, 64, &FlowConfig::default()).unwrap();
            let e = mean_epe(&f, dx, dy);
            assert!(e < 0.5, "({dx}, {dy}): epe {e}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let a = vec![0.0; 16];
        assert!(farneback_flow(&a, &a, 4, 4, &FlowConfig::default()).is_err());
        assert!(farneback_flow(&a, &a[..8], 4, 4, &FlowConfig::default()).is_err());
        let cfg = FlowConfig {
            window: 14,
            ..FlowConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gram_inverse_is_inverse() {
        let mut m = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                m[i][j] = 1.0 / (1.0 + i as f64 + j as f64) + if i == j { 1.0 } else { 0.0 };
            }
        }
        let inv = invert6(m);
        for i in 0..6 {
            for j in 0..6 {
                let v: f64 = (0..6).map(|k| m[i][k] * inv[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
