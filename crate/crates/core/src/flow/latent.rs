//! Latent grids and the fixed pooling encoder.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_dim, Error, Result};
use crate::layout::{CompositeClip, LayoutMode};
use crate::rgba::RgbFrame;

/// Spatial pooling factor of the encoder.
pub const POOL: usize = 2;

/// A `(frames, channels, height, width)` tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure_dim("latent elements", n, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "latent value {} at index {i} is not finite",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], v: f64) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    /// Independent standard-normal entries.
    pub fn standard_normal<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, h, w] = self.shape;
        ((f * cs + c) * h + y) * w + x
    }

    #[inline]
    pub fn get(&self, f: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(f, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(f, c, y, x);
        self.data[i] = v;
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid) -> Result<()> {
        const AXES: [&str; 4] = ["latent frames", "latent channels", "latent height", "latent width"];
        for (k, axis) in AXES.iter().enumerate() {
            ensure_dim(axis, self.shape[k], other.shape[k])?;
        }
        Ok(())
    }

    /// Per-element flag marking the alpha half under `layout`.
    pub fn alpha_mask(&self, layout: LayoutMode) -> Vec<bool> {
        let [f, c, h, w] = self.shape;
        let mut out = Vec::with_capacity(self.data.len());
        for fi in 0..f {
            for _ in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.push(match layout {
                            LayoutMode::WidthWise => x >= w / 2,
                            LayoutMode::HeightWise => y >= h / 2,
                            LayoutMode::TemporalWise => fi >= f / 2,
                        });
                    }
                }
            }
        }
        out
    }
}

fn pool_frame(frame: &RgbFrame, out: &mut Vec<f64>) -> Result<(usize, usize)> {
    let (h, w) = frame.dims();
    if h % POOL != 0 || w % POOL != 0 {
        return Err(Error::InvalidInput(format!(
            "frame {h}x{w} is not divisible by the pooling factor {POOL}"
        )));
    }
    let (ph, pw) = (h / POOL, w / POOL);
    for c in 0..3 {
        for y in 0..ph {
            for x in 0..pw {
                let (y0, x0) = (y * POOL, x * POOL);
                // Pairwise sums keep constant and {0, 1} blocks exact.
                let top = frame.get(c, y0, x0) + frame.get(c, y0, x0 + 1);
                let bottom = frame.get(c, y0 + 1, x0) + frame.get(c, y0 + 1, x0 + 1);
                out.push((top + bottom) * 0.25);
            }
        }
    }
    Ok((ph, pw))
}

/// 2×2 average pooling of a list of frames.
pub fn encode_frames(frames: &[RgbFrame]) -> Result<LatentGrid> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty clip".into()));
    }
    let mut data = Vec::new();
    let mut dims = (0, 0);
    for f in frames {
        ensure_dim("frame height", frames[0].height(), f.height())?;
        ensure_dim("frame width", frames[0].width(), f.width())?;
        dims = pool_frame(f, &mut data)?;
    }
    LatentGrid::new([frames.len(), 3, dims.0, dims.1], data)
}

pub fn encode_frame(frame: &RgbFrame) -> Result<LatentGrid> {
    encode_frames(std::slice::from_ref(frame))
}

pub fn encode_latent(comp: &CompositeClip) -> Result<LatentGrid> {
    encode_frames(comp.frames())
}

/// Nearest-neighbour upsampling of each latent frame, clamped to `[0, 1]`.
pub fn decode_frames(lat: &LatentGrid) -> Result<Vec<RgbFrame>> {
    ensure_dim("latent channels", 3, lat.channels())?;
    let (h, w) = (lat.height() * POOL, lat.width() * POOL);
    Ok((0..lat.frames())
        .map(|f| RgbFrame::from_fn(h, w, |c, y, x| lat.get(f, c, y / POOL, x / POOL)))
        .collect())
}

pub fn decode_latent(lat: &LatentGrid, layout: LayoutMode) -> Result<CompositeClip> {
    let frames = decode_frames(lat)?;
    let (h, w) = frames[0].dims();
    let boundary = match layout {
        LayoutMode::WidthWise => w / 2,
        LayoutMode::HeightWise => h / 2,
        LayoutMode::TemporalWise => frames.len() / 2,
    };
    CompositeClip::new(frames, layout, boundary)
}

/// Join two latent grids along the layout axis, first grid first.
pub fn concat_latents(a: &LatentGrid, b: &LatentGrid, layout: LayoutMode) -> Result<LatentGrid> {
    a.ensure_same_shape(b)?;
    let [f, c, h, w] = a.shape;
    let (shape, data) = match layout {
        LayoutMode::TemporalWise => ([2 * f, c, h, w], [a.data.as_slice(), &b.data].concat()),
        LayoutMode::HeightWise => {
            let plane = h * w;
            let mut data = Vec::with_capacity(2 * a.data.len());
            for (pa, pb) in a.data.chunks(plane).zip(b.data.chunks(plane)) {
                data.extend_from_slice(pa);
                data.extend_from_slice(pb);
            }
            ([f, c, 2 * h, w], data)
        }
        LayoutMode::WidthWise => {
            let mut data = Vec::with_capacity(2 * a.data.len());
            for (ra, rb) in a.data.chunks(w).zip(b.data.chunks(w)) {
                data.extend_from_slice(ra);
                data.extend_from_slice(rb);
            }
            ([f, c, h, 2 * w], data)
        }
    };
    Ok(LatentGrid { shape, data })
}

/// `t·x1 + (1−t)·x0`
pub fn interpolate_path(x0: &LatentGrid, x1: &LatentGrid, t: f64) -> Result<LatentGrid> {
    x0.ensure_same_shape(x1)?;
    check_time(t)?;
    let data = x0
        .data
        .iter()
        .zip(&x1.data)
        .map(|(a, b)| t * b + (1.0 - t) * a)
        .collect();
    Ok(LatentGrid {
        shape: x0.shape,
        data,
    })
}

/// `x1 − x0`, the velocity of the straight path.
pub fn target_velocity(x0: &LatentGrid, x1: &LatentGrid) -> Result<LatentGrid> {
    x0.ensure_same_shape(x1)?;
    let data = x1.data.iter().zip(&x0.data).map(|(b, a)| b - a).collect();
    Ok(LatentGrid {
        shape: x0.shape,
        data,
    })
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("time {t} is outside [0, 1]")))
    }
}
