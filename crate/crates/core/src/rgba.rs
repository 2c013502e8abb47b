//! Frame types, alpha compositing, and the Alpha-as-RGB codec.
//!
//! Pixels are `f64` in `[0, 1]` while in memory; 8-bit quantization only
//! happens at PNG boundaries and inside [`alpha_as_rgb_encode`].

use std::path::Path;

use crate::error::{ensure_dim, Error, Result};

/// A planar `3 × height × width` RGB frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbFrame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// A single-channel `height × width` opacity map.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatte {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn check_unit_range(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        None => Ok(()),
        Some(i) => Err(Error::InvalidInput(format!(
            "pixel value {} at index {i} is outside [0, 1]",
            data[i]
        ))),
    }
}

fn check_extent(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidInput(format!(
            "frame must be at least 1x1, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Mean of three channels; exact when they agree.
#[inline]
fn channel_mean(r: f64, g: f64, b: f64) -> f64 {
    if r == g && g == b {
        r
    } else {
        (r + g + b) / 3.0
    }
}

/// Quantize a unit-range value to 8 bits, rounding half away from zero.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn from_u8(v: u8) -> f64 {
    f64::from(v) / 255.0
}

impl RgbFrame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_extent(height, width)?;
        ensure_dim("data length", 3 * height * width, data.len())?;
        check_unit_range(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Build from raw data, clamping every value into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        check_extent(height, width)?;
        ensure_dim("data length", 3 * height * width, data.len())?;
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "empty frame");
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            assert!((0.0..=1.0).contains(&c), "color out of range");
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Build a frame from a per-sample function `(channel, y, x) -> value`.
    /// Values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty frame");
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        debug_assert!((0.0..=1.0).contains(&v));
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Unweighted channel mean per pixel.
    pub fn gray(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| channel_mean(self.data[i], self.data[plane + i], self.data[2 * plane + i]))
            .collect()
    }

    /// True when all three channels agree at every pixel.
    pub fn is_gray(&self) -> bool {
        let plane = self.height * self.width;
        (0..plane).all(|i| {
            self.data[i] == self.data[plane + i] && self.data[i] == self.data[2 * plane + i]
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, |c, y, x| {
            from_u8(img.get_pixel(x as u32, y as u32)[c])
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([0, 1, 2].map(|c| to_u8(self.get(c, y, x))))
        });
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

impl AlphaMatte {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_extent(height, width)?;
        ensure_dim("data length", height * width, data.len())?;
        check_unit_range(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty matte");
        assert!((0.0..=1.0).contains(&value), "alpha out of range");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty matte");
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        debug_assert!((0.0..=1.0).contains(&v));
        self.data[y * self.width + x] = v;
    }

    /// Number of strictly positive pixels.
    pub fn support(&self) -> usize {
        self.data.iter().filter(|&&a| a > 0.0).count()
    }
}

/// `alpha ⊙ fg + (1 − alpha) ⊙ bg`, alpha broadcast over channels.
pub fn composite_over(fg: &RgbFrame, alpha: &AlphaMatte, bg: &RgbFrame) -> Result<RgbFrame> {
    ensure_dim("height", fg.height, alpha.height)?;
    ensure_dim("width", fg.width, alpha.width)?;
    ensure_dim("height", fg.height, bg.height)?;
    ensure_dim("width", fg.width, bg.width)?;
    let plane = fg.height * fg.width;
    let data = fg
        .data
        .iter()
        .zip(&bg.data)
        .enumerate()
        .map(|(i, (&f, &b))| {
            let a = alpha.data[i % plane];
            a * f + (1.0 - a) * b
        })
        .collect();
    Ok(RgbFrame {
        height: fg.height,
        width: fg.width,
        data,
    })
}

/// Composite over a black background: `alpha ⊙ fg`.
pub fn premultiply(fg: &RgbFrame, alpha: &AlphaMatte) -> Result<RgbFrame> {
    composite_over(fg, alpha, &RgbFrame::zeros(fg.height, fg.width))
}

/// Replicate the 8-bit-quantized matte into all three channels.
pub fn alpha_as_rgb_encode(alpha: &AlphaMatte) -> RgbFrame {
    let q: Vec<f64> = alpha.data.iter().map(|&a| from_u8(to_u8(a))).collect();
    let mut data = Vec::with_capacity(3 * q.len());
    for _ in 0..3 {
        data.extend_from_slice(&q);
    }
    RgbFrame {
        height: alpha.height,
        width: alpha.width,
        data,
    }
}

/// Recover a matte from an alpha-as-RGB frame: channel mean, clamped.
pub fn alpha_decode(frame: &RgbFrame) -> AlphaMatte {
    let data = frame.gray().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    AlphaMatte {
        height: frame.height,
        width: frame.width,
        data,
    }
}

/// Undo premultiplication where the matte is non-zero, for previews.
pub fn unpremultiply(premul: &RgbFrame, alpha: &AlphaMatte) -> Result<RgbFrame> {
    ensure_dim("height", premul.height, alpha.height)?;
    ensure_dim("width", premul.width, alpha.width)?;
    let plane = premul.height * premul.width;
    let data = premul
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let a = alpha.data[i % plane];
            if a > 0.0 {
                (v / a).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(RgbFrame {
        height: premul.height,
        width: premul.width,
        data,
    })
}

/// Write an 8-bit RGBA PNG with a straight (non-premultiplied) alpha channel.
pub fn save_rgba_png(fg: &RgbFrame, alpha: &AlphaMatte, path: &Path) -> Result<()> {
    ensure_dim("height", fg.height, alpha.height)?;
    ensure_dim("width", fg.width, alpha.width)?;
    let img = image::RgbaImage::from_fn(fg.width as u32, fg.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgba([
            to_u8(fg.get(0, y, x)),
            to_u8(fg.get(1, y, x)),
            to_u8(fg.get(2, y, x)),
            to_u8(alpha.get(y, x)),
        ])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// An ordered, non-empty list of equally sized RGB frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbClip {
    frames: Vec<RgbFrame>,
}

impl RgbClip {
    pub fn new(frames: Vec<RgbFrame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("clip has no frames".into()))?;
        let (h, w) = first.dims();
        for f in &frames[1..] {
            ensure_dim("height", h, f.height)?;
            ensure_dim("width", w, f.width)?;
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[RgbFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<RgbFrame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}

/// An alpha-as-RGB clip: every pixel has three identical channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayClip(RgbClip);

impl GrayClip {
    pub fn try_new(clip: RgbClip) -> Result<Self> {
        match clip.frames.iter().position(|f| !f.is_gray()) {
            None => Ok(Self(clip)),
            Some(i) => Err(Error::InvalidInput(format!("frame {i} is not gray"))),
        }
    }

    pub fn encode(mattes: &[AlphaMatte]) -> Result<Self> {
        Ok(Self(RgbClip::new(mattes.iter().map(alpha_as_rgb_encode).collect())?))
    }

    pub fn as_clip(&self) -> &RgbClip {
        &self.0
    }

    pub fn into_clip(self) -> RgbClip {
        self.0
    }

    pub fn decode(&self) -> Vec<AlphaMatte> {
        self.0.frames.iter().map(alpha_decode).collect()
    }
}

impl std::ops::Deref for GrayClip {
    type Target = RgbClip;

    fn deref(&self) -> &RgbClip {
        &self.0
    }
}

/// Ground-truth transparent clip: per-frame straight foreground plus matte.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaClip {
    foreground: Vec<RgbFrame>,
    alpha: Vec<AlphaMatte>,
}

impl RgbaClip {
    pub fn new(foreground: Vec<RgbFrame>, alpha: Vec<AlphaMatte>) -> Result<Self> {
        ensure_dim("frame count", foreground.len(), alpha.len())?;
        if foreground.is_empty() {
            return Err(Error::InvalidInput("clip has no frames".into()));
        }
        let (h, w) = foreground[0].dims();
        for (f, a) in foreground.iter().zip(&alpha) {
            ensure_dim("height", h, f.height)?;
            ensure_dim("width", w, f.width)?;
            ensure_dim("height", h, a.height)?;
            ensure_dim("width", w, a.width)?;
        }
        Ok(Self { foreground, alpha })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.alpha[0].dims()
    }

    pub fn foreground(&self) -> &[RgbFrame] {
        &self.foreground
    }

    pub fn alpha(&self) -> &[AlphaMatte] {
        &self.alpha
    }

    /// The RGB video over black, `alpha_i ⊙ F_i` per frame.
    pub fn premultiplied(&self) -> RgbClip {
        let frames = self
            .foreground
            .iter()
            .zip(&self.alpha)
            .map(|(f, a)| premultiply(f, a).expect("dimensions validated"))
            .collect();
        RgbClip { frames }
    }

    pub fn alpha_rgb(&self) -> GrayClip {
        GrayClip(RgbClip {
            frames: self.alpha.iter().map(alpha_as_rgb_encode).collect(),
        })
    }
}
