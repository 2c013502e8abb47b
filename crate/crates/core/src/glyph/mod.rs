//! Procedural RGBA glyph animations used as training and validation data.

pub mod dataset;
pub mod font;

use serde::{Deserialize, Serialize};

pub use dataset::{
    build_dataset, frame_file, random_specs, write_clip, DatasetManifest, ManifestEntry, Split,
    StoredClip, MANIFEST_FILE,
};

use crate::error::{Error, Result};
use crate::rgba::{premultiply, AlphaMatte, RgbFrame, RgbaClip};
use crate::rng::SplitMix64;
use font::{glyph_rows, is_set, CELL_HEIGHT, CELL_WIDTH, SPACING};

/// Spatial downsampling applied by the latent encoder; clip sides must be multiples.
pub const POOL_FACTOR: usize = 2;

pub const MAX_TEXT_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub text: String,
    pub scale: usize,
    pub color: [f64; 3],
}

impl GlyphSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.text.chars().count();
        if n == 0 || n > MAX_TEXT_LEN {
            return Err(Error::config(format!(
                "text must have 1..={MAX_TEXT_LEN} characters, got {n}"
            )));
        }
        if let Some(ch) = self.text.chars().find(|&c| glyph_rows(c).is_none()) {
            return Err(Error::UnsupportedChar(ch));
        }
        if self.scale == 0 {
            return Err(Error::config("glyph scale must be at least 1"));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config("glyph color must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Rendered text extent `(height, width)` in pixels.
    pub fn extent(&self) -> (usize, usize) {
        let n = self.text.chars().count();
        let units = n * (CELL_WIDTH + SPACING) - SPACING;
        (CELL_HEIGHT * self.scale, units * self.scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    FadeInOut,
    LettersCollect,
    SnowFall,
    Flicker,
}

impl EffectKind {
    pub const ALL: [EffectKind; 4] = [
        EffectKind::FadeInOut,
        EffectKind::LettersCollect,
        EffectKind::SnowFall,
        EffectKind::Flicker,
    ];

    /// Dense class index used as the condition id.
    pub fn id(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub glyph: GlyphSpec,
    pub effect: EffectKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        self.glyph.validate()?;
        if self.frames < 3 || self.frames % 2 == 0 {
            return Err(Error::config(format!(
                "frame count must be odd and at least 3, got {}",
                self.frames
            )));
        }
        for (axis, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % POOL_FACTOR != 0 {
                return Err(Error::config(format!(
                    "{axis} {v} must be a positive multiple of {POOL_FACTOR}"
                )));
            }
        }
        Ok(())
    }

    pub fn middle(&self) -> usize {
        self.frames / 2
    }
}

/// Top-left pixel of every character cell once the text is centered.
fn char_slots(spec: &GlyphSpec, h: usize, w: usize) -> Result<Vec<(char, i64, i64)>> {
    spec.validate()?;
    let (th, tw) = spec.extent();
    if tw > w {
        return Err(Error::TextDoesNotFit {
            axis: "width",
            required: tw,
            available: w,
        });
    }
    if th > h {
        return Err(Error::TextDoesNotFit {
            axis: "height",
            required: th,
            available: h,
        });
    }
    let x0 = ((w - tw) / 2) as i64;
    let y0 = ((h - th) / 2) as i64;
    let advance = ((CELL_WIDTH + SPACING) * spec.scale) as i64;
    Ok(spec
        .text
        .chars()
        .enumerate()
        .map(|(i, ch)| (ch, x0 + i as i64 * advance, y0))
        .collect())
}

/// Ink one character at `(x, y)`, clipping anything outside the matte.
fn stamp_char(matte: &mut AlphaMatte, ch: char, x: i64, y: i64, scale: usize, value: f64) {
    let rows = glyph_rows(ch).expect("validated");
    let (h, w) = (matte.height() as i64, matte.width() as i64);
    for r in 0..CELL_HEIGHT {
        for c in 0..CELL_WIDTH {
            if !is_set(&rows, r, c) {
                continue;
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    let py = y + (r * scale + dy) as i64;
                    let px = x + (c * scale + dx) as i64;
                    if (0..h).contains(&py) && (0..w).contains(&px) {
                        let (py, px) = (py as usize, px as usize);
                        let v = matte.get(py, px).max(value);
                        matte.set(py, px, v);
                    }
                }
            }
        }
    }
}

/// Binary stencil of `spec.text`, centered in an `h × w` matte.
pub fn rasterize_text(spec: &GlyphSpec, h: usize, w: usize) -> Result<AlphaMatte> {
    let slots = char_slots(spec, h, w)?;
    let mut matte = AlphaMatte::zeros(h, w);
    for (ch, x, y) in slots {
        stamp_char(&mut matte, ch, x, y, spec.scale, 1.0);
    }
    Ok(matte)
}

/// Triangular envelope over `frames` frames: 0 at both ends, 1 at the middle.
pub fn triangle(i: usize, frames: usize) -> f64 {
    let mid = (frames / 2) as f64;
    1.0 - (i as f64 - mid).abs() / mid
}

/// Paint the solid glyph color wherever the matte is non-zero.
fn color_support(alpha: &AlphaMatte, color: [f64; 3]) -> RgbFrame {
    RgbFrame::from_fn(alpha.height(), alpha.width(), |c, y, x| {
        if alpha.get(y, x) > 0.0 {
            color[c]
        } else {
            0.0
        }
    })
}

fn scaled(stencil: &AlphaMatte, factor: f64) -> AlphaMatte {
    AlphaMatte::from_fn(stencil.height(), stencil.width(), |y, x| stencil.get(y, x) * factor)
}

/// Render the ground-truth transparent clip described by `spec`.
pub fn render_effect(spec: &ClipSpec) -> Result<RgbaClip> {
    spec.validate()?;
    let (h, w, f) = (spec.height, spec.width, spec.frames);
    let mid = spec.middle();
    let stencil = rasterize_text(&spec.glyph, h, w)?;
    let mut rng = SplitMix64::new(spec.seed);

    let alphas: Vec<AlphaMatte> = match spec.effect {
        EffectKind::FadeInOut => (0..f).map(|i| scaled(&stencil, triangle(i, f))).collect(),
        EffectKind::Flicker => (0..f)
            .map(|_| scaled(&stencil, 0.5 + 0.5 * rng.next_f64()))
            .collect(),
        EffectKind::LettersCollect => {
            let slots = char_slots(&spec.glyph, h, w)?;
            let (ch_h, ch_w) = ((CELL_HEIGHT * spec.glyph.scale) as i64, (CELL_WIDTH * spec.glyph.scale) as i64);
            // Each character starts fully outside the canvas on a seeded side.
            let starts: Vec<(i64, i64)> = slots
                .iter()
                .map(|&(_, x, y)| {
                    let jitter = rng.range_i64(0, (h.min(w) / 4) as i64);
                    match rng.below(4) {
                        0 => (x, -ch_h - jitter),
                        1 => (x, h as i64 + jitter),
                        2 => (-ch_w - jitter, y),
                        _ => (w as i64 + jitter, y),
                    }
                })
                .collect();
            (0..f)
                .map(|i| {
                    let mut m = AlphaMatte::zeros(h, w);
                    let progress = (i.min(mid) as f64) / mid as f64;
                    for (&(ch, x, y), &(sx, sy)) in slots.iter().zip(&starts) {
                        let px = sx as f64 + (x - sx) as f64 * progress;
                        let py = sy as f64 + (y - sy) as f64 * progress;
                        stamp_char(&mut m, ch, px.round() as i64, py.round() as i64, spec.glyph.scale, 1.0);
                    }
                    m
                })
                .collect()
        }
        EffectKind::SnowFall => {
            let (_, y_top) = stencil_top(&stencil);
            // Particles live strictly above the text and fade out by the middle frame.
            let count = rng.range_i64(3, 8) as usize;
            let particles: Vec<(usize, i64, i64)> = (0..count)
                .map(|_| {
                    let x = rng.below(w as u64) as usize;
                    let speed = rng.range_i64(1, 2);
                    let y = rng.range_i64(0, (y_top as i64 - 1).max(0));
                    (x, y, speed)
                })
                .collect();
            (0..f)
                .map(|i| {
                    let mut m = stencil.clone();
                    if i < mid {
                        let a = 1.0 - i as f64 / mid as f64;
                        for &(x, y0, speed) in &particles {
                            let y = y0 + speed * i as i64;
                            if y >= 0 && (y as usize) < y_top {
                                let y = y as usize;
                                m.set(y, x, m.get(y, x).max(a));
                            }
                        }
                    }
                    m
                })
                .collect()
        }
    };

    let foreground = alphas
        .iter()
        .map(|a| color_support(a, spec.glyph.color))
        .collect();
    RgbaClip::new(foreground, alphas)
}

/// `(has_ink, first inked row)`; an empty stencil reports its full height.
fn stencil_top(stencil: &AlphaMatte) -> (bool, usize) {
    let (h, w) = stencil.dims();
    (0..h)
        .find(|&y| (0..w).any(|x| stencil.get(y, x) > 0.0))
        .map_or((false, h), |y| (true, y))
}

/// The premultiplied middle frame `alpha_mid ⊙ F_mid`.
pub fn middle_reference(clip: &RgbaClip) -> Result<RgbFrame> {
    let f = clip.len();
    if f % 2 == 0 {
        return Err(Error::InvalidInput(format!(
            "middle reference needs an odd frame count, got {f}"
        )));
    }
    let mid = f / 2;
    premultiply(&clip.foreground()[mid], &clip.alpha()[mid])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glyph(text: &str, scale: usize) -> GlyphSpec {
        GlyphSpec {
            text: text.into(),
            scale,
            color: [0.9, 0.3, 0.1],
        }
    }

    fn clip(effect: EffectKind, seed: u64) -> ClipSpec {
        ClipSpec {
            glyph: glyph("AB", 2),
            effect,
            frames: 9,
            height: 32,
            width: 32,
            seed,
        }
    }

    #[test]
    fn space_is_blank() {
        let m = rasterize_text(&glyph(" ", 1), 8, 8).unwrap();
        assert_eq!(m.support(), 0);
    }

    #[test]
    fn letter_i_has_seven_pixels_in_one_column() {
        let m = rasterize_text(&glyph("I", 1), 9, 9).unwrap();
        assert_eq!(m.support(), 7);
        let cols: std::collections::BTreeSet<usize> = (0..9)
            .flat_map(|y| (0..9).map(move |x| (y, x)))
            .filter(|&(y, x)| m.get(y, x) > 0.0)
            .map(|(_, x)| x)
            .collect();
        assert_eq!(cols.len(), 1);
    }

    #[test]
    fn too_wide_text_reports_sizes() {
        let err = rasterize_text(&glyph("ABCDEF", 1), 32, 32).unwrap_err();
        match err {
            Error::TextDoesNotFit {
                required, available, ..
            } => {
                assert_eq!(required, 35);
                assert_eq!(available, 32);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(glyph("", 1).validate().is_err());
        assert!(glyph("abc", 1).validate().is_err());
        assert!(glyph(&"A".repeat(17), 1).validate().is_err());
        let mut c = clip(EffectKind::Flicker, 0);
        c.frames = 8;
        assert!(c.validate().is_err());
        c.frames = 9;
        c.width = 31;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fade_envelope_endpoints() {
        let spec = clip(EffectKind::FadeInOut, 3);
        let rgba = render_effect(&spec).unwrap();
        let stencil = rasterize_text(&spec.glyph, 32, 32).unwrap();
        assert_eq!(rgba.alpha()[0].support(), 0);
        assert_eq!(rgba.alpha()[8].support(), 0);
        assert_eq!(rgba.alpha()[4], stencil);
        let r = middle_reference(&rgba).unwrap();
        let expected = premultiply(&color_support(&stencil, spec.glyph.color), &stencil).unwrap();
        assert_eq!(r, expected);
    }

    #[test]
    fn letters_collect_assembles_at_middle() {
        let spec = clip(EffectKind::LettersCollect, 11);
        let rgba = render_effect(&spec).unwrap();
        let stencil = rasterize_text(&spec.glyph, 32, 32).unwrap();
        assert_eq!(rgba.alpha()[4], stencil);
        assert_eq!(rgba.alpha()[8], stencil);
        assert_eq!(rgba.alpha()[0].support(), 0, "letters start off canvas");
    }

    #[test]
    fn middle_support_matches_stencil_for_all_effects() {
        for effect in EffectKind::ALL {
            for seed in 0..5 {
                let spec = clip(effect, seed);
                let rgba = render_effect(&spec).unwrap();
                let stencil = rasterize_text(&spec.glyph, 32, 32).unwrap();
                let mid = &rgba.alpha()[4];
                for y in 0..32 {
                    for x in 0..32 {
                        assert_eq!(mid.get(y, x) > 0.0, stencil.get(y, x) > 0.0, "{effect:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn snowfall_has_particles_early() {
        let spec = clip(EffectKind::SnowFall, 2);
        let rgba = render_effect(&spec).unwrap();
        let stencil = rasterize_text(&spec.glyph, 32, 32).unwrap();
        assert!(rgba.alpha()[0].support() > stencil.support());
        assert_eq!(rgba.alpha()[8], stencil);
    }

    #[test]
    fn flicker_multiplier_range() {
        let spec = clip(EffectKind::Flicker, 4);
        let rgba = render_effect(&spec).unwrap();
        for a in rgba.alpha() {
            let peak = a.data().iter().cloned().fold(0.0, f64::max);
            assert!((0.5..=1.0).contains(&peak));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        for effect in EffectKind::ALL {
            assert_eq!(render_effect(&clip(effect, 7)).unwrap(), render_effect(&clip(effect, 7)).unwrap());
        }
    }

    #[test]
    fn middle_reference_rules() {
        let t = RgbaClip::new(
            vec![RgbFrame::filled(2, 2, [1.0, 0.0, 0.0]); 5],
            vec![AlphaMatte::zeros(2, 2); 5],
        )
        .unwrap();
        assert!(middle_reference(&t).unwrap().data().iter().all(|&v| v == 0.0));
        let mut alphas = vec![AlphaMatte::zeros(1, 1); 5];
        alphas[2] = AlphaMatte::filled(1, 1, 1.0);
        let c = RgbaClip::new(vec![RgbFrame::filled(1, 1, [0.5, 0.5, 0.5]); 5], alphas).unwrap();
        assert_eq!(middle_reference(&c).unwrap().get(0, 0, 0), 0.5);
        let even = RgbaClip::new(vec![RgbFrame::zeros(1, 1); 4], vec![AlphaMatte::zeros(1, 1); 4]).unwrap();
        assert!(middle_reference(&even).is_err());
    }
}
