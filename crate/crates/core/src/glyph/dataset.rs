//! On-disk synthetic dataset: one directory of PNG pairs per clip plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render_effect, ClipSpec, EffectKind, GlyphSpec};
use crate::error::{Error, Result};
use crate::rgba::{alpha_decode, AlphaMatte, RgbClip, RgbFrame};
use crate::rng::{derive_seed, SplitMix64};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub effect: EffectKind,
    pub text: String,
    pub seed: u64,
    pub split: Split,
    pub scale: usize,
    pub color: [f64; 3],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl ManifestEntry {
    pub fn clip_spec(&self) -> ClipSpec {
        ClipSpec {
            glyph: GlyphSpec {
                text: self.text.clone(),
                scale: self.scale,
                color: self.color,
            },
            effect: self.effect,
            frames: self.frames,
            height: self.height,
            width: self.width,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub shuffle_seed: u64,
    pub split_fraction: f64,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }
}

pub fn frame_file(kind: &str, index: usize) -> String {
    format!("{kind}_{index:03}.png")
}

/// Write each rendered clip under `out_dir/<id>/` and a manifest assigning
/// `round(n * split_fraction)` seeded-shuffled clips to the training split.
pub fn build_dataset(
    specs: &[ClipSpec],
    split_fraction: f64,
    shuffle_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::config(format!(
            "split fraction must lie in (0, 1), got {split_fraction}"
        )));
    }
    for s in specs {
        s.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let n = specs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(shuffle_seed);
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    let n_train = (n as f64 * split_fraction).round() as usize;
    let mut split = vec![Split::Val; n];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    let samples: Vec<ManifestEntry> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| ManifestEntry {
            id: format!("clip_{i:04}"),
            effect: s.effect,
            text: s.glyph.text.clone(),
            seed: s.seed,
            split: split[i],
            scale: s.glyph.scale,
            color: s.glyph.color,
            frames: s.frames,
            height: s.height,
            width: s.width,
        })
        .collect();

    specs
        .par_iter()
        .zip(samples.par_iter())
        .try_for_each(|(spec, entry)| -> Result<()> {
            let clip = render_effect(spec)?;
            write_clip(&out_dir.join(&entry.id), &clip.premultiplied(), clip.alpha_rgb().as_clip())
        })?;

    let manifest = DatasetManifest {
        shuffle_seed,
        split_fraction,
        samples,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Persist an RGB clip and its alpha-as-RGB clip as numbered PNGs.
pub fn write_clip(dir: &Path, rgb: &RgbClip, alpha_rgb: &RgbClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (r, a)) in rgb.frames().iter().zip(alpha_rgb.frames()).enumerate() {
        r.save_png(&dir.join(frame_file("rgb", i)))?;
        a.save_png(&dir.join(frame_file("alpha", i)))?;
    }
    Ok(())
}

/// A clip read back from disk: the premultiplied RGB video and decoded mattes.
#[derive(Clone, Debug)]
pub struct StoredClip {
    pub rgb: RgbClip,
    pub alpha: Vec<AlphaMatte>,
}

impl StoredClip {
    /// Reads consecutive `rgb_%03d.png` / `alpha_%03d.png` pairs until one is missing.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut rgb = Vec::new();
        let mut alpha = Vec::new();
        for i in 0.. {
            let rp: PathBuf = dir.join(frame_file("rgb", i));
            let ap: PathBuf = dir.join(frame_file("alpha", i));
            if !rp.exists() || !ap.exists() {
                break;
            }
            rgb.push(RgbFrame::load_png(&rp)?);
            alpha.push(alpha_decode(&RgbFrame::load_png(&ap)?));
        }
        if rgb.is_empty() {
            return Err(Error::InvalidInput(format!("no frames found in {}", dir.display())));
        }
        Ok(Self {
            rgb: RgbClip::new(rgb)?,
            alpha,
        })
    }
}

/// Draw `n` clip specs with varied text, color, and effect.
pub fn random_specs(n: usize, frames: usize, height: usize, width: usize, seed: u64) -> Vec<ClipSpec> {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    (0..n)
        .map(|i| {
            let clip_seed = derive_seed(seed, i as u64);
            let mut rng = SplitMix64::new(clip_seed ^ 0xA5A5_A5A5);
            let effect = EffectKind::ALL[i % EffectKind::ALL.len()];
            // Prefer the larger scale when it fits; fall back to 1.
            let mut len = 1 + rng.below(3) as usize;
            let mut scale = 2;
            let fits = |len: usize, scale: usize| {
                (len * 6 - 1) * scale <= width && 7 * scale <= height
            };
            if !fits(len, scale) {
                scale = 1;
            }
            while !fits(len, scale) && len > 1 {
                len -= 1;
            }
            let text: String = (0..len)
                .map(|_| ALPHABET[rng.below(ALPHABET.len() as u64) as usize] as char)
                .collect();
            let mut color = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
            let peak = color.iter().cloned().fold(f64::MIN, f64::max).max(1e-6);
            let target = 0.6 + 0.4 * rng.next_f64();
            for c in &mut color {
                *c = (*c / peak * target).clamp(0.0, 1.0);
            }
            ClipSpec {
                glyph: GlyphSpec { text, scale, color },
                effect,
                frames,
                height,
                width,
                seed: clip_seed,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_and_determinism() {
        let specs = random_specs(10, 5, 16, 16, 3);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m1 = build_dataset(&specs, 0.8, 42, a.path()).unwrap();
        let m2 = build_dataset(&specs, 0.8, 42, b.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.split(Split::Train).count(), 8);
        assert_eq!(m1.split(Split::Val).count(), 2);
        let t1 = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let t2 = fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(t1, t2);
        for (e, s) in m1.samples.iter().zip(&specs) {
            assert_eq!(e.effect, s.effect);
            assert_eq!(e.clip_spec(), *s);
        }
        assert_eq!(DatasetManifest::load(a.path()).unwrap(), m1);
    }

    #[test]
    fn stored_clip_matches_render() {
        let specs = random_specs(2, 3, 16, 16, 8);
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&specs, 0.5, 1, dir.path()).unwrap();
        let stored = StoredClip::load(&dir.path().join(&m.samples[0].id)).unwrap();
        let clip = render_effect(&specs[0]).unwrap();
        assert_eq!(stored.rgb.len(), 3);
        for (a, b) in stored.alpha.iter().zip(clip.alpha()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_fraction_and_unwritable_dir() {
        let specs = random_specs(2, 3, 16, 16, 8);
        let dir = tempfile::tempdir().unwrap();
        assert!(build_dataset(&specs, 1.0, 1, dir.path()).is_err());
        let file = dir.path().join("plain_file");
        fs::write(&file, b"x").unwrap();
        let err = build_dataset(&specs, 0.5, 1, &file.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn random_specs_are_valid() {
        for s in random_specs(64, 9, 32, 32, 5) {
            s.validate().unwrap();
            super::super::rasterize_text(&s.glyph, 32, 32).unwrap();
            assert!(s.glyph.color.iter().cloned().fold(0.0, f64::max) >= 0.6 - 1e-12);
        }
    }
}
