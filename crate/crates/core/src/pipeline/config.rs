//! The merged run configuration: one JSON document plus dotted overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ablation::table_rows;
use crate::error::{Error, Result};
use crate::flow::{DenoiserConfig, ModelSpec, SampleConfig, TrainConfig, POOL};
use crate::flow::model::Geometry;
use crate::glyph::{ClipSpec, EffectKind, GlyphSpec};
use crate::layout::{LayoutMode, ReferenceFill, TemporalChoice};
use crate::metrics::optical::FlowConfig;
use crate::metrics::DEFAULT_TAU;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_clips: usize,
    pub val_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub shuffle_seed: u64,
    /// Trimap threshold on the brightest 8-bit channel.
    pub beta: u8,
    pub reference: ReferenceFill,
    pub temporal_reference: TemporalChoice,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_clips: 256,
            val_clips: 32,
            frames: 9,
            height: 32,
            width: 32,
            seed: 0,
            shuffle_seed: 0,
            beta: 5,
            reference: ReferenceFill::Trimap,
            temporal_reference: TemporalChoice::Rgb,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_clips == 0 || self.val_clips == 0 {
            return Err(Error::config("train_clips and val_clips must both be positive"));
        }
        if self.frames < 3 || self.frames % 2 == 0 {
            return Err(Error::config(format!(
                "frames must be odd and at least 3, got {}",
                self.frames
            )));
        }
        if self.height == 0 || self.width == 0 || self.height % POOL != 0 || self.width % POOL != 0 {
            return Err(Error::config(format!(
                "clip size {}x{} must be a positive multiple of {POOL}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Fraction of all clips that lands in the training split.
    pub fn split_fraction(&self) -> f64 {
        self.train_clips as f64 / (self.train_clips + self.val_clips) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub text: String,
    pub effect: EffectKind,
    pub scale: usize,
    pub color: [f64; 3],
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            text: "HI".into(),
            effect: EffectKind::FadeInOut,
            scale: 2,
            color: [1.0, 0.6, 0.2],
            seed: 0,
        }
    }
}

impl PromptConfig {
    pub fn clip_spec(&self, data: &DataConfig) -> ClipSpec {
        ClipSpec {
            glyph: GlyphSpec {
                text: self.text.clone(),
                scale: self.scale,
                color: self.color,
            },
            effect: self.effect,
            frames: data.frames,
            height: data.height,
            width: data.width,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Minimum flow magnitude (px) for the direction term.
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Number of synthetic clips in the checked batch.
    pub examples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            tolerance: 1e-4,
            seed: 0,
            examples: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Row keys to run; empty means the whole table.
    pub rows: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            rows: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub flow: FlowConfig,
    pub eval: EvalConfig,
    pub prompt: PromptConfig,
    pub gradcheck: GradCheckConfig,
    pub ablation: AblationConfig,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            flow: FlowConfig::default(),
            eval: EvalConfig::default(),
            prompt: PromptConfig::default(),
            gradcheck: GradCheckConfig::default(),
            ablation: AblationConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    /// Read an optional JSON file, apply `key=value` overrides, then `seed`.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let parsed: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                serde_json::to_value(parsed)?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for s in sets {
            apply_override(&mut value, s)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        if let Some(seed) = seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Point every seed at `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.data.shuffle_seed = seed;
        self.train.seed = seed;
        self.sample.seed = seed;
        self.prompt.seed = seed;
        self.gradcheck.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.flow.validate()?;
        if !(self.eval.tau >= 0.0 && self.eval.tau.is_finite()) {
            return Err(Error::config("eval.tau must be a finite non-negative number"));
        }
        self.prompt
            .clip_spec(&self.data)
            .validate()
            .map_err(|e| Error::config(format!("prompt: {e}")))?;
        if self.gradcheck.samples == 0 || self.gradcheck.examples == 0 {
            return Err(Error::config("gradcheck.samples and gradcheck.examples must be positive"));
        }
        if !(self.gradcheck.tolerance > 0.0) {
            return Err(Error::config("gradcheck.tolerance must be positive"));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds must not be empty"));
        }
        let rows = table_rows();
        for key in &self.ablation.rows {
            if !rows.iter().any(|r| r.key == *key) {
                return Err(Error::config(format!("unknown ablation row {key:?}")));
            }
        }
        for layout in LayoutMode::ALL {
            self.model_spec(layout).geometry.validate(&self.model)?;
        }
        Ok(())
    }

    /// Latent geometry of the joint clip under `layout`.
    pub fn model_spec(&self, layout: LayoutMode) -> ModelSpec {
        let (f, h, w) = (self.data.frames, self.data.height / POOL, self.data.width / POOL);
        let (frames, height, width) = match layout {
            LayoutMode::WidthWise => (f, h, 2 * w),
            LayoutMode::HeightWise => (f, 2 * h, w),
            LayoutMode::TemporalWise => (2 * f, h, w),
        };
        ModelSpec {
            config: self.model.clone(),
            geometry: Geometry {
                frames,
                height,
                width,
                layout,
                num_effects: EffectKind::ALL.len(),
            },
        }
    }
}

/// Apply `a.b.c=value` to a JSON tree. The value is parsed as JSON when
/// possible and taken as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(format!("override {assignment:?} has an empty key")));
    }
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
