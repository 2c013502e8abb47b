//! End-to-end runs: dataset synthesis, training, sampling, and evaluation.

pub mod ablation;
pub mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{
    checkpoint, encode_frame, encode_latent, grad_check, sample_euler, Denoiser, GradCheckReport, LossRecord, SampleConfig,
    TrainExample,
};
use crate::glyph::dataset::{build_dataset, frame_file, random_specs, write_clip, DatasetManifest, ManifestEntry, Split, StoredClip};
use crate::glyph::{middle_reference, render_effect, EffectKind};
use crate::layout::{compose_reference_with, concat_joint, split_joint, CompositeClip, LayoutMode, ReferenceImage};
use crate::metrics::optical::FlowConfig;
use crate::metrics::{alignment_score, soft_alpha_miou, AlignmentReport};
use crate::rgba::{alpha_decode, save_rgba_png, unpremultiply, AlphaMatte, GrayClip, RgbClip, RgbFrame};
use crate::rng::derive_seed;

pub use ablation::{run_ablation, table_rows, AblationReport, AblationRow};
pub use config::{apply_override, DataConfig, RunConfig};

pub const LOSS_LOG: &str = "loss.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ttxt";
pub const EVAL_REPORT: &str = "eval.json";
const FVD_NOTE: &str = "not computed: FVD needs a pretrained video classifier";

/// Render and write the synthetic dataset described by `data`.
pub fn synth(data: &DataConfig, out: &Path) -> Result<DatasetManifest> {
    data.validate()?;
    let specs = random_specs(
        data.train_clips + data.val_clips,
        data.frames,
        data.height,
        data.width,
        data.seed,
    );
    build_dataset(&specs, data.split_fraction(), data.shuffle_seed, out)
}

/// A manifest entry with its frames loaded.
#[derive(Clone, Debug)]
pub struct LoadedClip {
    pub entry: ManifestEntry,
    pub clip: StoredClip,
}

/// Load every clip of one split, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<LoadedClip>> {
    let manifest = DatasetManifest::load(dir)?;
    manifest
        .split(split)
        .cloned()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|entry| {
            let clip = StoredClip::load(&dir.join(&entry.id))?;
            Ok(LoadedClip { entry, clip })
        })
        .collect()
}

/// Check that loaded clips have the frame count and size the config expects.
pub fn check_clips(clips: &[LoadedClip], data: &DataConfig) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("dataset split is empty".into()));
    }
    for c in clips {
        let (h, w) = c.clip.rgb.dims();
        if (c.clip.rgb.len(), h, w) != (data.frames, data.height, data.width) {
            return Err(Error::InvalidInput(format!(
                "clip {} is {}x{}x{} but the config expects {}x{}x{}",
                c.entry.id,
                c.clip.rgb.len(),
                h,
                w,
                data.frames,
                data.height,
                data.width
            )));
        }
    }
    Ok(())
}

/// Reference condition from the middle frame of a premultiplied clip.
pub fn reference_for(rgb: &RgbClip, data: &DataConfig, layout: LayoutMode) -> Result<ReferenceImage> {
    let frames = rgb.frames();
    if frames.len() % 2 == 0 {
        return Err(Error::InvalidInput(format!(
            "middle reference needs an odd frame count, got {}",
            frames.len()
        )));
    }
    Ok(compose_reference_with(
        &frames[frames.len() / 2],
        data.beta,
        layout,
        data.reference,
        data.temporal_reference,
    ))
}

/// Encode one stored clip as a training example under `layout`.
pub fn make_example(clip: &StoredClip, effect: EffectKind, data: &DataConfig, layout: LayoutMode) -> Result<TrainExample> {
    let alpha_rgb = GrayClip::encode(&clip.alpha)?;
    let joint = concat_joint(&clip.rgb, &alpha_rgb, layout)?;
    let reference = reference_for(&clip.rgb, data, layout)?;
    Ok(TrainExample {
        x1: encode_latent(&joint)?,
        reference: encode_frame(&reference.composed)?,
        effect: effect.id(),
    })
}

pub fn make_examples(clips: &[LoadedClip], data: &DataConfig, layout: LayoutMode) -> Result<Vec<TrainExample>> {
    clips
        .par_iter()
        .map(|c| make_example(&c.clip, c.entry.effect, data, layout))
        .collect()
}

/// Train a fresh model per `cfg`. With `out`, the loss log, periodic
/// checkpoints, and the final checkpoint are written there.
pub fn train_model(cfg: &RunConfig, examples: &[TrainExample], out: Option<&Path>) -> Result<(Denoiser, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut model = Denoiser::new(cfg.model_spec(cfg.train.layout), cfg.train.seed)?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(cfg.train.steps);
    crate::flow::train(&mut model, examples, &cfg.train, |rec, model| {
        records.push(rec.clone());
        if let (Some((path, w)), Some(dir)) = (log.as_mut(), out) {
            serde_json::to_writer(&mut *w, rec)?;
            writeln!(w).map_err(|e| Error::io(path.as_path(), e))?;
            let done = rec.step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train.steps {
                let ckpt_dir = dir.join("checkpoints");
                fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
                checkpoint::save(model, &ckpt_dir.join(format!("step_{done:06}.ttxt")))?;
            }
        }
        Ok(())
    })?;
    if let (Some((path, mut w)), Some(dir)) = (log, out) {
        w.flush().map_err(|e| Error::io(&path, e))?;
        checkpoint::save(&model, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((model, records))
}

/// A generated clip split back into its halves.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub composite: CompositeClip,
    pub rgb: RgbClip,
    pub alpha_rgb: RgbClip,
    pub alpha: Vec<AlphaMatte>,
}

/// Sample one clip for a reference and effect.
pub fn predict(model: &Denoiser, reference: &ReferenceImage, effect: EffectKind, cfg: &SampleConfig) -> Result<Prediction> {
    let composite = sample_euler(model, reference, effect.id(), cfg)?;
    let (rgb, alpha_rgb) = split_joint(&composite, model.geometry().layout)?;
    let alpha = alpha_rgb.frames().iter().map(alpha_decode).collect();
    Ok(Prediction {
        composite,
        rgb,
        alpha_rgb,
        alpha,
    })
}

/// Sampling settings for the `index`-th clip of a run.
pub fn clip_sample_config(base: &SampleConfig, index: usize) -> SampleConfig {
    SampleConfig {
        seed: derive_seed(base.seed, index as u64),
        ..base.clone()
    }
}

/// Write the halves in dataset layout plus composite and RGBA previews.
pub fn write_prediction(dir: &Path, pred: &Prediction) -> Result<()> {
    write_clip(dir, &pred.rgb, &pred.alpha_rgb)?;
    for (i, frame) in pred.composite.frames().iter().enumerate() {
        frame.save_png(&dir.join(frame_file("composite", i)))?;
    }
    for (i, (rgb, alpha)) in pred.rgb.frames().iter().zip(&pred.alpha).enumerate() {
        let fg = unpremultiply(rgb, alpha)?;
        save_rgba_png(&fg, alpha, &dir.join(frame_file("rgba", i)))?;
    }
    Ok(())
}

/// Generate every validation clip of `clips` and write them under `out/<id>/`.
pub fn sample_dataset(model: &Denoiser, clips: &[LoadedClip], cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = model.geometry().layout;
    clips.par_iter().enumerate().try_for_each(|(i, c)| {
        let reference = reference_for(&c.clip.rgb, &cfg.data, layout)?;
        let pred = predict(model, &reference, c.entry.effect, &clip_sample_config(&cfg.sample, i))?;
        write_prediction(&out.join(&c.entry.id), &pred)
    })
}

/// Generate the prompt clip of `cfg.prompt` under `out/prompt/`.
pub fn sample_prompt(model: &Denoiser, cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let spec = cfg.prompt.clip_spec(&cfg.data);
    let rendered = render_effect(&spec)?;
    let mid = middle_reference(&rendered)?;
    let rgb = RgbClip::new(vec![mid])?;
    let reference = compose_reference_with(
        &rgb.frames()[0],
        cfg.data.beta,
        model.geometry().layout,
        cfg.data.reference,
        cfg.data.temporal_reference,
    );
    let pred = predict(model, &reference, spec.effect, &cfg.sample)?;
    let dir = out.join("prompt");
    write_prediction(&dir, &pred)?;
    Ok(dir)
}

#[derive(Clone, Debug, Serialize)]
pub struct ClipScore {
    pub id: String,
    pub fvd: Option<f64>,
    pub soft_alpha_miou: f64,
    pub rgba_alignment: AlignmentReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct MeanScore {
    pub clips: usize,
    pub fvd: Option<f64>,
    pub soft_alpha_miou: f64,
    pub rgba_alignment: AlignmentReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub fvd_note: String,
    pub clips: Vec<ClipScore>,
    pub mean: MeanScore,
}

impl EvalReport {
    pub fn from_clips(clips: Vec<ClipScore>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::InvalidInput("nothing to evaluate".into()));
        }
        let n = clips.len() as f64;
        let avg = |f: fn(&ClipScore) -> f64| clips.iter().map(f).sum::<f64>() / n;
        let mean = MeanScore {
            clips: clips.len(),
            fvd: None,
            soft_alpha_miou: avg(|c| c.soft_alpha_miou),
            rgba_alignment: AlignmentReport {
                epe: avg(|c| c.rgba_alignment.epe),
                angle_deg: avg(|c| c.rgba_alignment.angle_deg),
                mag_corr: avg(|c| c.rgba_alignment.mag_corr),
                dir_cos: avg(|c| c.rgba_alignment.dir_cos),
                s_epe: avg(|c| c.rgba_alignment.s_epe),
                s_angle: avg(|c| c.rgba_alignment.s_angle),
                s_mag: avg(|c| c.rgba_alignment.s_mag),
                s_dir: avg(|c| c.rgba_alignment.s_dir),
                final_score: avg(|c| c.rgba_alignment.final_score),
            },
        };
        Ok(Self {
            fvd_note: FVD_NOTE.into(),
            clips,
            mean,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Finite-difference check of a freshly initialized model on synthetic clips.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let g = &cfg.gradcheck;
    let specs = random_specs(g.examples, cfg.data.frames, cfg.data.height, cfg.data.width, g.seed);
    let examples = specs
        .par_iter()
        .map(|spec| {
            let clip = render_effect(spec)?;
            let stored = StoredClip {
                rgb: clip.premultiplied(),
                alpha: clip.alpha().to_vec(),
            };
            make_example(&stored, spec.effect, &cfg.data, cfg.train.layout)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Denoiser::new(cfg.model_spec(cfg.train.layout), g.seed)?;
    grad_check(&model, &examples, cfg.train.lambda_rec, g.samples, g.seed)
}

/// Score a generated clip: mIoU against the ground-truth mattes and
/// alignment between the generated RGB and alpha videos.
pub fn score_clip(
    id: &str,
    pred_rgb: &RgbClip,
    pred_alpha_rgb: &RgbClip,
    pred_alpha: &[AlphaMatte],
    gt_alpha: &[AlphaMatte],
    flow: &FlowConfig,
    tau: f64,
) -> Result<ClipScore> {
    Ok(ClipScore {
        id: id.to_string(),
        fvd: None,
        soft_alpha_miou: soft_alpha_miou(pred_alpha, gt_alpha)?,
        rgba_alignment: alignment_score(pred_rgb, pred_alpha_rgb, flow, tau)?,
    })
}

/// Sample and score every clip in memory.
pub fn evaluate_model(model: &Denoiser, clips: &[LoadedClip], cfg: &RunConfig) -> Result<EvalReport> {
    let layout = model.geometry().layout;
    let scores = clips
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let reference = reference_for(&c.clip.rgb, &cfg.data, layout)?;
            let pred = predict(model, &reference, c.entry.effect, &clip_sample_config(&cfg.sample, i))?;
            score_clip(&c.entry.id, &pred.rgb, &pred.alpha_rgb, &pred.alpha, &c.clip.alpha, &cfg.flow, cfg.eval.tau)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_clips(scores)
}

/// Sub-directories of `dir` holding at least one `rgb_000.png`, sorted by name.
fn clip_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().join(frame_file("rgb", 0)).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Score every clip directory of `pred` against the same-named one in `gt`.
pub fn eval_dirs(pred: &Path, gt: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let ids = clip_dirs(pred)?;
    let scores = ids
        .par_iter()
        .map(|id| {
            let p = StoredClip::load(&pred.join(id))?;
            let g = StoredClip::load(&gt.join(id))?;
            let alpha_rgb: Vec<RgbFrame> = p.alpha.iter().map(crate::rgba::alpha_as_rgb_encode).collect();
            score_clip(id, &p.rgb, &RgbClip::new(alpha_rgb)?, &p.alpha, &g.alpha, &cfg.flow, cfg.eval.tau)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_clips(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.train_clips = 3;
        cfg.data.val_clips = 2;
        cfg.data.frames = 3;
        cfg.data.height = 16;
        cfg.data.width = 16;
        cfg.model.embed_dim = 8;
        cfg.model.heads = 2;
        cfg.model.blocks = 1;
        cfg.model.patch_size = 4;
        cfg.train.steps = 3;
        cfg.train.batch_size = 2;
        cfg.sample.num_steps = 2;
        cfg.prompt.scale = 1;
        cfg
    }

    #[test]
    fn synth_train_eval_round() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let manifest = synth(&cfg.data, &data_dir).unwrap();
        assert_eq!(manifest.samples.len(), 5);
        let train = load_split(&data_dir, Split::Train).unwrap();
        let val = load_split(&data_dir, Split::Val).unwrap();
        assert_eq!((train.len(), val.len()), (3, 2));
        check_clips(&train, &cfg.data).unwrap();

        let examples = make_examples(&train, &cfg.data, cfg.train.layout).unwrap();
        let run_dir = dir.path().join("run");
        let (model, records) = train_model(&cfg, &examples, Some(&run_dir)).unwrap();
        assert_eq!(records.len(), 3);
        let log = fs::read_to_string(run_dir.join(LOSS_LOG)).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert_eq!(checkpoint::load(&run_dir.join(FINAL_CHECKPOINT)).unwrap().params(), model.params());

        let report = evaluate_model(&model, &val, &cfg).unwrap();
        assert_eq!(report.clips.len(), 2);
        for c in &report.clips {
            assert!((0.0..=100.0).contains(&c.soft_alpha_miou));
            assert!((0.0..=100.0).contains(&c.rgba_alignment.final_score));
        }
    }

    #[test]
    fn ground_truth_against_itself_has_perfect_miou() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        synth(&cfg.data, dir.path()).unwrap();
        let report = eval_dirs(dir.path(), dir.path(), &cfg).unwrap();
        assert_eq!(report.clips.len(), 5);
        assert_eq!(report.mean.soft_alpha_miou, 100.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        synth(&cfg.data, dir.path()).unwrap();
        let clips = load_split(dir.path(), Split::Train).unwrap();
        let mut other = cfg.data.clone();
        other.frames = 5;
        assert!(check_clips(&clips, &other).is_err());
    }
}
