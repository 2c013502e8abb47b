//! The layout / reference / regularizer ablation table.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{evaluate_model, make_examples, train_model, LoadedClip, RunConfig};
use crate::error::Result;
use crate::flow::TrainExample;
use crate::layout::{LayoutMode, ReferenceFill};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub key: &'static str,
    pub label: &'static str,
    pub layout: LayoutMode,
    pub reference: ReferenceFill,
    pub lambda_rec: f64,
}

/// Layout rows without trimap or regularizer, the trimap row, then the
/// regularizer sweep on top of the trimap row. `λ = 0` of the sweep is the
/// trimap row itself and is not repeated.
pub fn table_rows() -> Vec<AblationRow> {
    let row = |key, label, layout, reference, lambda_rec| AblationRow {
        key,
        label,
        layout,
        reference,
        lambda_rec,
    };
    use LayoutMode::*;
    use ReferenceFill::*;
    vec![
        row("baseline", "Baseline (w-wise)", WidthWise, Duplicate, 0.0),
        row("h_wise", "h-wise Concatenation", HeightWise, Duplicate, 0.0),
        row("t_wise", "t-wise Concatenation", TemporalWise, Duplicate, 0.0),
        row("trimap", "Baseline + Trimap", WidthWise, Trimap, 0.0),
        row("lambda_0.1", "+ Trimap, λ = 0.1", WidthWise, Trimap, 0.1),
        row("lambda_0.3", "+ Trimap, λ = 0.3", WidthWise, Trimap, 0.3),
        row("lambda_0.5", "+ Trimap, λ = 0.5", WidthWise, Trimap, 0.5),
        row("lambda_0.8", "+ Trimap, λ = 0.8", WidthWise, Trimap, 0.8),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub soft_alpha_miou: f64,
    pub rgba_alignment: f64,
    /// Mean total loss over the last tenth of training.
    pub final_loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RowResult {
    #[serde(flatten)]
    pub row: AblationRow,
    pub runs: Vec<SeedResult>,
    pub mean_soft_alpha_miou: f64,
    pub mean_rgba_alignment: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub dataset_seed: u64,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
}

impl AblationReport {
    pub fn row(&self, key: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row.key == key)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            s,
            "Ablation over {} training steps, dataset seed {}, seeds {}.\n",
            self.steps,
            self.dataset_seed,
            seeds.join(", ")
        );
        let _ = writeln!(s, "| Setting | Layout | Reference | λ | Soft α-mIoU ↑ | RGBA Alignment ↑ |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for r in &self.rows {
            let reference = match (r.row.layout, r.row.reference) {
                (LayoutMode::TemporalWise, _) => "rgb",
                (_, ReferenceFill::Trimap) => "trimap",
                (_, ReferenceFill::Duplicate) => "duplicate",
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.2} | {:.2} |",
                r.row.label, r.row.layout, reference, r.row.lambda_rec, r.mean_soft_alpha_miou, r.mean_rgba_alignment
            );
        }
        s
    }
}

/// Run the selected rows for every seed on a shared dataset.
///
/// Each run overrides the layout, reference fill, λ, and the training and
/// sampling seeds of `base`; everything else is shared.
pub fn run_ablation(
    base: &RunConfig,
    train: &[LoadedClip],
    val: &[LoadedClip],
    mut on_run: impl FnMut(&AblationRow, &SeedResult),
) -> Result<AblationReport> {
    base.validate()?;
    let rows: Vec<AblationRow> = table_rows()
        .into_iter()
        .filter(|r| base.ablation.rows.is_empty() || base.ablation.rows.iter().any(|k| k == r.key))
        .collect();
    let mut cache: HashMap<(LayoutMode, ReferenceFill), Vec<TrainExample>> = HashMap::new();
    let mut results = Vec::with_capacity(rows.len());
    for row in rows {
        let mut runs = Vec::with_capacity(base.ablation.seeds.len());
        for &seed in &base.ablation.seeds {
            let mut cfg = base.clone();
            cfg.train.layout = row.layout;
            cfg.train.lambda_rec = row.lambda_rec;
            cfg.train.seed = seed;
            cfg.sample.seed = seed;
            cfg.data.reference = row.reference;
            let key = (row.layout, row.reference);
            if !cache.contains_key(&key) {
                cache.insert(key, make_examples(train, &cfg.data, row.layout)?);
            }
            let examples = &cache[&key];
            let (model, records) = train_model(&cfg, examples, None)?;
            let tail = (records.len() / 10).max(1);
            let final_loss = records[records.len() - tail..].iter().map(|r| r.total).sum::<f64>() / tail as f64;
            let report = evaluate_model(&model, val, &cfg)?;
            let result = SeedResult {
                seed,
                soft_alpha_miou: report.mean.soft_alpha_miou,
                rgba_alignment: report.mean.rgba_alignment.final_score,
                final_loss,
            };
            on_run(&row, &result);
            runs.push(result);
        }
        let n = runs.len() as f64;
        results.push(RowResult {
            mean_soft_alpha_miou: runs.iter().map(|r| r.soft_alpha_miou).sum::<f64>() / n,
            mean_rgba_alignment: runs.iter().map(|r| r.rgba_alignment).sum::<f64>() / n,
            row,
            runs,
        });
    }
    Ok(AblationReport {
        dataset_seed: base.data.seed,
        steps: base.train.steps,
        seeds: base.ablation.seeds.clone(),
        rows: results,
    })
}
