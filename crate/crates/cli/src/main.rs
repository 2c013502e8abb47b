use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use transtext::flow::checkpoint;
use transtext::glyph::Split;
use transtext::pipeline::{self, RunConfig};

const LOCK_FILE: &str = ".transtext.lock";
const CONFIG_RECORD: &str = "run_config.json";

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to anything it leaves out
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.steps=500` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Set every seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/val dataset
    Synth,
    /// Train a denoiser on a dataset
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate clips from a checkpoint
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generate every validation clip of this dataset instead of the configured prompt
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score a directory of generated clips against ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run the layout / trimap / λ ablation table
    Ablate {
        /// Reuse an existing dataset instead of synthesizing one under the output directory
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients
    Gradcheck,
}

#[derive(Parser)]
#[command(name = "transtext", version, about = "Transparent glyph animation with a joint RGB + alpha flow model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Failures that are the caller's fault map to exit code 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<transtext::Error>() {
            Some(transtext::Error::InvalidConfig(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<transtext::Error> for Failure {
    fn from(e: transtext::Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg))
}

/// Exclusive use of an output directory for the lifetime of the guard.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn record_config(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    write_file(&dir.join(CONFIG_RECORD), &(serde_json::to_string_pretty(cfg)? + "\n"))
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn run(common: Common, command: Command) -> Result<ExitCode, Failure> {
    let cfg = RunConfig::load(common.config.as_deref(), &common.sets, common.seed)?;
    let out = common.out;
    match command {
        Command::Synth => {
            let _lock = DirLock::acquire(&out)?;
            let manifest = pipeline::synth(&cfg.data, &out)?;
            let train = manifest.split(Split::Train).count();
            println!(
                "wrote {} clips ({} train, {} val) to {}",
                manifest.samples.len(),
                train,
                manifest.samples.len() - train,
                out.display()
            );
        }
        Command::Train { data } => {
            require_dir(&data, "dataset")?;
            let clips = pipeline::load_split(&data, Split::Train)?;
            pipeline::check_clips(&clips, &cfg.data)?;
            let examples = pipeline::make_examples(&clips, &cfg.data, cfg.train.layout)?;
            let _lock = DirLock::acquire(&out)?;
            record_config(&cfg, &out)?;
            let (_, records) = pipeline::train_model(&cfg, &examples, Some(&out))?;
            if let Some(last) = records.last() {
                println!(
                    "trained {} steps; final loss {:.6} (mse {:.6}, rec {:.6})",
                    records.len(),
                    last.total,
                    last.mse,
                    last.rec
                );
            }
            println!("checkpoint: {}", out.join(pipeline::FINAL_CHECKPOINT).display());
        }
        Command::Sample { checkpoint: ckpt, dataset } => {
            if !ckpt.is_file() {
                return Err(usage(format!("checkpoint {} does not exist", ckpt.display())));
            }
            if let Some(d) = &dataset {
                require_dir(d, "dataset")?;
            }
            let model = checkpoint::load(&ckpt)?;
            let geometry = model.geometry();
            if cfg.model_spec(geometry.layout).geometry != *geometry {
                return Err(usage(format!(
                    "checkpoint geometry {:?} does not match the configured clip size {}x{}x{}",
                    geometry.latent_shape(),
                    cfg.data.frames,
                    cfg.data.height,
                    cfg.data.width
                )));
            }
            let _lock = DirLock::acquire(&out)?;
            match dataset {
                Some(d) => {
                    let clips = pipeline::load_split(&d, Split::Val)?;
                    pipeline::check_clips(&clips, &cfg.data)?;
                    pipeline::sample_dataset(&model, &clips, &cfg, &out)?;
                    println!("sampled {} clips into {}", clips.len(), out.display());
                }
                None => {
                    let dir = pipeline::sample_prompt(&model, &cfg, &out)?;
                    println!("sampled {:?} into {}", cfg.prompt.text, dir.display());
                }
            }
        }
        Command::Eval { pred, gt } => {
            require_dir(&pred, "prediction directory")?;
            require_dir(&gt, "ground-truth directory")?;
            let report = pipeline::eval_dirs(&pred, &gt, &cfg)?;
            let _lock = DirLock::acquire(&out)?;
            write_file(&out.join(pipeline::EVAL_REPORT), &report.to_json()?)?;
            println!(
                "{} clips: soft alpha mIoU {:.4}, RGBA alignment {:.4}",
                report.mean.clips, report.mean.soft_alpha_miou, report.mean.rgba_alignment.final_score
            );
        }
        Command::Ablate { data } => {
            if let Some(d) = &data {
                require_dir(d, "dataset")?;
            }
            let _lock = DirLock::acquire(&out)?;
            record_config(&cfg, &out)?;
            let data_dir = match data {
                Some(d) => d,
                None => {
                    let d = out.join("data");
                    pipeline::synth(&cfg.data, &d)?;
                    d
                }
            };
            let train = pipeline::load_split(&data_dir, Split::Train)?;
            let val = pipeline::load_split(&data_dir, Split::Val)?;
            pipeline::check_clips(&train, &cfg.data)?;
            pipeline::check_clips(&val, &cfg.data)?;
            let report = pipeline::run_ablation(&cfg, &train, &val, |row, r| {
                eprintln!(
                    "{:<12} seed {:<3} mIoU {:7.3}  alignment {:7.3}  loss {:.5}",
                    row.key, r.seed, r.soft_alpha_miou, r.rgba_alignment, r.final_loss
                );
            })?;
            write_file(&out.join("ablation.json"), &report.to_json()?)?;
            let table = report.to_markdown();
            write_file(&out.join("ablation.md"), &table)?;
            print!("{table}");
        }
        Command::Gradcheck => {
            let report = pipeline::run_gradcheck(&cfg)?;
            println!(
                "max relative error {:.3e} over {} parameters (worst: {}[{}]); tolerance {:.1e}",
                report.max_rel_error, report.checked, report.worst_param, report.worst_index, cfg.gradcheck.tolerance
            );
            if !(report.max_rel_error < cfg.gradcheck.tolerance) {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("TRANSTEXT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("TRANSTEXT_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| run(cli.common, cli.command));
    match result {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
