use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use histovit::checkpoint::{load_checkpoint, save_checkpoint};
use histovit::data::{self, LabeledImage, Split, SplitDataset, CLASS_NAMES};
use histovit::interpret;
use histovit::metrics;
use histovit::pipeline::{self, PipelineError};
use histovit::settings::RunConfig;
use histovit::tensor::TensorError;
use histovit::vit::{init_params, ViTParams};

/// Vision-transformer transfer learning for lung histology tiles.
///
/// "Few-shot" training means a few epochs over the full training split.
#[derive(Parser)]
#[command(name = "histovit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic three-class PPM dataset.
    Synth {
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a class-directory dataset 60/20/20 and write the manifest.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Split each class separately.
        #[arg(long)]
        stratified: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune for a few epochs; writes the best checkpoint and an epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Update only the projector head.
        #[arg(long)]
        freeze_backbone: bool,
        /// Start from this checkpoint instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate a checkpoint on one split; writes metrics JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: DataArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate frozen weights without training (fresh weights unless --ckpt).
    Zeroshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        input: DataArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-vs-rest ROC curves for a split; writes CSV and prints AUCs.
    Roc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: DataArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a relevancy heatmap overlay (PPM) and raw map (CSV).
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key=value settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(e: impl Display) -> Self {
        Self { code: 2, msg: e.to_string() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match e {
            PipelineError::Diverged { .. } | PipelineError::Tensor(TensorError::NonFinite(_)) => 3,
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VIT_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn resolve(common: &Common, mut flags: Vec<(&'static str, String)>) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(read_text(p)?),
        None => None,
    };
    if let Some(s) = common.seed {
        flags.push(("seed", s.to_string()));
    }
    RunConfig::resolve(text.as_deref(), &flags).map_err(Failure::usage)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Loads the image directory at model resolution and applies the manifest.
fn load_split(input: &DataArgs, image_size: usize, seed: u64) -> Result<SplitDataset> {
    let items = data::load_image_dir(&input.data).map_err(Failure::usage)?;
    let items = items
        .iter()
        .map(|it| data::resize_to_input(it, image_size))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(Failure::usage)?;
    let records = data::manifest_from_csv(&read_text(&input.manifest)?).map_err(Failure::usage)?;
    data::apply_manifest(items, &records, seed).map_err(Failure::usage)
}

fn load_model(path: &Path) -> Result<ViTParams> {
    load_checkpoint(path)
        .map(|(p, _)| p)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            per_class,
            size,
            seed,
            out,
        } => {
            let items = data::gen_synthetic(per_class, size, seed);
            data::write_image_dir(&out, &items).map_err(Failure::usage)?;
            println!("wrote {} images to {}", items.len(), out.display());
        }
        Command::Split {
            common,
            data: dir,
            stratified,
            out,
        } => {
            let mut flags = Vec::new();
            if stratified {
                flags.push(("split_strategy", "stratified".to_string()));
            }
            let cfg = resolve(&common, flags)?;
            let items = data::load_image_dir(&dir).map_err(Failure::usage)?;
            let ds = data::split_dataset_with(items, cfg.split_seed(), cfg.split_strategy).map_err(Failure::usage)?;
            write(&out, data::manifest_to_csv(&ds.manifest))?;
            println!(
                "train={} validation={} test={}",
                ds.train.len(),
                ds.validation.len(),
                ds.test.len()
            );
        }
        Command::Train {
            common,
            input,
            epochs,
            lr,
            batch_size,
            freeze_backbone,
            init,
            out,
            log,
        } => {
            let mut flags = Vec::new();
            if let Some(e) = epochs {
                flags.push(("epochs", e.to_string()));
            }
            if let Some(l) = lr {
                flags.push(("lr", format!("{l:?}")));
            }
            if let Some(b) = batch_size {
                flags.push(("batch_size", b.to_string()));
            }
            if freeze_backbone {
                flags.push(("freeze_backbone", "true".to_string()));
            }
            let cfg = resolve(&common, flags)?;
            let start = match &init {
                Some(p) => load_model(p)?,
                None => init_params(&cfg.model, cfg.init_seed()).map_err(Failure::usage)?,
            };
            let ds = load_split(&input, start.config.image_size, cfg.split_seed())?;
            let zero = pipeline::zero_shot_eval(&start, &ds)?;
            println!("zero-shot test_acc={:.4}", zero.accuracy);
            let result = pipeline::fine_tune(&start, &ds, &cfg.train)?;
            for r in &result.records {
                println!(
                    "epoch {} train_loss={:.6} val_acc={:.4} test_acc={:.4}",
                    r.epoch, r.train_loss, r.validation_accuracy, r.test_accuracy
                );
            }
            info!("best epoch {}", result.best_epoch);
            save_checkpoint(&result.best, &out).map_err(|e| Failure::usage(format!("{}: {e}", out.display())))?;
            write(&log, pipeline::epoch_log_csv(&result.records))?;
        }
        Command::Eval {
            common,
            ckpt,
            input,
            split,
            out,
        } => {
            let cfg = resolve(&common, Vec::new())?;
            let params = load_model(&ckpt)?;
            evaluate_to_json(&params, &input, split, &out, cfg.split_seed())?;
        }
        Command::Zeroshot {
            common,
            ckpt,
            input,
            split,
            out,
        } => {
            let cfg = resolve(&common, Vec::new())?;
            let params = match &ckpt {
                Some(p) => load_model(p)?,
                None => init_params(&cfg.model, cfg.init_seed()).map_err(Failure::usage)?,
            };
            evaluate_to_json(&params, &input, split, &out, cfg.split_seed())?;
        }
        Command::Roc {
            common,
            ckpt,
            input,
            split,
            out,
        } => {
            let cfg = resolve(&common, Vec::new())?;
            let params = load_model(&ckpt)?;
            let ds = load_split(&input, params.config.image_size, cfg.split_seed())?;
            let eval = pipeline::evaluate(&params, ds.get(split))?;
            write(&out, metrics::roc_csv(&eval.curves))?;
            for (c, curve) in eval.curves.iter().enumerate() {
                let name = CLASS_NAMES.get(c).copied().unwrap_or("?");
                match curve {
                    Some(k) => println!("{name} auc={:.8}", k.auc),
                    None => println!("{name} auc=undefined"),
                }
            }
        }
        Command::Explain {
            ckpt,
            image,
            class,
            out,
        } => {
            let params = load_model(&ckpt)?;
            let pixels = histovit::image::load_image(&image)
                .map_err(|e| Failure::usage(format!("{}: {e}", image.display())))?;
            let pixels =
                histovit::image::resize_square(&pixels, params.config.image_size).map_err(Failure::usage)?;
            let name = image.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let input = data::normalize(&pixels);
            let map = interpret::relevancy(&params, &input, class, &name).map_err(Failure::usage)?;
            let shown = LabeledImage {
                pixels,
                label: class,
                class_name: CLASS_NAMES.get(class).unwrap_or(&"").to_string(),
                source_id: name,
            };
            let csv = interpret::render_heatmap(&map, &shown, &out).map_err(Failure::usage)?;
            println!("wrote {} and {}", out.display(), csv.display());
        }
    }
    Ok(())
}

fn evaluate_to_json(params: &ViTParams, input: &DataArgs, split: Split, out: &Path, seed: u64) -> Result<()> {
    let ds = load_split(input, params.config.image_size, seed)?;
    let eval = pipeline::evaluate(params, ds.get(split))?;
    write(out, metrics::metrics_json(&eval.report, &eval.curves, &CLASS_NAMES))?;
    println!("{split} accuracy={:.4}", eval.report.accuracy);
    Ok(())
}
