use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aminet::eval::{run_eval, train, FeatureSource, ModelScorer, Scorer, SourceInput};
use aminet::features::{load_features, save_features};
use aminet::model::save_checkpoint;
use aminet::scoring::{save_score_map, write_heatmap_png, ScoreRecord};
use aminet::{AmiError, BackboneSpec, Config, DatasetIndex, DefectKind, SyntheticSpec, Texture};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "aminet", version, about = "Adaptive-mask inpainting anomaly detection")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Train with feature jittering.
    #[arg(long, global = true)]
    jitter: bool,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on `<data>/train/good` and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score the test split and report detection metrics.
    Eval {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score individual images (or `.amtf` feature files).
    Infer {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write a synthetic dataset under `--out`.
    GenSynthetic {
        #[arg(long, value_enum, default_value_t = TextureArg::Stripes)]
        texture: TextureArg,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [DefectArg::Blob, DefectArg::Scratch])]
        defects: Vec<DefectArg>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 40)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        test_normal: usize,
        #[arg(long, default_value_t = 20)]
        test_anomalous: usize,
        #[arg(long, default_value_t = 0.015)]
        area_min: f64,
        #[arg(long, default_value_t = 0.04)]
        area_max: f64,
    },
    /// Extract features for every image of a dataset into `--out`, mirroring its layout.
    ExportFeatures {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TextureArg {
    Stripes,
    Checker,
    ValueNoise,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DefectArg {
    Blob,
    Scratch,
    PatchSwap,
}

fn config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.jitter |= cli.jitter;
    Ok(cfg)
}

fn checkpoint_path(cli: &Cli) -> PathBuf {
    cli.checkpoint.clone().unwrap_or_else(|| cli.out.join("model.amtf"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_scorer(cli: &Cli, root: &Path) -> Result<ModelScorer> {
    let ckpt = cli
        .checkpoint
        .as_ref()
        .ok_or_else(|| AmiError::Config("--checkpoint is required".into()))?;
    // Without an explicit config the checkpoint's own settings apply.
    let cfg = cli.config.is_some().then(|| config(cli)).transpose()?;
    Ok(ModelScorer::from_checkpoint(ckpt, cfg.as_ref(), root)?)
}

fn cmd_train(cli: &Cli, data: &Path) -> Result<()> {
    let cfg = config(cli)?;
    let index = DatasetIndex::scan(data)?;
    info!("training on {} images", index.train_normals.len());
    let outcome = train(&cfg, &index, |step, l| {
        if step % 25 == 0 {
            info!("step {step}: rec {:.5} clu {:.5e}", l.rec, l.clu);
        }
    })?;
    let ckpt = checkpoint_path(cli);
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(&ckpt, &outcome.model, &outcome.meta)?;
    let last = outcome.history.last().copied().unwrap_or_default();
    let summary = serde_json::json!({
        "checkpoint": ckpt,
        "steps": outcome.meta.steps,
        "variant": outcome.meta.variant,
        "final_loss": last,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(cli: &Cli, data: &Path) -> Result<()> {
    let index = DatasetIndex::scan(data)?;
    let scorer = load_scorer(cli, &index.root)?;
    let ev = run_eval(&index, &scorer)?;
    let json = serde_json::to_string_pretty(&ev.report)?;
    create_dir(&cli.out)?;
    let path = cli.out.join("metrics.json");
    std::fs::write(&path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    println!("{json}");
    Ok(())
}

fn cmd_infer(cli: &Cli, inputs: &[PathBuf]) -> Result<()> {
    let scorer = load_scorer(cli, Path::new("."))?;
    create_dir(&cli.out)?;
    for input in inputs {
        let decoded = if input.extension().is_some_and(|e| e == "amtf") {
            SourceInput::Features(load_features(input)?)
        } else {
            if matches!(scorer.source, FeatureSource::Precomputed { .. }) {
                return Err(AmiError::Config(format!(
                    "checkpoint expects precomputed features; pass .amtf files instead of {}",
                    input.display()
                ))
                .into());
            }
            scorer.load(input)?
        };
        let map = scorer.score(&decoded)?;
        let id = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        save_score_map(cli.out.join(format!("{id}.amtf")), &map.smoothed)?;
        write_heatmap_png(cli.out.join(format!("{id}.png")), &map.smoothed)?;
        let record = ScoreRecord {
            image_id: id.clone(),
            image_score: map.image_score,
            mask_ratio_realized: map.mask_ratio,
        };
        let json = serde_json::to_string(&record)?;
        std::fs::write(cli.out.join(format!("{id}.json")), format!("{json}\n"))?;
        println!("{json}");
    }
    Ok(())
}

fn cmd_export(cli: &Cli, data: &Path) -> Result<()> {
    let cfg = config(cli)?;
    if matches!(cfg.backbone, BackboneSpec::Precomputed { .. }) {
        return Err(AmiError::Config("export-features needs a computing backbone".into()).into());
    }
    let index = DatasetIndex::scan(data)?;
    let source = FeatureSource::new(&cfg.backbone, cfg.image_size, &index.root)?;
    let images = index.train_normals.iter().chain(index.test_items.iter().map(|t| &t.path));
    let mut count = 0;
    for image in images {
        let feat = source.load_features(image)?;
        let dest = FeatureSource::feature_path(&cli.out, &index.root, image)?;
        create_dir(dest.parent().unwrap())?;
        save_features(&dest, &feat)?;
        count += 1;
    }
    info!("wrote {count} feature files under {}", cli.out.display());
    println!("{}", serde_json::json!({ "features": count, "dir": cli.out }));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { data } => cmd_train(cli, data),
        Command::Eval { data } => cmd_eval(cli, data),
        Command::Infer { inputs } => cmd_infer(cli, inputs),
        Command::ExportFeatures { data } => cmd_export(cli, data),
        Command::GenSynthetic {
            texture,
            defects,
            size,
            train,
            test_normal,
            test_anomalous,
            area_min,
            area_max,
        } => {
            let spec = SyntheticSpec {
                image_size: *size,
                texture: match texture {
                    TextureArg::Stripes => Texture::Stripes,
                    TextureArg::Checker => Texture::Checker,
                    TextureArg::ValueNoise => Texture::ValueNoise,
                },
                defects: defects
                    .iter()
                    .map(|d| match d {
                        DefectArg::Blob => DefectKind::Blob,
                        DefectArg::Scratch => DefectKind::Scratch,
                        DefectArg::PatchSwap => DefectKind::PatchSwap,
                    })
                    .collect(),
                area_fraction: (*area_min, *area_max),
                train_normals: *train,
                test_normals: *test_normal,
                test_anomalous: *test_anomalous,
                seed: cli.seed.unwrap_or(0),
            };
            let index = aminet::generate_synthetic(&spec, &cli.out)?;
            println!(
                "{}",
                serde_json::json!({
                    "root": index.root,
                    "train": index.train_normals.len(),
                    "test": index.test_items.len(),
                    "anomalous": index.num_anomalous(),
                })
            );
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<AmiError>() {
        Some(AmiError::Spec(_)) => 2,
        Some(e) => e.exit_code() as u8,
        None => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
