//! Command-line front end.
//!
//! A run directory produced by `train` holds everything the other commands need:
//! `checkpoint.safetensors`, `config.toml`, `images.json` (the input paths) and
//! the exported visuals.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::apps::{self, EditLayer, Run};
use crate::error::{Error, Result};
use crate::features::{extract_grid_features, features_for_run, make_backend, precomputed::save_precomputed};
use crate::io_config::images::save_png;
use crate::io_config::{load_checkpoint, load_image_set, save_checkpoint, ImageSet, KeypointAnnotations, RunConfig, ThresholdMode};
use crate::trainer::{Model, Trainer};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "JPG"];

#[derive(Debug, Parser)]
#[command(name = "congeal", version, about = "Joint feature-atlas congealing of small image sets")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=2000` or `--set stn.coarse_grid=16`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Print the merged configuration and exit.
    #[arg(long, global = true)]
    pub show_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a run on an image set and export its visuals.
    Train {
        /// Image files or directories of images.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Keypoint transfer PCK of a trained run.
    EvalPck {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Threshold scale; defaults to the one stored in the annotations.
        #[arg(long)]
        mode: Option<Mode>,
        /// Average per-pair scores instead of pooling keypoints.
        #[arg(long)]
        macro_average: bool,
        /// Report path; defaults to `<run>/eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Propagate an RGBA edit to every image of a run.
    Edit {
        #[arg(long)]
        run: PathBuf,
        /// RGBA PNG, in atlas space unless `--source` names the image it was drawn on.
        #[arg(long)]
        edit: PathBuf,
        #[arg(long)]
        source: Option<String>,
        /// Output directory; defaults to `<run>/edits`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-export congealed images, masks and the atlas of a run.
    Export {
        #[arg(long)]
        run: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump token-grid features and initial saliency for later runs.
    ExtractFeatures {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Bbox,
    Image,
}

impl From<Mode> for ThresholdMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Bbox => ThresholdMode::Bbox,
            Mode::Image => ThresholdMode::Image,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageList {
    images: Vec<PathBuf>,
}

/// Parse `argv` and execute; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", first_line(&e.to_string()));
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").to_string()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Built-in defaults, then the config file, then `--set` overrides.
pub fn merged_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = merged_config(&cli.config)?;
    if cli.config.show_config {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    match cli.command {
        Command::Train { images, out, resume } => train(&cfg, &images, &out, resume.as_deref()),
        Command::EvalPck { run, annotations, alpha, mode, macro_average, out } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Config(format!("--alpha must be positive, got {alpha}")));
            }
            let (_, r) = load_run(&run)?;
            let mut ann = KeypointAnnotations::load(&annotations)?;
            if let Some(m) = mode {
                ann.threshold_mode = m.into();
            }
            let result = apps::run_pck(&r, &ann, alpha, macro_average)?;
            let path = out.unwrap_or_else(|| run.join("eval.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&result)?)?;
            println!("PCK@{alpha} = {:.2} ({} / {})", result.pck, result.correct, result.total);
            Ok(())
        }
        Command::Edit { run, edit, source, out } => {
            let (_, r) = load_run(&run)?;
            let layer = EditLayer::load(&edit)?;
            let targets: Vec<usize> = (0..r.images.len()).collect();
            let edited = match source {
                Some(name) => {
                    let s = r.images.index_of(&name).ok_or_else(|| Error::InvalidInput(format!("no image named `{name}` in the run")))?;
                    apps::edit_via_image(&r, s, &layer, &targets)?
                }
                None => apps::propagate_edit(&r, &layer, &targets)?,
            };
            let dir = out.unwrap_or_else(|| run.join("edits"));
            for (img, name) in edited.iter().zip(&r.images.names) {
                save_png(img, &dir.join(format!("{name}.png")))?;
            }
            println!("wrote {} edited images to {}", edited.len(), dir.display());
            Ok(())
        }
        Command::Export { run, out } => {
            let (_, r) = load_run(&run)?;
            let written = apps::export_visuals(&r, out.as_deref().unwrap_or(&run))?;
            println!("wrote {} files", written.len());
            Ok(())
        }
        Command::ExtractFeatures { images, out } => {
            let paths = expand_images(&images)?;
            let set = load_image_set(&paths, cfg.image_size, cfg.padding)?;
            let backend = make_backend(&cfg.features)?;
            let grid = extract_grid_features(backend.as_ref(), &set, &cfg.features, cfg.seed)?;
            save_precomputed(&out, &grid, backend.id(), cfg.features.stride)?;
            println!("wrote features of {} images to {}", set.len(), out.display());
            Ok(())
        }
    }
}

fn train(cfg: &RunConfig, images: &[PathBuf], out: &Path, resume: Option<&Path>) -> Result<()> {
    let paths = expand_images(images)?;
    std::fs::create_dir_all(out)?;
    let (mut trainer, set) = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let rcfg = RunConfig::from_toml_str(&ckpt.manifest.config)?;
            let set = load_image_set(&paths, rcfg.image_size, rcfg.padding)?;
            let features = features_for_run(&set, &rcfg.features, rcfg.atlas_res, rcfg.seed)?;
            let mut t = Trainer::resume(&ckpt, &set, &features)?;
            // only the schedule length may change on resume
            t.model.config.epochs = cfg.epochs.max(t.model.epoch);
            (t, set)
        }
        None => {
            let set = load_image_set(&paths, cfg.image_size, cfg.padding)?;
            let features = features_for_run(&set, &cfg.features, cfg.atlas_res, cfg.seed)?;
            (Trainer::new(cfg, &set, &features)?, set)
        }
    };
    let list = ImageList { images: paths.iter().map(|p| std::path::absolute(p).unwrap_or_else(|_| p.clone())).collect() };
    std::fs::write(out.join("images.json"), serde_json::to_string_pretty(&list)?)?;
    std::fs::write(out.join("config.toml"), trainer.model.config.to_toml_string())?;
    info!("training {} images for {} epochs", set.len(), trainer.model.config.epochs);
    trainer.run(Some(out))?;
    save_checkpoint(&trainer.checkpoint()?, &out.join("checkpoint.safetensors"))?;
    let r = Run::from_model(&trainer.model, &set)?;
    apps::export_visuals(&r, out)?;
    println!("trained to epoch {}; artifacts in {}", trainer.model.epoch, out.display());
    Ok(())
}

/// Rebuild a trained run from its directory.
pub fn load_run(dir: &Path) -> Result<(Model, Run)> {
    let ckpt = load_checkpoint(&dir.join("checkpoint.safetensors"))?;
    let text = std::fs::read_to_string(dir.join("images.json"))
        .map_err(|e| Error::InvalidInput(format!("{} is not a run directory: {e}", dir.display())))?;
    let list: ImageList = serde_json::from_str(&text)?;
    let cfg = RunConfig::from_toml_str(&ckpt.manifest.config)?;
    let set: ImageSet = load_image_set(&list.images, cfg.image_size, cfg.padding)?;
    let model = Model::from_checkpoint(&ckpt, &set)?;
    let run = Run::from_model(&model, &set)?;
    Ok((model, run))
}

/// Files as given; directories contribute their images in name order.
pub fn expand_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().and_then(|x| x.to_str()).is_some_and(|x| IMAGE_EXTENSIONS.contains(&x)))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}
