//! `aneuseg`: command-line driver for the segmentation pipeline.
//!
//! Exit status is 0 on success, 1 when a pipeline stage fails and 2 on
//! usage errors. Diagnostics go to stderr; data goes to files or stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aneuseg_core::inference::{ensemble_predict, models_from_checkpoints, UNetModel};
use aneuseg_core::net::checkpoint::Checkpoint;
use aneuseg_core::nifti::{self, DataType};
use aneuseg_core::patch_plan::{estimate_activation_memory, validate_patch};
use aneuseg_core::pipeline::{
    self, evaluate_dirs, list_nifti, load_dataset, preprocess_dataset, read_json, stage_split,
    stage_train, write_synthetic,
};
use aneuseg_core::preprocess::{preprocess_image, resample_mask, InterpOrder, PreprocessConfig};
use aneuseg_core::render::render_overlay;
use aneuseg_core::report::{self, RunDir};
use aneuseg_core::trainer::{EpochLog, FoldSplit};
use aneuseg_core::{Axis, RunConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "aneuseg", version, about = "3D U-Net segmentation pipeline")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a NIfTI header and intensity summary as JSON.
    Inspect { file: PathBuf },
    /// Resample an image (then z-normalize it) or a label mask.
    Preprocess(PreprocessArgs),
    /// Check a patch size against the network depth and estimate memory.
    Plan(PlanArgs),
    /// Write the resolved config and a seeded k-fold split into a run directory.
    Split(RunArgs),
    /// Train fold models for a run directory that already has a split.
    Train(TrainArgs),
    /// Predict with one checkpoint.
    Predict(PredictArgs),
    /// Predict with the mean probability of several checkpoints.
    EnsemblePredict(PredictArgs),
    /// Score predictions against references, pairing files by name.
    Evaluate(EvaluateArgs),
    /// Render the fold table and cohort summary of an evaluated run.
    Report { run: PathBuf },
    /// Write one slice with the mask outline as a PGM image.
    Render(RenderArgs),
    /// Write the synthetic sphere dataset described by the config.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split, train, predict held-out cases, evaluate and report.
    Run(RunArgs),
    /// Print the resolved config, or its JSON schema.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        schema: bool,
    },
}

#[derive(Args)]
struct PreprocessArgs {
    input: PathBuf,
    output: PathBuf,
    /// Target spacing in mm, e.g. 0.5429,0.5429,0.5429.
    #[arg(long, value_parser = triple::<f64>)]
    spacing: Option<[f64; 3]>,
    /// Image interpolation order.
    #[arg(long, value_parser = order)]
    order: Option<InterpOrder>,
    /// Treat the input as a binary label mask.
    #[arg(long)]
    label: bool,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_parser = triple::<usize>)]
    patch: [usize; 3],
    #[arg(long, default_value_t = 6)]
    resolutions: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    #[arg(long, default_value_t = 320)]
    channel_cap: usize,
    /// Bytes per stored scalar.
    #[arg(long, default_value_t = 4)]
    bytes: usize,
    #[arg(long, default_value_t = aneuseg_core::patch_plan::DEFAULT_MIN_BOTTLENECK)]
    min_bottleneck: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; overrides `paths.run_dir`.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Folds to train; all when omitted.
    #[arg(long = "fold")]
    folds: Vec<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// A checkpoint; repeat for an ensemble.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Use every fold checkpoint of this run directory.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// A NIfTI image or a directory of them.
    #[arg(long)]
    input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long)]
    output: PathBuf,
    /// Also write foreground probabilities (file or directory like --output).
    #[arg(long)]
    probability: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    references: PathBuf,
    /// Output directory; `<run>/evaluation` with --run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory supplying predictions and the output location.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    hd_percentile: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_parser = axis, default_value = "z")]
    axis: Axis,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

fn triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected three comma-separated values, got '{s}'"));
    };
    let p = |v: &str| {
        v.parse::<T>()
            .map_err(|_| format!("'{v}' is not a valid number"))
    };
    Ok([p(a)?, p(b)?, p(c)?])
}

fn order(s: &str) -> Result<InterpOrder, String> {
    let v: u8 = s.parse().map_err(|_| format!("'{s}' is not 0, 1 or 3"))?;
    InterpOrder::try_from(v)
}

fn axis(s: &str) -> Result<Axis, String> {
    s.parse::<Axis>().map_err(|e| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn inspect(file: &Path) -> Result<()> {
    let h = nifti::read_header(file)?;
    let v = nifti::read_volume(file)?;
    let (min, max) = v.min_max();
    let (mean, std) = aneuseg_core::preprocess::mean_std(v.data());
    let g = h.geometry;
    print_json(&json!({
        "path": file,
        "dims": g.dims,
        "spacing": g.spacing,
        "origin": g.origin,
        "datatype": h.datatype.name(),
        "min": min,
        "max": max,
        "mean": mean,
        "std": std,
    }))
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let mut cfg = PreprocessConfig::default();
    if let Some(s) = a.spacing {
        cfg.target_spacing = s;
    }
    if let Some(o) = a.order {
        cfg.image_order = o;
    }
    cfg.validate()?;
    if a.label {
        let m = nifti::read_mask(&a.input)?;
        nifti::write_mask(&resample_mask(&m, &cfg)?.output, &a.output)?;
    } else {
        let v = nifti::read_volume(&a.input)?;
        nifti::write_volume(&preprocess_image(&v, &cfg)?, &a.output, DataType::Float32)?;
    }
    Ok(())
}

fn plan(a: &PlanArgs) -> Result<()> {
    match validate_patch(a.patch, a.resolutions, a.min_bottleneck) {
        Ok(mut spec) => {
            spec.batch_size = a.batch;
            let mem = estimate_activation_memory(&spec, a.base_channels, a.channel_cap, a.bytes)?;
            print_json(&json!({
                "valid": true,
                "patch": a.patch,
                "resolutions": a.resolutions,
                "divisor": spec.divisor(),
                "bottleneck": spec.bottleneck(),
                "batch": a.batch,
                "base_channels": a.base_channels,
                "activation_bytes": mem,
                "activation_gib": mem as f64 / (1u64 << 30) as f64,
            }))
        }
        Err(e) => {
            print_json(&json!({ "valid": false, "patch": a.patch, "error": e.to_string() }))?;
            Err(e.into())
        }
    }
}

/// Config with command-line path overrides applied.
fn resolve(a: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.images.is_some() || a.labels.is_some() {
        cfg.paths.images = a.images.clone().or(cfg.paths.images);
        cfg.paths.labels = a.labels.clone().or(cfg.paths.labels);
    }
    if let Some(r) = &a.run {
        cfg.paths.run_dir = Some(r.clone());
    }
    let Some(run) = cfg.paths.run_dir.clone() else {
        bail!("no run directory: pass --run or set paths.run_dir");
    };
    cfg.validate()?;
    Ok((cfg, run))
}

fn data_dirs(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    match (&cfg.paths.images, &cfg.paths.labels) {
        (Some(i), Some(l)) => Ok((i.clone(), l.clone())),
        _ => bail!(
            "images and labels are required: pass --images and --labels or set them under paths"
        ),
    }
}

fn split(a: &RunArgs) -> Result<()> {
    let (cfg, run) = resolve(a)?;
    let (images, labels) = data_dirs(&cfg)?;
    let ids: Vec<String> = pipeline::pair_dataset(&images, &labels)?
        .into_iter()
        .map(|(id, _, _)| id)
        .collect();
    let split = stage_split(&RunDir::new(&run), &ids, &cfg)?;
    for (k, fold) in split.folds.iter().enumerate() {
        eprintln!("fold {k}: {}", fold.join(" "));
    }
    Ok(())
}

fn log_epoch(e: &EpochLog) {
    let val = e
        .val_dice
        .map(|d| format!(" val_dice {d:.4}"))
        .unwrap_or_default();
    eprintln!(
        "fold {} epoch {:>3} lr {:.5} loss {:.4} (ce {:.4}, dice {:.4}){val}",
        e.fold, e.epoch, e.lr, e.train_loss, e.train_ce, e.train_dice_term
    );
}

fn train(a: &TrainArgs) -> Result<()> {
    let (cfg, run_dir) = resolve(&a.run)?;
    let run = RunDir::new(&run_dir);
    if !run.split().is_file() {
        bail!(
            "{} not found; run `aneuseg split` first",
            run.split().display()
        );
    }
    let split: FoldSplit = read_json(&run.split())?;
    let folds: Vec<usize> = if a.folds.is_empty() {
        (0..split.k()).collect()
    } else {
        a.folds.clone()
    };
    let (images, labels) = data_dirs(&cfg)?;
    let dataset = preprocess_dataset(&load_dataset(&images, &labels)?, &cfg)?;
    stage_train(&run, &dataset, &split, &cfg, &folds, &mut log_epoch)?;
    Ok(())
}

fn inputs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.is_dir() {
        Ok(list_nifti(path)?.into_iter().collect())
    } else {
        let id = pipeline::nifti_stem(path).context("input is not a .nii or .nii.gz file")?;
        Ok(vec![(id, path.to_path_buf())])
    }
}

fn predict(a: &PredictArgs, ensemble: bool) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut paths = a.checkpoints.clone();
    if let Some(run) = &a.run {
        let split: FoldSplit = read_json(&RunDir::new(run).split())?;
        paths.extend((0..split.k()).map(|f| RunDir::new(run).checkpoint(f)));
    }
    match (ensemble, paths.len()) {
        (_, 0) => bail!("no checkpoints: pass --checkpoint or --run"),
        (false, n) if n > 1 => bail!("predict takes one checkpoint; use ensemble-predict for {n}"),
        _ => {}
    }
    let ckpts = paths
        .iter()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let models = models_from_checkpoints(ckpts)?;
    let members: Vec<&UNetModel> = models.iter().collect();
    let files = inputs(&a.input)?;
    let into_dir = a.input.is_dir();
    let place = |base: &Path, id: &str| {
        if into_dir {
            base.join(format!("{id}.nii.gz"))
        } else {
            base.to_path_buf()
        }
    };
    for dir in [Some(&a.output), a.probability.as_ref()]
        .into_iter()
        .flatten()
    {
        if into_dir {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    pipeline::map_cases(&files, |(id, path)| {
        let vol = nifti::read_volume(path)?;
        let p = ensemble_predict(&members, &vol, &cfg.patch, &cfg.preprocess, &cfg.infer)?;
        nifti::write_mask(&p.mask, place(&a.output, id))?;
        if let Some(dir) = &a.probability {
            nifti::write_volume(&p.probability, place(dir, id), DataType::Float32)?;
        }
        Ok(())
    })?;
    eprintln!(
        "predicted {} case(s) with {} model(s)",
        files.len(),
        members.len()
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let run = a.run.as_ref().map(RunDir::new);
    let predictions = match (&a.predictions, &run) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => r.predictions(),
        (None, None) => bail!("pass --predictions or --run"),
    };
    let out = match (&a.out, &run) {
        (Some(o), _) => o.clone(),
        (None, Some(r)) => r.evaluation(),
        (None, None) => bail!("pass --out or --run"),
    };
    let hd = a.hd_percentile.unwrap_or(cfg.metrics.hd_percentile);
    let (rows, summary) = evaluate_dirs(&predictions, &a.references, hd, &out)?;
    let m = &summary.cohort.means;
    eprintln!(
        "{} cases: mean Jaccard {:.4}, mean Dice {:.4}; wrote {}",
        rows.len(),
        m.jaccard,
        m.dice,
        out.display()
    );
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let vol = nifti::read_volume(&a.image)?;
    let mask = nifti::read_mask(&a.mask)?;
    let index = a.index.unwrap_or(vol.dims()[a.axis.index()] / 2);
    render_overlay(&vol, &mask, a.axis, index)?.write_pgm(&a.output)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect { file } => inspect(&file),
        Command::Preprocess(a) => preprocess(&a),
        Command::Plan(a) => plan(&a),
        Command::Split(a) => split(&a),
        Command::Train(a) => train(&a),
        Command::Predict(a) => predict(&a, false),
        Command::EnsemblePredict(a) => predict(&a, true),
        Command::Evaluate(a) => evaluate(&a),
        Command::Report { run } => {
            let s = report::report(&run)?;
            print!("{}", s.text);
            Ok(())
        }
        Command::Render(a) => render(&a),
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref())?;
            cfg.validate()?;
            let ids = write_synthetic(&cfg, &out)?;
            eprintln!("wrote {} cases to {}", ids.len(), out.display());
            Ok(())
        }
        Command::Run(a) => {
            let (cfg, run) = resolve(&a)?;
            let out = pipeline::run_all(&cfg, &run, &mut log_epoch)?;
            print!("{}", out.summary.text);
            Ok(())
        }
        Command::Config { config, schema } => {
            if schema {
                println!("{}", RunConfig::json_schema());
            } else {
                println!("{}", load_config(config.as_deref())?.to_json());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
