//! Dataset folders and the run-directory stages: split, train, held-out
//! prediction, evaluation and report.
//!
//! A dataset is a pair of folders of NIfTI files, images and labels,
//! matched by file stem (the name without `.nii` or `.nii.gz`). Per-case
//! work runs on a worker pool sized by `ANEUSEG_WORKERS` (all cores when
//! unset); results are always ordered by case id.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{ensemble_predict, Prediction, UNetModel};
use crate::metrics::{case_metrics, volume_stats, CaseMetrics};
use crate::net::checkpoint::Checkpoint;
use crate::nifti;
use crate::preprocess::{preprocess_image, resample_mask, PREPROCESSING_ORDER};
use crate::report::{
    self, EvaluationSummary, RunDir, EMPTY_OVERLAP_CONVENTION, MEAN_DISTANCE_DEFINITION,
};
use crate::synth;
use crate::trainer::{split_folds, train_fold, Case, EpochLog, FoldSplit, RunManifest};
use crate::volume::{LabelMask, Volume3};

pub const WORKERS_ENV: &str = "ANEUSEG_WORKERS";

/// Runs `f` over `items` on the worker pool, keeping input order.
pub fn map_cases<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        b = b.num_threads(n);
    }
    let pool = b
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// File stem of a NIfTI path, or `None` for other files.
pub fn nifti_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

/// NIfTI files directly inside `dir`, keyed by stem.
pub fn list_nifti(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = nifti_stem(&path) {
            if let Some(prev) = out.insert(stem.clone(), path.clone()) {
                return Err(Error::Config(format!(
                    "{} and {} share the case id {stem}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

/// Image and label paths per case id. Every image needs a label.
pub fn pair_dataset(images: &Path, labels: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let imgs = list_nifti(images)?;
    let labs = list_nifti(labels)?;
    let missing: Vec<PathBuf> = imgs
        .keys()
        .filter(|id| !labs.contains_key(*id))
        .map(|id| labels.join(format!("{id}.nii.gz")))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    if imgs.is_empty() {
        return Err(Error::Config(format!(
            "no NIfTI images in {}",
            images.display()
        )));
    }
    Ok(imgs
        .into_iter()
        .map(|(id, p)| (id.clone(), p, labs[&id].clone()))
        .collect())
}

/// A case in its native geometry.
#[derive(Debug, Clone)]
pub struct RawCase {
    pub id: String,
    pub image: Volume3,
    pub mask: LabelMask,
}

pub fn load_dataset(images: &Path, labels: &Path) -> Result<Vec<RawCase>> {
    let pairs = pair_dataset(images, labels)?;
    map_cases(&pairs, |(id, img, lab)| {
        let image = nifti::read_volume(img)?;
        let mask = nifti::read_mask(lab)?;
        image
            .geometry()
            .ensure_matches(mask.geometry())
            .map_err(|e| Error::Config(format!("{id}: image and label grids differ: {e}")))?;
        Ok(RawCase {
            id: id.clone(),
            image,
            mask,
        })
    })
}

pub fn preprocess_dataset(raw: &[RawCase], cfg: &RunConfig) -> Result<Vec<Case>> {
    map_cases(raw, |c| {
        Ok(Case {
            id: c.id.clone(),
            image: preprocess_image(&c.image, &cfg.preprocess)?,
            mask: resample_mask(&c.mask, &cfg.preprocess)?.output,
        })
    })
}

/// Writes the synthetic sphere dataset as `images/<id>.nii.gz` and
/// `labels/<id>.nii.gz` under `out`.
pub fn write_synthetic(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let images = out.join("images");
    let labels = out.join("labels");
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
    }
    let indices: Vec<usize> = (0..cfg.synth.cases).collect();
    map_cases(&indices, |&i| {
        let c = synth::generate_case(&cfg.synth, cfg.seed, i)?;
        nifti::write_volume(
            &c.image,
            images.join(format!("{}.nii.gz", c.id)),
            nifti::DataType::Float32,
        )?;
        nifti::write_mask(&c.mask, labels.join(format!("{}.nii.gz", c.id)))?;
        Ok(c.id)
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// What `manifest.json` in each fold directory holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldManifest {
    /// The full run config with defaults filled in.
    pub resolved_config: RunConfig,
    /// Order of the image preprocessing steps.
    pub preprocessing: String,
    pub training: RunManifest,
}

/// Writes `config.json` and `split.json`.
pub fn stage_split(run: &RunDir, ids: &[String], cfg: &RunConfig) -> Result<FoldSplit> {
    let split = split_folds(ids, cfg.train.folds, cfg.seed)?;
    write_json(&run.config(), cfg)?;
    write_json(&run.split(), &split)?;
    Ok(split)
}

/// Trains the given folds and writes each fold's checkpoint, epoch log
/// and manifest.
pub fn stage_train(
    run: &RunDir,
    dataset: &[Case],
    split: &FoldSplit,
    cfg: &RunConfig,
    folds: &[usize],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<()> {
    let tcfg = cfg.train_config();
    for &fold in folds {
        let out = train_fold(dataset, split, fold, &tcfg, on_epoch)?;
        let dir = run.fold_dir(fold);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.as_path(), e))?;
        out.checkpoint.save(run.checkpoint(fold))?;
        let mut log = String::new();
        for e in &out.log {
            log += &serde_json::to_string(e)?;
            log.push('\n');
        }
        std::fs::write(run.log(fold), log).map_err(|e| Error::io(run.log(fold), e))?;
        write_json(
            &run.manifest(fold),
            &FoldManifest {
                resolved_config: cfg.clone(),
                preprocessing: PREPROCESSING_ORDER.into(),
                training: out.manifest,
            },
        )?;
    }
    Ok(())
}

pub fn load_fold_models(run: &RunDir, k: usize) -> Result<Vec<UNetModel>> {
    let paths: Vec<PathBuf> = (0..k).map(|f| run.checkpoint(f)).collect();
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.is_file()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    let ckpts = paths
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    crate::inference::models_from_checkpoints(ckpts)
}

/// Predicts every case with the ensemble of fold models whose training
/// excluded it, and writes `predictions/<id>.nii.gz`.
pub fn stage_predict_held_out(
    run: &RunDir,
    raw: &[RawCase],
    split: &FoldSplit,
    cfg: &RunConfig,
) -> Result<Vec<Prediction>> {
    let models = load_fold_models(run, split.k())?;
    let out = run.predictions();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.as_path(), e))?;
    map_cases(raw, |c| {
        let members: Vec<&UNetModel> = (0..split.k())
            .filter(|&f| !split.train_ids(f).contains(&c.id))
            .map(|f| &models[f])
            .collect();
        if members.is_empty() {
            return Err(Error::Config(format!(
                "every fold model was trained on {}",
                c.id
            )));
        }
        let p = ensemble_predict(&members, &c.image, &cfg.patch, &cfg.preprocess, &cfg.infer)?;
        nifti::write_mask(&p.mask, out.join(format!("{}.nii.gz", c.id)))?;
        Ok(p)
    })
}

/// Pairs predictions with references by stem, computes per-case and
/// cohort metrics, and writes `per_case.csv` and `cohort.json` to `out`.
pub fn evaluate_dirs(
    predictions: &Path,
    references: &Path,
    hd_percentile: f64,
    out: &Path,
) -> Result<(Vec<(String, CaseMetrics)>, EvaluationSummary)> {
    let pairs = pair_dataset(predictions, references)?;
    let rows = map_cases(&pairs, |(id, p, r)| {
        let pred = nifti::read_mask(p)?;
        let reference = nifti::read_mask(r)?;
        Ok((id.clone(), case_metrics(&pred, &reference, hd_percentile)?))
    })?;
    let metrics: Vec<CaseMetrics> = rows.iter().map(|(_, m)| *m).collect();
    let summary = EvaluationSummary {
        hd_percentile,
        mean_distance_definition: MEAN_DISTANCE_DEFINITION.into(),
        empty_overlap_convention: EMPTY_OVERLAP_CONVENTION.into(),
        cohort: volume_stats(&metrics)?,
    };
    report::write_evaluation(out, &rows, &summary)?;
    Ok((rows, summary))
}

/// Everything a full run leaves behind that callers may want to inspect.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub split: FoldSplit,
    pub per_case: Vec<(String, CaseMetrics)>,
    pub summary: report::Summary,
}

/// The whole pipeline on the dataset named by `cfg.paths`, or on the
/// synthetic dataset (written to `<run>/data`) when no images are given.
pub fn run_all(
    cfg: &RunConfig,
    run_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let run = RunDir::new(run_dir);
    let (images, labels) = match (&cfg.paths.images, &cfg.paths.labels) {
        (Some(i), Some(l)) => (i.clone(), l.clone()),
        (None, None) => {
            let data = run_dir.join("data");
            write_synthetic(cfg, &data)?;
            (data.join("images"), data.join("labels"))
        }
        _ => {
            return Err(Error::Config(
                "paths.images and paths.labels go together".into(),
            ))
        }
    };
    let raw = load_dataset(&images, &labels)?;
    let dataset = preprocess_dataset(&raw, cfg)?;
    let ids: Vec<String> = raw.iter().map(|c| c.id.clone()).collect();
    let split = stage_split(&run, &ids, cfg)?;
    let folds: Vec<usize> = (0..split.k()).collect();
    stage_train(&run, &dataset, &split, cfg, &folds, on_epoch)?;
    stage_predict_held_out(&run, &raw, &split, cfg)?;
    let (per_case, _) = evaluate_dirs(
        &run.predictions(),
        &labels,
        cfg.metrics.hd_percentile,
        &run.evaluation(),
    )?;
    let summary = report::report(run_dir)?;
    Ok(RunOutcome {
        split,
        per_case,
        summary,
    })
}
