//! k-fold splitting and the per-fold training loop.
//!
//! Every iteration draws `batch_size` cases uniformly from the training
//! cases, samples one patch from each, augments it, and takes a Nesterov
//! step at the epoch's polynomial learning rate. Random streams are
//! derived from the fold seed and the global iteration index:
//!
//! - `"init"`: parameter initialisation (fold seed, index 0)
//! - `"batch"`: case choice and patch position (index = iteration)
//! - `"augment"`: augmentation (index = iteration * batch + slot)

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig};
use crate::error::{Error, Result};
use crate::inference::{stitch, InferConfig, UNetModel};
use crate::loss_grad::{backward, one_hot, poly_lr, sgd_nesterov_step};
use crate::metrics::overlap_metrics;
use crate::net::checkpoint::Checkpoint;
use crate::net::{init_params, NetParams, Tensor5, UNetConfig};
use crate::patch_plan::{PatchSampler, PatchSpec, DEFAULT_FG_PROBABILITY};
use crate::rng::{derive_seed, stream};
use crate::volume::{LabelMask, Volume3};

/// A preprocessed training case.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub image: Volume3,
    pub mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub seed: u64,
    /// Each fold's case ids, sorted.
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|c| c == id))
    }

    /// Every id outside fold `fold`, sorted.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        let mut ids: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        ids.sort();
        ids
    }
}

/// Seeded shuffle, then round-robin dealing into `k` folds.
pub fn split_folds(case_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if case_ids.len() < k {
        return Err(Error::Config(format!(
            "{} cases cannot fill {k} folds",
            case_ids.len()
        )));
    }
    let unique: BTreeSet<&String> = case_ids.iter().collect();
    if unique.len() != case_ids.len() {
        return Err(Error::Config("case ids are not unique".into()));
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    ids.shuffle(&mut stream(seed, "split", 0));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in folds.iter_mut() {
        f.sort();
    }
    Ok(FoldSplit { seed, folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 0.01,
            momentum: 0.99,
            power: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Patch shape, batch size and depth; the depth must match `net`.
    pub patch: PatchSpec,
    pub net: UNetConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub fg_probability: f64,
    /// Validation Dice every this many epochs (and after the last); 0
    /// disables validation.
    pub validate_every: usize,
    pub validation: InferConfig,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 50,
            iterations_per_epoch: 25,
            patch: PatchSpec::default(),
            net: UNetConfig::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            fg_probability: DEFAULT_FG_PROBABILITY,
            validate_every: 10,
            validation: InferConfig::default(),
            seed: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.iterations_per_epoch == 0 {
            return Err(Error::Config(
                "epochs and iterations_per_epoch must be positive".into(),
            ));
        }
        self.patch.validate()?;
        self.net.validate()?;
        if self.patch.num_resolutions != self.net.num_resolutions {
            return Err(Error::Config(format!(
                "patch plans {} resolutions but the network has {}",
                self.patch.num_resolutions, self.net.num_resolutions
            )));
        }
        if self.net.in_channels != 1 || self.net.num_classes != 2 {
            return Err(Error::Config(
                "training expects one input channel and two classes".into(),
            ));
        }
        let o = &self.optimizer;
        if !(o.lr0 > 0.0 && o.lr0.is_finite())
            || !(0.0..1.0).contains(&o.momentum)
            || !(o.power >= 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings: {o:?}")));
        }
        if !(0.0..=1.0).contains(&self.fg_probability) {
            return Err(Error::Config(format!(
                "fg_probability must be in [0, 1], got {}",
                self.fg_probability
            )));
        }
        self.augment.validate()?;
        self.validation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's iterations.
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_dice_term: f64,
    pub val_dice: Option<f64>,
}

/// 64-bit FNV-1a over voxel payloads, as lowercase hex.
pub fn fingerprint(case: &Case) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for d in case.image.dims() {
        eat(&(d as u64).to_le_bytes());
    }
    for v in case.image.data() {
        eat(&v.to_le_bytes());
    }
    eat(case.mask.data());
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub fingerprint: String,
}

/// Everything needed to reproduce one fold's checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub fold: usize,
    pub fold_seed: u64,
    pub config: TrainRunConfig,
    pub split: Option<FoldSplit>,
    pub train_cases: Vec<CaseRecord>,
    pub validation_cases: Vec<CaseRecord>,
    pub version: String,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub manifest: RunManifest,
}

/// Mean Dice of thresholded sliding-window predictions on preprocessed
/// cases.
pub fn validation_dice(
    params: &NetParams<f32>,
    net: &UNetConfig,
    cases: &[&Case],
    patch: [usize; 3],
    cfg: &InferConfig,
) -> Result<f64> {
    let model = UNetModel {
        config: net.clone(),
        params: params.clone(),
    };
    let mut total = 0.0;
    for c in cases {
        let p = stitch(&model, c.image.data(), c.image.dims(), patch, cfg)?;
        let pred = LabelMask::new(
            *c.image.geometry(),
            p.foreground()
                .iter()
                .map(|&v| (v >= cfg.threshold) as u8)
                .collect(),
        )?;
        total += overlap_metrics(&pred, &c.mask)?.dice;
    }
    Ok(total / cases.len() as f64)
}

/// Trains on `train` and validates on `validation`. `fold` labels the
/// logs; the fold seed is derived from `cfg.seed` and `fold`.
pub fn train_cases(
    train: &[&Case],
    validation: &[&Case],
    fold: usize,
    cfg: &TrainRunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training cases".into()));
    }
    let val_ids: BTreeSet<&str> = validation.iter().map(|c| c.id.as_str()).collect();
    let samplers = train
        .iter()
        .map(|c| PatchSampler::new(&c.image, &c.mask, cfg.patch.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let fold_seed = derive_seed(cfg.seed, "fold", fold as u64);
    let mut params = init_params::<f32>(&cfg.net, fold_seed)?;
    let batch = cfg.patch.batch_size;
    let dims = cfg.patch.patch_size;
    let n: usize = dims.iter().product();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg.epochs, cfg.optimizer.lr0, cfg.optimizer.power);
        let (mut sum, mut sum_ce, mut sum_dice) = (0.0, 0.0, 0.0);
        for it in 0..cfg.iterations_per_epoch {
            let global = (epoch * cfg.iterations_per_epoch + it) as u64;
            let mut rng = stream(fold_seed, "batch", global);
            let mut image = Vec::with_capacity(batch * n);
            let mut labels = Vec::with_capacity(batch * n);
            for slot in 0..batch {
                let k = rng.random_range(0..train.len());
                assert!(
                    !val_ids.contains(train[k].id.as_str()),
                    "validation case {} drawn for training",
                    train[k].id
                );
                let patch = samplers[k].sample(&mut rng, cfg.fg_probability);
                let mut arng = stream(fold_seed, "augment", global * batch as u64 + slot as u64);
                let patch = augment_pair(&patch, &cfg.augment, &mut arng);
                image.extend_from_slice(&patch.image);
                labels.extend_from_slice(&patch.label);
            }
            let input = Tensor5::from_vec(batch, 1, dims, image)?;
            let target = one_hot::<f32>(&labels, batch, dims)?;
            let (report, grads) = backward(&params, &cfg.net, &input, &target)?;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration: it,
                });
            }
            sgd_nesterov_step(&mut params, &grads, lr, cfg.optimizer.momentum)?;
            sum += report.total;
            sum_ce += report.ce_term;
            sum_dice += report.dice_term;
        }
        let iters = cfg.iterations_per_epoch as f64;
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.validate_every > 0 && ((epoch + 1) % cfg.validate_every == 0 || last);
        let val_dice = if due && !validation.is_empty() {
            Some(validation_dice(
                &params,
                &cfg.net,
                validation,
                dims,
                &cfg.validation,
            )?)
        } else {
            None
        };
        let entry = EpochLog {
            fold,
            epoch,
            lr,
            train_loss: sum / iters,
            train_ce: sum_ce / iters,
            train_dice_term: sum_dice / iters,
            val_dice,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    let record = |c: &&Case| CaseRecord {
        id: c.id.clone(),
        fingerprint: fingerprint(c),
    };
    let manifest = RunManifest {
        fold,
        fold_seed,
        config: cfg.clone(),
        split: None,
        train_cases: train.iter().map(record).collect(),
        validation_cases: validation.iter().map(record).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    params.velocity.iter_mut().for_each(|v| v.fill(0.0));
    Ok(FoldOutcome {
        checkpoint: Checkpoint {
            config: cfg.net.clone(),
            seed: fold_seed,
            epoch: cfg.epochs,
            params,
        },
        log,
        manifest,
    })
}

/// Trains fold `fold` of `split` on the cases outside it.
pub fn train_fold(
    dataset: &[Case],
    split: &FoldSplit,
    fold: usize,
    cfg: &TrainRunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FoldOutcome> {
    if fold >= split.k() {
        return Err(Error::Config(format!(
            "fold {fold} out of range for {} folds",
            split.k()
        )));
    }
    let find = |id: &String| {
        dataset.iter().find(|c| &c.id == id).ok_or_else(|| {
            Error::Config(format!("case {id} is in the split but not in the dataset"))
        })
    };
    let train = split
        .train_ids(fold)
        .iter()
        .map(find)
        .collect::<Result<Vec<_>>>()?;
    let validation = split.folds[fold]
        .iter()
        .map(find)
        .collect::<Result<Vec<_>>>()?;
    let mut out = train_cases(&train, &validation, fold, cfg, on_epoch)?;
    out.manifest.split = Some(split.clone());
    Ok(out)
}

/// Every fold in order.
pub fn cross_validate(
    dataset: &[Case],
    split: &FoldSplit,
    cfg: &TrainRunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<FoldOutcome>> {
    (0..split.k())
        .map(|f| train_fold(dataset, split, f, cfg, on_epoch))
        .collect()
}
