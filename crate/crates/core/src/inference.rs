//! Sliding-window prediction with Gaussian importance weighting, and
//! probability-averaging ensembles.
//!
//! A volume is preprocessed, tiled, and every tile's softmax output is
//! accumulated with the window weight. After dividing by the accumulated
//! weight and cropping the padding, the foreground probability is
//! resampled linearly back onto the native grid and thresholded at 0.5.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::checkpoint::Checkpoint;
use crate::net::{forward, softmax_channels, NetParams, Tensor5, UNetConfig};
use crate::patch_plan::{
    gaussian_window, tile_sliding_window, PatchSpec, TilePlan, DEFAULT_OVERLAP, DEFAULT_SIGMA_SCALE,
};
use crate::preprocess::spline::mirror;
use crate::preprocess::{preprocess_image, resample_values, InterpOrder, PreprocessConfig};
use crate::volume::{Geometry, LabelMask, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub overlap: f64,
    pub sigma_scale: f64,
    pub threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            overlap: DEFAULT_OVERLAP,
            sigma_scale: DEFAULT_SIGMA_SCALE,
            threshold: 0.5,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "infer.overlap must be in [0, 1), got {}",
                self.overlap
            )));
        }
        if !(self.sigma_scale > 0.0 && self.sigma_scale.is_finite()) {
            return Err(Error::Config(format!(
                "infer.sigma_scale must be positive, got {}",
                self.sigma_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "infer.threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Anything that maps an image patch to per-class probabilities.
pub trait SegModel {
    fn num_classes(&self) -> usize;

    /// Checks that `patch` is a shape the model accepts.
    fn check_patch(&self, patch: [usize; 3]) -> Result<()>;

    /// Class probabilities, `classes x voxels`, for one x-fastest patch.
    fn predict_patch(&self, image: &[f32], patch: [usize; 3]) -> Result<Vec<f64>>;
}

/// A trained network in single precision.
#[derive(Debug, Clone)]
pub struct UNetModel {
    pub config: UNetConfig,
    pub params: NetParams<f32>,
}

impl UNetModel {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        UNetModel {
            config: ckpt.config,
            params: ckpt.params,
        }
    }
}

impl SegModel for UNetModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_patch(&self, patch: [usize; 3]) -> Result<()> {
        crate::patch_plan::validate_patch(patch, self.config.num_resolutions, 1)?;
        Ok(())
    }

    fn predict_patch(&self, image: &[f32], patch: [usize; 3]) -> Result<Vec<f64>> {
        let input = Tensor5::from_vec(1, 1, patch, image.to_vec())?;
        let logits = forward(&self.params, &self.config, &input)?;
        Ok(softmax_channels(&logits).data)
    }
}

/// Stitched class probabilities on the grid that was tiled.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub dims: [usize; 3],
    pub classes: usize,
    /// `classes x voxels`, x-fastest.
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn class(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// The last class, which is the foreground for binary models.
    pub fn foreground(&self) -> &[f64] {
        self.class(self.classes - 1)
    }
}

fn extract_tile(
    image: &[f32],
    dims: [usize; 3],
    origin: [isize; 3],
    patch: [usize; 3],
) -> Vec<f32> {
    let mut out = Vec::with_capacity(patch.iter().product());
    for z in 0..patch[2] {
        let sz = mirror(origin[2] + z as isize, dims[2]);
        for y in 0..patch[1] {
            let sy = mirror(origin[1] + y as isize, dims[1]);
            let row = dims[0] * (sy + dims[1] * sz);
            for x in 0..patch[0] {
                out.push(image[row + mirror(origin[0] + x as isize, dims[0])]);
            }
        }
    }
    out
}

/// Gaussian-weighted sliding-window probabilities over `image` (already
/// preprocessed). Axes shorter than the patch are mirror-padded.
pub fn stitch<M: SegModel + ?Sized>(
    model: &M,
    image: &[f32],
    dims: [usize; 3],
    patch: [usize; 3],
    cfg: &InferConfig,
) -> Result<ProbMap> {
    cfg.validate()?;
    let n: usize = dims.iter().product();
    if n == 0 || image.len() != n {
        return Err(Error::Shape(format!(
            "image of {} voxels for dims {dims:?}",
            image.len()
        )));
    }
    model.check_patch(patch)?;
    let plan = tile_sliding_window(dims, patch, cfg.overlap);
    let tiles = plan
        .offsets
        .iter()
        .enumerate()
        .map(|(i, off)| {
            let origin = [0, 1, 2].map(|d| off[d] as isize - plan.pad_low[d] as isize);
            let tile = extract_tile(image, dims, origin, patch);
            Ok((i, model.predict_patch(&tile, patch)?))
        })
        .collect::<Result<Vec<_>>>()?;
    accumulate_tiles(&plan, model.num_classes(), cfg.sigma_scale, tiles)
}

/// Blends per-tile probabilities, given as `(plan index, classes x patch
/// voxels)` in any order. Accumulation always runs in plan order, so the
/// result does not depend on the order the tiles were computed in.
pub fn accumulate_tiles(
    plan: &TilePlan,
    classes: usize,
    sigma_scale: f64,
    mut tiles: Vec<(usize, Vec<f64>)>,
) -> Result<ProbMap> {
    tiles.sort_by_key(|t| t.0);
    if tiles.len() != plan.offsets.len() || tiles.iter().enumerate().any(|(i, t)| t.0 != i) {
        return Err(Error::Shape(
            "tiles do not match the plan one to one".into(),
        ));
    }
    let (dims, patch) = (plan.dims, plan.patch_size);
    let n: usize = dims.iter().product();
    let window = gaussian_window(patch, sigma_scale);
    let pd = plan.padded_dims;
    let pn: usize = pd.iter().product();
    let mut acc = vec![0.0f64; classes * pn];
    let mut wsum = vec![0.0f64; pn];
    let pv: usize = patch.iter().product();
    for (off, (_, probs)) in plan.offsets.iter().zip(&tiles) {
        if probs.len() != classes * pv {
            return Err(Error::Shape(format!(
                "model returned {} values for a {patch:?} patch with {classes} classes",
                probs.len()
            )));
        }
        for z in 0..patch[2] {
            for y in 0..patch[1] {
                let dst = off[0] + pd[0] * (off[1] + y + pd[1] * (off[2] + z));
                let src = patch[0] * (y + patch[1] * z);
                for x in 0..patch[0] {
                    let w = window[src + x];
                    wsum[dst + x] += w;
                    for c in 0..classes {
                        acc[c * pn + dst + x] += w * probs[c * pv + src + x];
                    }
                }
            }
        }
    }
    let mut data = vec![0.0f64; classes * n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = (x + plan.pad_low[0])
                    + pd[0] * ((y + plan.pad_low[1]) + pd[1] * (z + plan.pad_low[2]));
                let i = x + dims[0] * (y + dims[1] * z);
                for c in 0..classes {
                    data[c * n + i] = acc[c * pn + p] / wsum[p];
                }
            }
        }
    }
    Ok(ProbMap {
        dims,
        classes,
        data,
    })
}

/// Per-voxel mean of equally shaped maps. Values are sorted before a
/// running mean, so the result does not depend on the order of `maps` and
/// `k` identical maps average to exactly that map.
pub fn average_maps(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("an ensemble needs at least one model".into()))?;
    if maps
        .iter()
        .any(|m| m.dims != first.dims || m.classes != first.classes)
    {
        return Err(Error::Shape(
            "ensemble members disagree on map shape".into(),
        ));
    }
    let mut data = Vec::with_capacity(first.data.len());
    let mut vals = vec![0.0f64; maps.len()];
    for i in 0..first.data.len() {
        for (v, m) in vals.iter_mut().zip(maps) {
            *v = m.data[i];
        }
        vals.sort_by(f64::total_cmp);
        let mut mean = 0.0;
        for (k, &v) in vals.iter().enumerate() {
            mean += (v - mean) / (k + 1) as f64;
        }
        data.push(mean);
    }
    Ok(ProbMap {
        dims: first.dims,
        classes: first.classes,
        data,
    })
}

/// Prediction in native geometry plus the foreground probability.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: LabelMask,
    pub probability: Volume3,
}

/// Linear resampling of the foreground probability from `grid` back to
/// `native`, then thresholding.
pub fn to_native(
    fg: &[f64],
    grid: &Geometry,
    native: &Geometry,
    threshold: f64,
) -> Result<Prediction> {
    let p = resample_values(fg, grid, native, InterpOrder::Linear);
    let mask = LabelMask::new(*native, p.iter().map(|&v| (v >= threshold) as u8).collect())?;
    let probability = Volume3::new(*native, p.iter().map(|&v| v as f32).collect())?;
    Ok(Prediction { mask, probability })
}

fn check_spec<M: SegModel + ?Sized>(model: &M, spec: &PatchSpec) -> Result<()> {
    spec.validate()?;
    model.check_patch(spec.patch_size).map_err(|e| {
        Error::Config(format!(
            "model is incompatible with patch {:?}: {e}",
            spec.patch_size
        ))
    })
}

pub fn predict_volume<M: SegModel + ?Sized>(
    model: &M,
    vol: &Volume3,
    spec: &PatchSpec,
    pre: &PreprocessConfig,
    cfg: &InferConfig,
) -> Result<Prediction> {
    ensemble_predict(std::slice::from_ref(&model), vol, spec, pre, cfg)
}

/// Mean of the members' stitched maps on the preprocessed grid, then the
/// same resampling and threshold as a single model.
pub fn ensemble_predict<M: SegModel + ?Sized>(
    models: &[&M],
    vol: &Volume3,
    spec: &PatchSpec,
    pre: &PreprocessConfig,
    cfg: &InferConfig,
) -> Result<Prediction> {
    if models.is_empty() {
        return Err(Error::Config("an ensemble needs at least one model".into()));
    }
    let classes = models[0].num_classes();
    for m in models {
        check_spec(*m, spec)?;
        if m.num_classes() != classes {
            return Err(Error::Config(
                "ensemble members disagree on the number of classes".into(),
            ));
        }
    }
    let image = preprocess_image(vol, pre)?;
    let maps = models
        .iter()
        .map(|m| stitch(*m, image.data(), image.dims(), spec.patch_size, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mean = average_maps(&maps)?;
    to_native(
        mean.foreground(),
        image.geometry(),
        vol.geometry(),
        cfg.threshold,
    )
}

/// Loads checkpoints as models, requiring one shared network config.
pub fn models_from_checkpoints(ckpts: Vec<Checkpoint>) -> Result<Vec<UNetModel>> {
    let Some(first) = ckpts.first() else {
        return Err(Error::Config("no checkpoints given".into()));
    };
    let cfg = first.config.clone();
    if ckpts.iter().any(|c| c.config != cfg) {
        return Err(Error::Config(
            "checkpoints were trained with different network configs".into(),
        ));
    }
    Ok(ckpts.into_iter().map(UNetModel::from_checkpoint).collect())
}
