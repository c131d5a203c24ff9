//! Patch geometry: validation against the network depth, activation
//! memory estimates, training-patch sampling and sliding-window tiling.

use rand::Rng as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::preprocess::spline::mirror;
use crate::rng::Rng;
use crate::volume::{LabelMask, Volume3};

pub const DEFAULT_MIN_BOTTLENECK: usize = 4;
pub const DEFAULT_FG_PROBABILITY: f64 = 1.0 / 3.0;
pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_SIGMA_SCALE: f64 = 1.0 / 8.0;

const AXES: [char; 3] = ['x', 'y', 'z'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error(
        "patch size {size} on axis {axis} is not divisible by {divisor}; nearest valid sizes: {}{above}",
        .below.map(|b| format!("{b} and ")).unwrap_or_default()
    )]
    Divisibility {
        axis: char,
        size: usize,
        divisor: usize,
        below: Option<usize>,
        above: usize,
    },
    #[error(
        "bottleneck extent {bottleneck} on axis {axis} (patch {size}) is below the minimum {min}"
    )]
    Bottleneck {
        axis: char,
        size: usize,
        bottleneck: usize,
        min: usize,
    },
    #[error("activation memory estimate overflows 64 bits")]
    Overflow,
    #[error("{0}")]
    Invalid(String),
}

/// Patch size, batch size and network depth: the large-context
/// configuration. Every patch dimension is a multiple of `2^(R-1)` and
/// leaves at least `min_bottleneck` voxels at the deepest level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub num_resolutions: usize,
    pub min_bottleneck: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_size: [192, 224, 192],
            batch_size: 2,
            num_resolutions: 6,
            min_bottleneck: DEFAULT_MIN_BOTTLENECK,
        }
    }
}

impl PatchSpec {
    pub fn new(
        patch_size: [usize; 3],
        batch_size: usize,
        num_resolutions: usize,
        min_bottleneck: usize,
    ) -> Result<Self, PatchError> {
        let mut spec = validate_patch(patch_size, num_resolutions, min_bottleneck)?;
        if batch_size == 0 {
            return Err(PatchError::Invalid("batch size must be at least 1".into()));
        }
        spec.batch_size = batch_size;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        Self::new(
            self.patch_size,
            self.batch_size,
            self.num_resolutions,
            self.min_bottleneck,
        )
        .map(|_| ())
    }

    pub fn divisor(&self) -> usize {
        1 << (self.num_resolutions - 1)
    }

    pub fn bottleneck(&self) -> [usize; 3] {
        self.patch_size.map(|p| p / self.divisor())
    }

    pub fn voxels(&self) -> usize {
        self.patch_size.iter().product()
    }
}

/// Accepts `patch_size` iff every axis is divisible by `2^(R-1)` with a
/// quotient of at least `min_bottleneck`. The returned spec has batch 1.
pub fn validate_patch(
    patch_size: [usize; 3],
    num_resolutions: usize,
    min_bottleneck: usize,
) -> Result<PatchSpec, PatchError> {
    if num_resolutions < 2 || num_resolutions > 16 {
        return Err(PatchError::Invalid(format!(
            "number of resolutions must be in 2..=16, got {num_resolutions}"
        )));
    }
    if min_bottleneck == 0 {
        return Err(PatchError::Invalid(
            "minimum bottleneck must be positive".into(),
        ));
    }
    let divisor = 1usize << (num_resolutions - 1);
    let smallest = divisor * min_bottleneck;
    for (d, &size) in patch_size.iter().enumerate() {
        if size == 0 {
            return Err(PatchError::Invalid(format!(
                "patch size on axis {} must be positive",
                AXES[d]
            )));
        }
        if size % divisor != 0 {
            let floor = size / divisor * divisor;
            return Err(PatchError::Divisibility {
                axis: AXES[d],
                size,
                divisor,
                below: (floor >= smallest).then_some(floor),
                above: (floor + divisor).max(smallest),
            });
        }
        if size / divisor < min_bottleneck {
            return Err(PatchError::Bottleneck {
                axis: AXES[d],
                size,
                bottleneck: size / divisor,
                min: min_bottleneck,
            });
        }
    }
    Ok(PatchSpec {
        patch_size,
        batch_size: 1,
        num_resolutions,
        min_bottleneck,
    })
}

/// Activation memory of one training step, in bytes:
///
/// ```text
/// B * bytes * 2 * [ sum_{r=0}^{R-1} 2 * C(r) * V / 8^r      (encoder)
///                 + sum_{r=0}^{R-2} 2 * C(r) * V / 8^r ]    (decoder)
/// ```
///
/// with `V = px * py * pz`, `C(r) = min(base * 2^r, cap)`, two conv
/// outputs per level and the factor 2 for storing forward activations plus
/// their gradients.
pub fn estimate_activation_memory(
    spec: &PatchSpec,
    base_channels: usize,
    channel_cap: usize,
    bytes_per_scalar: usize,
) -> Result<u64, PatchError> {
    let r_count = spec.num_resolutions;
    let level_term = |r: usize| -> Option<u64> {
        let c = (base_channels as u64)
            .checked_mul(1u64.checked_shl(r as u32)?)?
            .min(channel_cap as u64);
        let vox = spec
            .patch_size
            .iter()
            .try_fold(1u64, |acc, &p| acc.checked_mul((p >> r) as u64))?;
        2u64.checked_mul(c)?.checked_mul(vox)
    };
    let mut sum = 0u64;
    for r in (0..r_count).chain(0..r_count - 1) {
        sum = level_term(r)
            .and_then(|t| sum.checked_add(t))
            .ok_or(PatchError::Overflow)?;
    }
    (spec.batch_size as u64)
        .checked_mul(bytes_per_scalar as u64)
        .and_then(|x| x.checked_mul(2))
        .and_then(|x| x.checked_mul(sum))
        .ok_or(PatchError::Overflow)
}

/// An image/label patch pair, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: [usize; 3],
    pub image: Vec<f32>,
    pub label: Vec<u8>,
}

/// Samples training patches from one case. Volumes smaller than the patch
/// are padded symmetrically: mirror for the image, zeros for the label.
#[derive(Debug)]
pub struct PatchSampler<'a> {
    image: &'a Volume3,
    mask: &'a LabelMask,
    patch: [usize; 3],
    pad_low: [usize; 3],
    padded: [usize; 3],
    foreground: Vec<usize>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(image: &'a Volume3, mask: &'a LabelMask, patch: [usize; 3]) -> Result<Self> {
        image.geometry().ensure_matches(mask.geometry())?;
        let dims = image.dims();
        let mut pad_low = [0; 3];
        let mut padded = dims;
        for d in 0..3 {
            if dims[d] < patch[d] {
                pad_low[d] = (patch[d] - dims[d]) / 2;
                padded[d] = patch[d];
            }
        }
        let foreground = mask
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
            .collect();
        Ok(PatchSampler {
            image,
            mask,
            patch,
            pad_low,
            padded,
            foreground,
        })
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        self.padded
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.len()
    }

    /// Largest valid origin per axis (inclusive).
    pub fn max_origin(&self) -> [usize; 3] {
        [0, 1, 2].map(|d| self.padded[d] - self.patch[d])
    }

    /// With probability `fg_probability` (and a nonempty mask) the patch is
    /// centred on a uniformly chosen foreground voxel, clamped to stay in
    /// bounds; otherwise the origin is uniform over all valid origins.
    pub fn sample(&self, rng: &mut Rng, fg_probability: f64) -> Patch {
        let force_fg = rng.random::<f64>() < fg_probability;
        let max = self.max_origin();
        let origin = if force_fg && !self.foreground.is_empty() {
            let idx = self.foreground[rng.random_range(0..self.foreground.len())];
            let c = self.image.geometry().coords(idx);
            [0, 1, 2].map(|d| {
                let centre = c[d] + self.pad_low[d];
                centre.saturating_sub(self.patch[d] / 2).min(max[d])
            })
        } else {
            [0, 1, 2].map(|d| rng.random_range(0..=max[d]))
        };
        self.extract(origin)
    }

    /// Patch whose first voxel sits at `origin` in padded coordinates.
    pub fn extract(&self, origin: [usize; 3]) -> Patch {
        let dims = self.image.dims();
        let [px, py, pz] = self.patch;
        let n = px * py * pz;
        let mut image = Vec::with_capacity(n);
        let mut label = Vec::with_capacity(n);
        let src = |d: usize, p: usize| p as isize + origin[d] as isize - self.pad_low[d] as isize;
        for z in 0..pz {
            let sz = src(2, z);
            for y in 0..py {
                let sy = src(1, y);
                for x in 0..px {
                    let sx = src(0, x);
                    let inside = sx >= 0
                        && sy >= 0
                        && sz >= 0
                        && (sx as usize) < dims[0]
                        && (sy as usize) < dims[1]
                        && (sz as usize) < dims[2];
                    let (mx, my, mz) = (
                        mirror(sx, dims[0]),
                        mirror(sy, dims[1]),
                        mirror(sz, dims[2]),
                    );
                    image.push(self.image.get(mx, my, mz));
                    label.push(if inside { self.mask.get(mx, my, mz) } else { 0 });
                }
            }
        }
        Patch {
            size: self.patch,
            image,
            label,
        }
    }
}

pub fn sample_training_patch(
    image: &Volume3,
    mask: &LabelMask,
    spec: &PatchSpec,
    rng: &mut Rng,
    fg_probability: f64,
) -> Result<Patch> {
    Ok(PatchSampler::new(image, mask, spec.patch_size)?.sample(rng, fg_probability))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    /// Tile origins in padded coordinates, x varying fastest.
    pub offsets: Vec<[usize; 3]>,
    pub patch_size: [usize; 3],
    pub dims: [usize; 3],
    pub padded_dims: [usize; 3],
    pub pad_low: [usize; 3],
    pub pad_high: [usize; 3],
}

/// Origins along one axis: multiples of `step`, with the last tile flush
/// against the end.
pub fn axis_offsets(padded: usize, patch: usize, step: usize) -> Vec<usize> {
    let last = padded - patch;
    let mut out = Vec::new();
    let mut o = 0;
    while o < last {
        out.push(o);
        o += step;
    }
    out.push(last);
    out
}

/// Tiles a `dims` grid with `patch_size` windows at the given overlap.
/// Axes shorter than the patch are padded symmetrically first.
///
/// Panics unless `0 <= overlap_fraction < 1`.
pub fn tile_sliding_window(
    dims: [usize; 3],
    patch_size: [usize; 3],
    overlap_fraction: f64,
) -> TilePlan {
    assert!(
        (0.0..1.0).contains(&overlap_fraction),
        "overlap fraction must be in [0, 1), got {overlap_fraction}"
    );
    let mut padded = dims;
    let mut pad_low = [0; 3];
    let mut pad_high = [0; 3];
    let mut per_axis: Vec<Vec<usize>> = Vec::with_capacity(3);
    for d in 0..3 {
        if dims[d] < patch_size[d] {
            let total = patch_size[d] - dims[d];
            pad_low[d] = total / 2;
            pad_high[d] = total - pad_low[d];
            padded[d] = patch_size[d];
        }
        let step = ((patch_size[d] as f64 * (1.0 - overlap_fraction)).floor() as usize).max(1);
        per_axis.push(axis_offsets(padded[d], patch_size[d], step));
    }
    let mut offsets = Vec::new();
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                offsets.push([x, y, z]);
            }
        }
    }
    TilePlan {
        offsets,
        patch_size,
        dims,
        padded_dims: padded,
        pad_low,
        pad_high,
    }
}

/// Separable Gaussian importance window, `sigma_d = sigma_scale * patch_d`,
/// centred at `(patch_d - 1) / 2`, scaled to a maximum of 1 and floored at
/// 1e-6 so every voxel keeps a positive weight.
pub fn gaussian_window(patch_size: [usize; 3], sigma_scale: f64) -> Vec<f64> {
    assert!(sigma_scale > 0.0, "sigma scale must be positive");
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let s = sigma_scale * n as f64;
        (0..n)
            .map(|i| {
                let t = i as f64 - c;
                (-t * t / (2.0 * s * s)).exp()
            })
            .collect()
    };
    let (wx, wy, wz) = (
        axis(patch_size[0]),
        axis(patch_size[1]),
        axis(patch_size[2]),
    );
    let mut w = Vec::with_capacity(patch_size.iter().product());
    for &gz in &wz {
        for &gy in &wy {
            for &gx in &wx {
                w.push(gx * gy * gz);
            }
        }
    }
    let max = w.iter().cloned().fold(0.0f64, f64::max);
    let floor = 1e-6;
    for v in w.iter_mut() {
        *v = (*v / max).max(floor);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::volume::Geometry;
    use proptest::prelude::*;

    #[test]
    fn large_context_patch_is_valid() {
        let spec = validate_patch([192, 224, 192], 6, 4).unwrap();
        assert_eq!(spec.bottleneck(), [6, 7, 6]);
    }

    #[test]
    fn divisibility_error_suggests_neighbours() {
        let err = validate_patch([190, 224, 192], 6, 4).unwrap_err();
        assert_eq!(
            err,
            PatchError::Divisibility {
                axis: 'x',
                size: 190,
                divisor: 32,
                below: Some(160),
                above: 192
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("axis x") && msg.contains("160") && msg.contains("192"));
    }

    #[test]
    fn small_patch_configurations() {
        assert_eq!(
            validate_patch([64, 64, 64], 4, 4).unwrap().bottleneck(),
            [8, 8, 8]
        );
        assert!(matches!(
            validate_patch([64, 64, 32], 5, 4),
            Err(PatchError::Bottleneck { axis: 'z', .. })
        ));
        // below the smallest valid size there is no "below" suggestion
        assert!(matches!(
            validate_patch([20, 64, 64], 4, 4),
            Err(PatchError::Divisibility {
                below: None,
                above: 32,
                ..
            })
        ));
        assert!(PatchSpec::new([32; 3], 0, 2, 4).is_err());
    }

    #[test]
    fn exhaustive_predicate_scan() {
        for r in 2..=6usize {
            let div = 1 << (r - 1);
            for p in 1..=256usize {
                let expect = p % div == 0 && p / div >= 4;
                for axis in 0..3 {
                    let mut size = [div * 4; 3];
                    size[axis] = p;
                    assert_eq!(validate_patch(size, r, 4).is_ok(), expect, "p={p} r={r}");
                }
            }
        }
    }

    #[test]
    fn memory_estimate_closed_form() {
        let spec = PatchSpec::new([32, 32, 32], 1, 2, 4).unwrap();
        // encoder r0: 2*2*32768 = 131072, r1: 2*4*4096 = 32768; decoder r0: 131072
        // 294912 * batch 1 * 4 bytes * 2 = 2359296
        assert_eq!(
            estimate_activation_memory(&spec, 2, 320, 4).unwrap(),
            2_359_296
        );

        let b2 = PatchSpec::new([32, 32, 32], 2, 2, 4).unwrap();
        assert_eq!(
            estimate_activation_memory(&b2, 2, 320, 4).unwrap(),
            2 * 2_359_296
        );

        let big = PatchSpec::new([192, 224, 192], 2, 6, 4).unwrap();
        let small = PatchSpec::new([160, 192, 128], 2, 6, 4).unwrap();
        assert!(
            estimate_activation_memory(&big, 32, 320, 4).unwrap()
                > estimate_activation_memory(&small, 32, 320, 4).unwrap()
        );
        let huge = PatchSpec::new([1 << 14; 3], usize::MAX >> 1, 2, 4).unwrap();
        assert_eq!(
            estimate_activation_memory(&huge, 32, 320, 8),
            Err(PatchError::Overflow)
        );
    }

    #[test]
    fn monotone_in_channels_below_cap() {
        let spec = PatchSpec::new([64, 64, 64], 2, 4, 4).unwrap();
        let mut prev = 0;
        for base in 1..=40 {
            let m = estimate_activation_memory(&spec, base, 320, 4).unwrap();
            assert!(m > prev);
            prev = m;
        }
    }

    fn case(dims: [usize; 3], fg: &[[usize; 3]]) -> (Volume3, LabelMask) {
        let g = Geometry::unit(dims).unwrap();
        let v = Volume3::from_fn(g, |x, y, z| (x + 100 * y + 10000 * z) as f32).unwrap();
        (v, LabelMask::from_voxels(g, fg).unwrap())
    }

    #[test]
    fn full_volume_patch() {
        let (v, m) = case([8, 8, 8], &[[1, 2, 3]]);
        let spec = PatchSpec::new([8, 8, 8], 1, 2, 4).unwrap();
        let mut r = rng::stream(1, "test", 0);
        for _ in 0..5 {
            let p = sample_training_patch(&v, &m, &spec, &mut r, 0.5).unwrap();
            assert_eq!(p.image, v.data());
            assert_eq!(p.label, m.data());
        }
    }

    #[test]
    fn forced_foreground_contains_voxel() {
        let (v, m) = case([40, 30, 20], &[[37, 1, 10]]);
        let sampler = PatchSampler::new(&v, &m, [8, 8, 8]).unwrap();
        let mut r = rng::stream(2, "test", 0);
        for _ in 0..50 {
            let p = sampler.sample(&mut r, 1.0);
            assert_eq!(p.label.iter().filter(|&&l| l == 1).count(), 1);
        }
    }

    #[test]
    fn undersized_volume_is_padded() {
        let (v, m) = case([4, 8, 8], &[[0, 0, 0]]);
        let sampler = PatchSampler::new(&v, &m, [8, 8, 8]).unwrap();
        assert_eq!(sampler.padded_dims(), [8, 8, 8]);
        let p = sampler.extract([0, 0, 0]);
        // pad_low = 2 on x: padded x = 0,1 mirror source x = 2,1
        assert_eq!(p.image[0], 2.0);
        assert_eq!(p.image[1], 1.0);
        assert_eq!(p.image[2], 0.0);
        assert_eq!(p.label[0], 0);
        assert_eq!(p.label[2], 1);
        assert_eq!(p.image[7], 1.0);
    }

    #[test]
    fn deterministic_sequence() {
        let (v, m) = case([20, 20, 20], &[[5, 5, 5], [10, 12, 3]]);
        let spec = PatchSpec::new([8, 8, 8], 1, 2, 4).unwrap();
        let run = || {
            let mut r = rng::stream(99, "sampler", 0);
            (0..100)
                .map(|_| sample_training_patch(&v, &m, &spec, &mut r, 0.33).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn uniform_sampling_visits_all_origins() {
        let (v, m) = case([12, 11, 10], &[[3, 3, 3]]);
        let sampler = PatchSampler::new(&v, &m, [8, 8, 8]).unwrap();
        let max = sampler.max_origin();
        let mut seen = std::collections::HashSet::new();
        let mut r = rng::stream(5, "test", 0);
        for _ in 0..10_000 {
            let p = sampler.sample(&mut r, 0.0);
            seen.insert(p.image[0] as usize);
        }
        assert_eq!(seen.len(), (max[0] + 1) * (max[1] + 1) * (max[2] + 1));
    }

    #[test]
    fn tiling_examples() {
        let plan = tile_sliding_window([64, 64, 64], [64, 64, 64], 0.5);
        assert_eq!(plan.offsets, vec![[0, 0, 0]]);
        let plan = tile_sliding_window([288, 224, 192], [192, 224, 192], 0.5);
        assert_eq!(plan.offsets, vec![[0, 0, 0], [96, 0, 0]]);
        let plan = tile_sliding_window([10, 32, 5], [16, 16, 16], 0.5);
        assert_eq!(plan.padded_dims, [16, 32, 16]);
        assert_eq!(plan.pad_low, [3, 0, 5]);
        assert_eq!(plan.pad_high, [3, 0, 6]);
    }

    #[test]
    fn window_shape() {
        let w = gaussian_window([9, 7, 5], 0.125);
        let idx = |x: usize, y: usize, z: usize| x + 9 * (y + 7 * z);
        let argmax = (0..w.len())
            .max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap())
            .unwrap();
        assert_eq!(argmax, idx(4, 3, 2));
        for z in 0..5 {
            for y in 0..7 {
                for x in 0..9 {
                    assert_eq!(w[idx(x, y, z)], w[idx(8 - x, y, z)]);
                    assert_eq!(w[idx(x, y, z)], w[idx(x, 6 - y, z)]);
                    assert_eq!(w[idx(x, y, z)], w[idx(x, y, 4 - z)]);
                    assert!(w[idx(x, y, z)] > 0.0);
                }
            }
        }
    }

    #[test]
    fn window_ratio_matches_gaussian() {
        // sigma = 0.25 * 8 = 2; centre voxel (3,3,3) is 0.5 from the centre
        // on every axis, the corner 3.5.
        let w = gaussian_window([8, 8, 8], 0.25);
        let expected = ((3.0 * 3.5f64 * 3.5 - 3.0 * 0.25) / (2.0 * 4.0)).exp();
        let ratio = w[3 + 8 * (3 + 8 * 3)] / w[0];
        assert!(
            (ratio / expected - 1.0).abs() < 1e-9,
            "{ratio} vs {expected}"
        );

        // sigma = 1: the corner falls below the floor and is clamped.
        let w = gaussian_window([8, 8, 8], 0.125);
        assert_eq!(w[0], 1e-6);
        let centre = w[3 + 8 * (3 + 8 * 3)];
        assert!((centre - 1.0).abs() < 1e-12);
        let edge = w[8 * (3 + 8 * 3)];
        let expected = ((3.5f64 * 3.5 - 0.25) / 2.0).exp();
        assert!((centre / edge / expected - 1.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tiles_cover_every_voxel(
            dims in prop::array::uniform3(1usize..40),
            patch in prop::array::uniform3(1usize..24),
            overlap in 0.0f64..0.95,
        ) {
            let plan = tile_sliding_window(dims, patch, overlap);
            let p = plan.padded_dims;
            let mut covered = vec![false; p[0] * p[1] * p[2]];
            for o in &plan.offsets {
                for d in 0..3 {
                    prop_assert!(o[d] + patch[d] <= p[d]);
                }
                for z in o[2]..o[2] + patch[2] {
                    for y in o[1]..o[1] + patch[1] {
                        for x in o[0]..o[0] + patch[0] {
                            covered[x + p[0] * (y + p[1] * z)] = true;
                        }
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            for d in 0..3 {
                prop_assert_eq!(plan.pad_low[d] + plan.pad_high[d] + dims[d], p[d]);
            }
        }
    }
}
