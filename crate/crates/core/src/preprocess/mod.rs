//! Spacing normalisation and intensity standardisation.
//!
//! Images are resampled to a common isotropic spacing (cubic B-spline by
//! default), labels with nearest neighbour, and intensities are z-scored
//! over the whole volume with the population standard deviation.

pub mod spline;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMask, Volume3};

/// Interpolation order; serialised as the integer 0, 1 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum InterpOrder {
    Nearest,
    Linear,
    Cubic,
}

impl InterpOrder {
    pub fn as_u8(self) -> u8 {
        match self {
            InterpOrder::Nearest => 0,
            InterpOrder::Linear => 1,
            InterpOrder::Cubic => 3,
        }
    }
}

impl TryFrom<u8> for InterpOrder {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(InterpOrder::Nearest),
            1 => Ok(InterpOrder::Linear),
            3 => Ok(InterpOrder::Cubic),
            other => Err(format!(
                "interpolation order must be 0, 1 or 3, got {other}"
            )),
        }
    }
}

impl JsonSchema for InterpOrder {
    fn schema_name() -> std::borrow::Cow<'static, str> {
        "InterpOrder".into()
    }

    fn json_schema(_: &mut schemars::SchemaGenerator) -> schemars::Schema {
        schemars::json_schema!({ "type": "integer", "enum": [0, 1, 3] })
    }
}

impl From<InterpOrder> for u8 {
    fn from(o: InterpOrder) -> u8 {
        o.as_u8()
    }
}

pub const DEFAULT_TARGET_SPACING: [f64; 3] = [0.5429, 0.5429, 0.5429];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    pub image_order: InterpOrder,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: DEFAULT_TARGET_SPACING,
            image_order: InterpOrder::Cubic,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self
            .target_spacing
            .iter()
            .any(|&s| !(s.is_finite() && s > 0.0))
        {
            return Err(Error::Config(format!(
                "target spacing must be positive, got {:?}",
                self.target_spacing
            )));
        }
        Ok(())
    }
}

/// A resampled result plus the axes whose size rounded to zero and was
/// clamped to one voxel.
#[derive(Debug, Clone)]
pub struct Resampled<T> {
    pub output: T,
    pub clamped_axes: Vec<usize>,
}

/// Output grid for resampling `src` to `target_spacing`: sizes are
/// `round(n * s / t)` (at least 1) and the field of view stays centred.
pub fn target_geometry(src: &Geometry, target_spacing: [f64; 3]) -> (Geometry, Vec<usize>) {
    let mut dims = [0usize; 3];
    let mut origin = [0f64; 3];
    let mut clamped = Vec::new();
    for d in 0..3 {
        let n = (src.dims[d] as f64 * src.spacing[d] / target_spacing[d]).round() as usize;
        if n == 0 {
            clamped.push(d);
        }
        dims[d] = n.max(1);
        let src_extent = (src.dims[d] - 1) as f64 * src.spacing[d];
        let dst_extent = (dims[d] - 1) as f64 * target_spacing[d];
        origin[d] = src.origin[d] + 0.5 * (src_extent - dst_extent);
    }
    (
        Geometry {
            dims,
            spacing: target_spacing,
            origin,
        },
        clamped,
    )
}

/// Source-grid coordinates of the target grid's voxel centres along `d`.
fn axis_coords(src: &Geometry, dst: &Geometry, d: usize) -> Vec<f64> {
    (0..dst.dims[d])
        .map(|j| {
            let p = dst.origin[d] + j as f64 * dst.spacing[d];
            (p - src.origin[d]) / src.spacing[d]
        })
        .collect()
}

/// Samples `values` (laid out on `src`) at the voxel centres of `dst`.
pub fn resample_values(
    values: &[f64],
    src: &Geometry,
    dst: &Geometry,
    order: InterpOrder,
) -> Vec<f64> {
    let mut data = values.to_vec();
    let order = order.as_u8();
    if order == 3 {
        for axis in 0..3 {
            spline::for_each_line(&mut data, src.dims, axis, spline::prefilter_line);
        }
    }
    let mut dims = src.dims;
    for axis in 0..3 {
        let coords = axis_coords(src, dst, axis);
        data = spline::resample_axis(&data, dims, axis, &coords, order);
        dims[axis] = dst.dims[axis];
    }
    data
}

pub fn resample_to_geometry(vol: &Volume3, dst: &Geometry, order: InterpOrder) -> Result<Volume3> {
    let values: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let out = resample_values(&values, vol.geometry(), dst, order);
    Volume3::new(*dst, out.into_iter().map(|v| v as f32).collect())
}

pub fn mask_to_geometry(mask: &LabelMask, dst: &Geometry) -> Result<LabelMask> {
    let values: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    let out = resample_values(&values, mask.geometry(), dst, InterpOrder::Nearest);
    LabelMask::new(*dst, out.into_iter().map(|v| v as u8).collect())
}

pub fn resample_image(vol: &Volume3, cfg: &PreprocessConfig) -> Result<Resampled<Volume3>> {
    cfg.validate()?;
    let (dst, clamped_axes) = target_geometry(vol.geometry(), cfg.target_spacing);
    Ok(Resampled {
        output: resample_to_geometry(vol, &dst, cfg.image_order)?,
        clamped_axes,
    })
}

/// Nearest-neighbour resampling; output stays binary.
pub fn resample_mask(mask: &LabelMask, cfg: &PreprocessConfig) -> Result<Resampled<LabelMask>> {
    cfg.validate()?;
    let (dst, clamped_axes) = target_geometry(mask.geometry(), cfg.target_spacing);
    Ok(Resampled {
        output: mask_to_geometry(mask, &dst)?,
        clamped_axes,
    })
}

/// Mean and population standard deviation, accumulated in f64.
pub fn mean_std(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

pub fn znormalize(vol: &Volume3) -> Result<Volume3> {
    let (mean, std) = mean_std(vol.data());
    if !(std > 1e-8) {
        return Err(Error::ConstantVolume { std });
    }
    let data = vol
        .data()
        .iter()
        .map(|&v| ((v as f64 - mean) / std) as f32)
        .collect();
    Volume3::new(*vol.geometry(), data)
}

pub const PREPROCESSING_ORDER: &str = "resample to target spacing, then z-score normalize";

/// Resample, then z-score: the image path used for both training and
/// inference.
pub fn preprocess_image(vol: &Volume3, cfg: &PreprocessConfig) -> Result<Volume3> {
    znormalize(&resample_image(vol, cfg)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(spacing: f64, order: InterpOrder) -> PreprocessConfig {
        PreprocessConfig {
            target_spacing: [spacing; 3],
            image_order: order,
        }
    }

    #[test]
    fn constant_volume_preserved() {
        let g = Geometry::new([9, 7, 5], [0.7, 1.1, 2.0], [0.0; 3]).unwrap();
        let v = Volume3::filled(g, 3.25).unwrap();
        for order in [
            InterpOrder::Nearest,
            InterpOrder::Linear,
            InterpOrder::Cubic,
        ] {
            let out = resample_image(&v, &cfg(0.5429, order)).unwrap().output;
            assert_eq!(out.dims(), [12, 14, 18]);
            assert!(out.data().iter().all(|&x| (x - 3.25).abs() < 1e-6));
        }
    }

    #[test]
    fn identity_spacing() {
        let g = Geometry::new([6, 5, 4], [0.5; 3], [1.0, 2.0, 3.0]).unwrap();
        let v = Volume3::from_fn(g, |x, y, z| ((x * 31 + y * 17 + z * 7) % 11) as f32).unwrap();
        let out = resample_image(&v, &cfg(0.5, InterpOrder::Cubic))
            .unwrap()
            .output;
        assert_eq!(out.geometry(), v.geometry());
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let out = resample_image(&v, &cfg(0.5, InterpOrder::Nearest))
            .unwrap()
            .output;
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn linear_field_reproduced_in_interior() {
        let g = Geometry::new([32, 32, 32], [1.0; 3], [0.0; 3]).unwrap();
        let f = |p: [f64; 3]| p[0] + 2.0 * p[1] + 3.0 * p[2];
        let v = Volume3::from_fn(g, |x, y, z| f([x as f64, y as f64, z as f64]) as f32).unwrap();
        let out = resample_image(&v, &cfg(0.5429, InterpOrder::Cubic))
            .unwrap()
            .output;
        let og = *out.geometry();
        let mut checked = 0;
        for z in 0..og.dims[2] {
            for y in 0..og.dims[1] {
                for x in 0..og.dims[0] {
                    let p = [
                        og.origin[0] + x as f64 * og.spacing[0],
                        og.origin[1] + y as f64 * og.spacing[1],
                        og.origin[2] + z as f64 * og.spacing[2],
                    ];
                    if p.iter().all(|&c| (10.0..=21.0).contains(&c)) {
                        let got = out.get(x, y, z) as f64;
                        assert!((got - f(p)).abs() < 1e-4, "{got} vs {}", f(p));
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn degenerate_axis_is_clamped_and_reported() {
        let g = Geometry::new([4, 4, 1], [1.0, 1.0, 0.1], [0.0; 3]).unwrap();
        let v = Volume3::filled(g, 1.0).unwrap();
        let r = resample_image(&v, &cfg(1.0, InterpOrder::Linear)).unwrap();
        assert_eq!(r.output.dims(), [4, 4, 1]);
        assert_eq!(r.clamped_axes, vec![2]);
    }

    #[test]
    fn mask_nearest_neighbour() {
        let g = Geometry::new([5, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        let m = LabelMask::from_voxels(g, &[[2, 1, 3]]).unwrap();
        let same = resample_mask(&m, &cfg(1.0, InterpOrder::Cubic))
            .unwrap()
            .output;
        assert_eq!(same, m);

        let up = resample_mask(&m, &cfg(0.5, InterpOrder::Cubic))
            .unwrap()
            .output;
        assert_eq!(up.dims(), [10, 10, 10]);
        let og = *up.geometry();
        let fg: Vec<[usize; 3]> = (0..og.len())
            .filter(|&i| up.data()[i] == 1)
            .map(|i| og.coords(i))
            .collect();
        assert!(!fg.is_empty() && fg.len() <= 8);
        // physical centre of the source voxel falls inside the block
        let centre = [2.0, 1.0, 3.0];
        for d in 0..3 {
            let lo = fg.iter().map(|p| p[d]).min().unwrap() as f64 * 0.5 + og.origin[d];
            let hi = fg.iter().map(|p| p[d]).max().unwrap() as f64 * 0.5 + og.origin[d];
            assert!(lo - 0.25 <= centre[d] && centre[d] <= hi + 0.25);
        }

        let empty = LabelMask::empty(g).unwrap();
        let out = resample_mask(&empty, &cfg(0.7, InterpOrder::Cubic))
            .unwrap()
            .output;
        assert!(out.is_empty_mask());
        assert_eq!(out.dims(), [7, 7, 7]);
    }

    #[test]
    fn znormalize_examples() {
        let g = Geometry::unit([2, 1, 1]).unwrap();
        let v = Volume3::new(g, vec![0.0, 2.0]).unwrap();
        assert_eq!(znormalize(&v).unwrap().data(), &[-1.0, 1.0]);
        let c = Volume3::filled(g, 5.0).unwrap();
        assert!(matches!(znormalize(&c), Err(Error::ConstantVolume { .. })));
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3 {
        let g = Geometry::unit(dims).unwrap();
        let mut s = seed;
        Volume3::from_fn(g, |_, _, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64 * 10.0 - 3.0) as f32
        })
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn znormalize_targets_and_invariances(seed in any::<u64>(), a in 0.1f32..20.0, b in -50f32..50.0) {
            let v = random_volume([6, 5, 4], seed);
            let z = znormalize(&v).unwrap();
            let (m, s) = mean_std(z.data());
            prop_assert!(m.abs() <= 1e-5);
            prop_assert!((s - 1.0).abs() <= 1e-5);

            let zz = znormalize(&z).unwrap();
            for (p, q) in z.data().iter().zip(zz.data()) {
                prop_assert!((p - q).abs() <= 1e-5);
            }

            let affine = Volume3::new(*v.geometry(), v.data().iter().map(|&x| a * x + b).collect()).unwrap();
            let za = znormalize(&affine).unwrap();
            for (p, q) in z.data().iter().zip(za.data()) {
                prop_assert!((p - q).abs() <= 1e-4);
            }
        }

        #[test]
        fn smooth_fields_bounded_overshoot(
            fx in 0.05f64..0.3, fy in 0.05f64..0.3, fz in 0.05f64..0.3,
            phase in 0.0f64..6.28, target in 0.4f64..1.6,
        ) {
            let g = Geometry::unit([16, 14, 12]).unwrap();
            let v = Volume3::from_fn(g, |x, y, z| {
                ((x as f64 * fx + phase).sin() + (y as f64 * fy).cos() * (z as f64 * fz + 0.3).sin()) as f32
            }).unwrap();
            let (lo, hi) = v.min_max();
            let range = (hi - lo) as f64;
            let out = resample_image(&v, &cfg(target, InterpOrder::Cubic)).unwrap().output;
            let (olo, ohi) = out.min_max();
            prop_assert!((olo as f64) >= lo as f64 - 0.15 * range);
            prop_assert!((ohi as f64) <= hi as f64 + 0.15 * range);
        }

        #[test]
        fn mask_resampling_stays_binary(seed in any::<u64>(), target in 0.3f64..2.5) {
            let v = random_volume([7, 6, 5], seed);
            let m = LabelMask::new(*v.geometry(), v.data().iter().map(|&x| (x > 2.0) as u8).collect()).unwrap();
            let out = resample_mask(&m, &cfg(target, InterpOrder::Cubic)).unwrap().output;
            prop_assert!(out.data().iter().all(|&x| x <= 1));
        }
    }
}
