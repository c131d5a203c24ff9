//! Training-time augmentation of image/label patch pairs: rotation,
//! isotropic scaling, additive Gaussian noise and gamma correction.
//!
//! Spatial transforms map each output voxel back into the source patch
//! about its centre. The image is sampled trilinearly and the label by
//! nearest neighbour, both with mirrored boundaries. Rotation is
//! `Rz * Ry * Rx` (extrinsic, x first).

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch_plan::Patch;
use crate::preprocess::spline::mirror;
use crate::rng::Rng;
use crate::volume::Axis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    /// Per-axis angle range in degrees.
    pub angle_range_deg: [f64; 2],
    pub p_scale: f64,
    pub scale_range: [f64; 2],
    pub p_noise: f64,
    /// Noise standard deviation range, in z-scored intensity units.
    pub noise_sigma_range: [f64; 2],
    pub p_gamma: f64,
    pub gamma_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_rotate: 0.2,
            angle_range_deg: [-30.0, 30.0],
            p_scale: 0.2,
            scale_range: [0.7, 1.4],
            p_noise: 0.15,
            noise_sigma_range: [0.0, 0.1],
            p_gamma: 0.15,
            gamma_range: [0.7, 1.5],
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_rotate: 0.0,
            p_scale: 0.0,
            p_noise: 0.0,
            p_gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_rotate", self.p_rotate),
            ("p_scale", self.p_scale),
            ("p_noise", self.p_noise),
            ("p_gamma", self.p_gamma),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "augment.{name} must be in [0, 1], got {p}"
                )));
            }
        }
        // (name, range, smallest allowed lower bound, bound inclusive)
        let ranges = [
            (
                "angle_range_deg",
                self.angle_range_deg,
                f64::NEG_INFINITY,
                true,
            ),
            ("scale_range", self.scale_range, 0.0, false),
            ("noise_sigma_range", self.noise_sigma_range, 0.0, true),
            ("gamma_range", self.gamma_range, 0.0, false),
        ];
        for (name, [lo, hi], floor, inclusive) in ranges {
            let above = if inclusive { lo >= floor } else { lo > floor };
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && above) {
                return Err(Error::Config(format!(
                    "augment.{name} is not a valid range: [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of one spatial transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialParams {
    /// Rotation angles about x, y and z, in radians.
    pub angles: [f64; 3],
    pub scale: f64,
}

impl SpatialParams {
    pub const IDENTITY: SpatialParams = SpatialParams {
        angles: [0.0; 3],
        scale: 1.0,
    };
}

/// The draws made for one patch; `None` means the transform was skipped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentDraw {
    pub angles: Option<[f64; 3]>,
    pub scale: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub gamma: Option<f64>,
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

impl AugmentDraw {
    /// Draws in a fixed order: one coin per transform, each followed by
    /// that transform's parameters when it fires.
    pub fn sample(cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let mut d = AugmentDraw::default();
        if rng.random::<f64>() < cfg.p_rotate {
            let mut a = [0.0; 3];
            for v in a.iter_mut() {
                *v = uniform(rng, cfg.angle_range_deg).to_radians();
            }
            d.angles = Some(a);
        }
        if rng.random::<f64>() < cfg.p_scale {
            d.scale = Some(uniform(rng, cfg.scale_range));
        }
        if rng.random::<f64>() < cfg.p_noise {
            d.noise_sigma = Some(uniform(rng, cfg.noise_sigma_range));
        }
        if rng.random::<f64>() < cfg.p_gamma {
            d.gamma = Some(uniform(rng, cfg.gamma_range));
        }
        d
    }
}

/// `Rz * Ry * Rx`, row-major.
pub fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn check_patch(patch: &Patch) {
    let n: usize = patch.size.iter().product();
    assert!(
        patch.image.len() == n && patch.label.len() == n,
        "patch buffers do not match size {:?}",
        patch.size
    );
}

/// Rotates the content by `R` and scales it by `scale` about the patch
/// centre: output voxel `p` reads source `c + R^T (p - c) / scale`.
pub fn spatial_transform(patch: &Patch, params: &SpatialParams) -> Patch {
    check_patch(patch);
    let size = patch.size;
    let r = rotation_matrix(params.angles);
    let centre = size.map(|n| (n as f64 - 1.0) / 2.0);
    let idx = |x: usize, y: usize, z: usize| x + size[0] * (y + size[1] * z);
    let n: usize = size.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let d = [
                    x as f64 - centre[0],
                    y as f64 - centre[1],
                    z as f64 - centre[2],
                ];
                let mut src = [0.0; 3];
                for (a, s) in src.iter_mut().enumerate() {
                    // transpose: column `a` of R
                    let rot = r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2];
                    *s = centre[a] + rot / params.scale;
                }
                let near = [0, 1, 2].map(|a| mirror(src[a].round() as isize, size[a]));
                label.push(patch.label[idx(near[0], near[1], near[2])]);
                let lo = src.map(|s| s.floor());
                let f = [src[0] - lo[0], src[1] - lo[1], src[2] - lo[2]];
                let i0 = [0, 1, 2].map(|a| mirror(lo[a] as isize, size[a]));
                let i1 = [0, 1, 2].map(|a| mirror(lo[a] as isize + 1, size[a]));
                let mut v = 0.0f64;
                for (cz, wz) in [(i0[2], 1.0 - f[2]), (i1[2], f[2])] {
                    for (cy, wy) in [(i0[1], 1.0 - f[1]), (i1[1], f[1])] {
                        for (cx, wx) in [(i0[0], 1.0 - f[0]), (i1[0], f[0])] {
                            v += wx * wy * wz * patch.image[idx(cx, cy, cz)] as f64;
                        }
                    }
                }
                image.push(v as f32);
            }
        }
    }
    Patch { size, image, label }
}

/// Adds i.i.d. `N(0, sigma^2)` to every image voxel.
pub fn add_noise(image: &mut [f32], sigma: f64, rng: &mut Rng) {
    let normal = Normal::new(0.0, sigma).expect("noise sigma must be finite and >= 0");
    for v in image.iter_mut() {
        *v = (*v as f64 + normal.sample(rng)) as f32;
    }
}

/// Min-max normalise, raise to `gamma`, restore the original range. A
/// constant image is left unchanged.
pub fn gamma_correct(image: &mut [f32], gamma: f64) {
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let (lo, hi) = (lo as f64, hi as f64);
    let range = hi - lo;
    if !(range > 0.0) {
        return;
    }
    for v in image.iter_mut() {
        let t = ((*v as f64 - lo) / range).clamp(0.0, 1.0);
        *v = (lo + t.powf(gamma) * range) as f32;
    }
}

/// Applies each augmentation independently with its probability. The
/// label is only touched by the spatial transforms.
///
/// Panics if the image or label buffer does not match `patch.size`.
pub fn augment_pair(patch: &Patch, cfg: &AugmentConfig, rng: &mut Rng) -> Patch {
    check_patch(patch);
    let draw = AugmentDraw::sample(cfg, rng);
    apply_draw(patch, &draw, rng)
}

/// Applies a given draw; `rng` is only consumed by the noise.
pub fn apply_draw(patch: &Patch, draw: &AugmentDraw, rng: &mut Rng) -> Patch {
    let mut out = if draw.angles.is_some() || draw.scale.is_some() {
        let params = SpatialParams {
            angles: draw.angles.unwrap_or([0.0; 3]),
            scale: draw.scale.unwrap_or(1.0),
        };
        spatial_transform(patch, &params)
    } else {
        patch.clone()
    };
    if let Some(sigma) = draw.noise_sigma {
        add_noise(&mut out.image, sigma, rng);
    }
    if let Some(gamma) = draw.gamma {
        gamma_correct(&mut out.image, gamma);
    }
    out
}

/// Exact rotation by `quarter_turns * 90` degrees about `axis`, matching
/// the sense of [`rotation_matrix`]. The rotation plane must be square.
pub fn rotate90_exact<T: Copy>(
    data: &[T],
    size: [usize; 3],
    axis: Axis,
    quarter_turns: i32,
) -> Result<Vec<T>> {
    let n: usize = size.iter().product();
    if data.len() != n {
        return Err(Error::Shape(format!(
            "buffer of {} values for size {size:?}",
            data.len()
        )));
    }
    // (u, v) is the rotation plane with u -> v as the positive sense
    let (u, v) = match axis {
        Axis::X => (1, 2),
        Axis::Y => (2, 0),
        Axis::Z => (0, 1),
    };
    if size[u] != size[v] {
        return Err(Error::Shape(format!(
            "rotation about {} needs a square plane, got {} x {}",
            axis.name(),
            size[u],
            size[v]
        )));
    }
    let m = size[u] - 1;
    let turns = quarter_turns.rem_euclid(4);
    let idx = |p: [usize; 3]| p[0] + size[0] * (p[1] + size[1] * p[2]);
    let mut out = Vec::with_capacity(n);
    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let p = [x, y, z];
                // source = R^{-turns} p on the integer grid
                let mut s = p;
                for _ in 0..turns {
                    let (a, b) = (s[u], s[v]);
                    s[u] = b;
                    s[v] = m - a;
                }
                out.push(data[idx(s)]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::f64::consts::FRAC_PI_2;

    fn ramp_patch(size: [usize; 3]) -> Patch {
        let n: usize = size.iter().product();
        Patch {
            size,
            image: (0..n).map(|i| ((i * 37) % 101) as f32 / 10.0).collect(),
            label: (0..n).map(|i| ((i * 13) % 7 == 0) as u8).collect(),
        }
    }

    #[test]
    fn disabled_is_identity() {
        let p = ramp_patch([8, 6, 5]);
        let mut rng = stream(1, "augment", 0);
        for _ in 0..20 {
            assert_eq!(augment_pair(&p, &AugmentConfig::disabled(), &mut rng), p);
        }
    }

    #[test]
    fn unit_gamma_is_identity() {
        let p = ramp_patch([6, 6, 6]);
        let mut img = p.image.clone();
        gamma_correct(&mut img, 1.0);
        for (a, b) in img.iter().zip(&p.image) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_keeps_range() {
        let p = ramp_patch([6, 6, 6]);
        let mut img = p.image.clone();
        gamma_correct(&mut img, 1.5);
        let lo = img.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = img.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 10.0));
        assert_ne!(img, p.image);
    }

    #[test]
    fn noise_statistics() {
        let n = 32 * 32 * 32;
        let p = Patch {
            size: [32; 3],
            image: vec![0.25; n],
            label: vec![0; n],
        };
        let cfg = AugmentConfig {
            p_noise: 1.0,
            noise_sigma_range: [0.05, 0.05],
            ..AugmentConfig::disabled()
        };
        let out = augment_pair(&p, &cfg, &mut stream(3, "augment", 0));
        let diff: Vec<f64> = out.image.iter().map(|&v| v as f64 - 0.25).collect();
        let mean = diff.iter().sum::<f64>() / n as f64;
        let std = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((0.045..=0.055).contains(&std), "std {std}");
        assert_eq!(out.label, p.label);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let p = ramp_patch([5, 5, 5]);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let mut d = p.image.clone();
            for _ in 0..4 {
                d = rotate90_exact(&d, p.size, axis, 1).unwrap();
            }
            assert_eq!(d, p.image);
        }
    }

    #[test]
    fn quarter_turn_moves_marked_voxel() {
        let size = [4, 4, 4];
        let mut d = vec![0u8; 64];
        let at = |x: usize, y: usize, z: usize| x + 4 * (y + 4 * z);
        d[at(3, 0, 1)] = 1;
        // about z, x -> y: (x, y) = (3, 0) goes to (3, 3)
        let r = rotate90_exact(&d, size, Axis::Z, 1).unwrap();
        assert_eq!(r.iter().position(|&v| v == 1), Some(at(3, 3, 1)));
        // about x, y -> z: (y, z) = (0, 1) goes to (2, 0)
        let r = rotate90_exact(&d, size, Axis::X, 1).unwrap();
        assert_eq!(r.iter().position(|&v| v == 1), Some(at(3, 2, 0)));
        // about y, z -> x: (z, x) = (1, 3) goes to (0, 1)
        let r = rotate90_exact(&d, size, Axis::Y, 1).unwrap();
        assert_eq!(r.iter().position(|&v| v == 1), Some(at(1, 0, 0)));
    }

    #[test]
    fn rejects_non_square_plane() {
        let d = vec![0f32; 4 * 5 * 6];
        assert!(rotate90_exact(&d, [4, 5, 6], Axis::Z, 1).is_err());
        assert!(rotate90_exact(&d, [4, 5, 6], Axis::X, 2).is_err());
        assert!(rotate90_exact(&d, [4, 5, 6], Axis::Y, 3).is_err());
    }

    #[test]
    fn general_rotation_matches_exact_quarter_turn() {
        let size = [9, 9, 9];
        let p = ramp_patch(size);
        for (a, axis) in [Axis::X, Axis::Y, Axis::Z].into_iter().enumerate() {
            let mut angles = [0.0; 3];
            angles[a] = FRAC_PI_2;
            let got = spatial_transform(&p, &SpatialParams { angles, scale: 1.0 });
            let want = rotate90_exact(&p.image, size, axis, 1).unwrap();
            let want_l = rotate90_exact(&p.label, size, axis, 1).unwrap();
            for z in 1..8 {
                for y in 1..8 {
                    for x in 1..8 {
                        let i = x + 9 * (y + 9 * z);
                        assert!((got.image[i] - want[i]).abs() < 1e-5, "{axis:?} at {i}");
                        assert_eq!(got.label[i], want_l[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_transform_reproduces_patch() {
        let p = ramp_patch([6, 7, 8]);
        let out = spatial_transform(&p, &SpatialParams::IDENTITY);
        assert_eq!(out, p);
    }

    #[test]
    fn validate_rejects_bad_ranges() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = [
            AugmentConfig {
                p_rotate: 1.5,
                ..Default::default()
            },
            AugmentConfig {
                gamma_range: [0.0, 1.0],
                ..Default::default()
            },
            AugmentConfig {
                scale_range: [1.4, 0.7],
                ..Default::default()
            },
            AugmentConfig {
                noise_sigma_range: [-0.1, 0.1],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
