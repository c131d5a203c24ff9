//! Synthetic sphere phantoms: unit-variance Gaussian noise with one or
//! more bright spheres and their exact masks.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::volume::{Geometry, LabelMask, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub cases: usize,
    pub dims: [usize; 3],
    pub spacing: f64,
    /// Inclusive range of sphere counts per case.
    pub spheres: [usize; 2],
    /// Inclusive radius range in voxels.
    pub radius: [f64; 2],
    /// Added intensity inside spheres, in background standard deviations.
    pub contrast: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            cases: 20,
            dims: [64, 64, 64],
            spacing: 0.5,
            spheres: [1, 2],
            radius: [4.0, 10.0],
            contrast: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    /// Centre in voxel coordinates.
    pub centre: [f64; 3],
    /// Radius in voxels.
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub id: String,
    pub image: Volume3,
    pub mask: LabelMask,
    pub spheres: Vec<Sphere>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.radius;
        let fits = self.dims.iter().all(|&n| (n as f64) > 2.0 * hi + 1.0);
        if self.cases == 0
            || self.spheres[0] == 0
            || self.spheres[0] > self.spheres[1]
            || !(lo > 0.0 && lo <= hi)
            || !fits
            || !(self.spacing > 0.0)
        {
            return Err(Error::Config(format!(
                "invalid synthetic dataset config: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Case `index` of the dataset generated from `seed`; each case has its
/// own random stream.
pub fn generate_case(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SynthCase> {
    cfg.validate()?;
    let mut rng = stream(seed, "synth", index as u64);
    let count = rng.random_range(cfg.spheres[0]..=cfg.spheres[1]);
    let spheres: Vec<Sphere> = (0..count)
        .map(|_| {
            let radius = rng.random_range(cfg.radius[0]..=cfg.radius[1]);
            let centre = cfg
                .dims
                .map(|n| rng.random_range(radius..=(n as f64 - 1.0 - radius)));
            Sphere { centre, radius }
        })
        .collect();
    let geom = Geometry::new(cfg.dims, [cfg.spacing; 3], [0.0; 3])?;
    let n = geom.len();
    let mut mask = vec![0u8; n];
    let mut image = Vec::with_capacity(n);
    for i in 0..n {
        let [x, y, z] = geom.coords(i);
        let p = [x as f64, y as f64, z as f64];
        let inside = spheres.iter().any(|s| {
            let d2: f64 = (0..3).map(|a| (p[a] - s.centre[a]).powi(2)).sum();
            d2 <= s.radius * s.radius
        });
        mask[i] = inside as u8;
        let noise: f64 = StandardNormal.sample(&mut rng);
        image.push((noise + if inside { cfg.contrast } else { 0.0 }) as f32);
    }
    Ok(SynthCase {
        id: case_id(index),
        image: Volume3::new(geom, image)?,
        mask: LabelMask::new(geom, mask)?,
        spheres,
    })
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthCase>> {
    (0..cfg.cases)
        .map(|i| generate_case(cfg, seed, i))
        .collect()
}
