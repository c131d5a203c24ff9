//! Geometry-aware volumetric containers.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Grids are axis-aligned; physical position of
//! voxel `i` along axis `d` is `origin[d] + i * spacing[d]` (mm).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when pairing image and label geometries.
pub const SPACING_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::Geometry(format!(
                "dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be positive and finite, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!(
                "origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// True when dims agree exactly and spacings agree within
    /// [`SPACING_REL_TOL`] relative. Symmetric in its arguments.
    pub fn matches(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(&a, &b)| (a - b).abs() <= SPACING_REL_TOL * a.abs().max(b.abs()))
    }

    pub fn ensure_matches(&self, other: &Geometry) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "dims {:?} / spacing {:?} vs dims {:?} / spacing {:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// A scalar image on a [`Geometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Shape(format!(
                "voxel count {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Volume3 { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Result<Self> {
        Self::new(geom, vec![value; geom.len()])
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..geom.dims[2] {
            for y in 0..geom.dims[1] {
                for x in 0..geom.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(geom, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// A binary mask on a [`Geometry`]; every voxel is 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    geom: Geometry,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Shape(format!(
                "voxel count {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryLabel {
                index,
                value: data[index] as f64,
            });
        }
        Ok(LabelMask { geom, data })
    }

    pub fn empty(geom: Geometry) -> Result<Self> {
        Self::new(geom, vec![0; geom.len()])
    }

    /// Builds a mask from the listed foreground voxels.
    pub fn from_voxels(geom: Geometry, voxels: &[[usize; 3]]) -> Result<Self> {
        let mut data = vec![0u8; geom.len()];
        for v in voxels {
            if (0..3).any(|d| v[d] >= geom.dims[d]) {
                return Err(Error::Geometry(format!(
                    "voxel {v:?} outside dims {:?}",
                    geom.dims
                )));
            }
            data[geom.index(v[0], v[1], v[2])] = 1;
        }
        Self::new(geom, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&v| v == 1)
    }

    /// Foreground volume in mm³.
    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.geom.voxel_volume()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> char {
        ['x', 'y', 'z'][self.index()]
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::Config(format!("unknown axis '{other}'"))),
        }
    }
}
