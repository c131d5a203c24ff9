//! Slice renders with the mask outline burned in, written as binary PGM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Axis, LabelMask, Volume3};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, `width * height` bytes.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// In-plane axes (columns, rows) for a slice orthogonal to `axis`.
fn plane_axes(axis: Axis) -> (usize, usize) {
    match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    }
}

/// Renders slice `index` orthogonal to `axis`. Intensities are min-max
/// scaled over the slice; mask voxels with a 4-neighbour outside the mask
/// (out-of-slice counts as outside) are drawn at 255.
pub fn render_overlay(
    vol: &Volume3,
    mask: &LabelMask,
    axis: Axis,
    index: usize,
) -> Result<GrayImage> {
    vol.geometry().ensure_matches(mask.geometry())?;
    let dims = vol.dims();
    let a = axis.index();
    if index >= dims[a] {
        return Err(Error::Geometry(format!(
            "slice index {index} out of range for axis {} (size {})",
            axis.name(),
            dims[a]
        )));
    }
    let (cu, cv) = plane_axes(axis);
    let (w, h) = (dims[cu], dims[cv]);
    let voxel = |u: usize, v: usize| {
        let mut p = [0usize; 3];
        p[a] = index;
        p[cu] = u;
        p[cv] = v;
        vol.geometry().index(p[0], p[1], p[2])
    };

    let mut intens = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let i = voxel(u, v);
            intens.push(vol.data()[i]);
            labels.push(mask.data()[i]);
        }
    }
    let (lo, hi) = intens
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| {
            (l.min(x), h.max(x))
        });
    let range = (hi - lo) as f64;
    let mut pixels: Vec<u8> = intens
        .iter()
        .map(|&x| {
            if range > 0.0 {
                (((x - lo) as f64 / range) * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();

    let inside = |u: isize, v: isize| {
        u >= 0
            && v >= 0
            && (u as usize) < w
            && (v as usize) < h
            && labels[v as usize * w + u as usize] == 1
    };
    for v in 0..h {
        for u in 0..w {
            if labels[v * w + u] == 0 {
                continue;
            }
            let (ui, vi) = (u as isize, v as isize);
            if !(inside(ui - 1, vi)
                && inside(ui + 1, vi)
                && inside(ui, vi - 1)
                && inside(ui, vi + 1))
            {
                pixels[v * w + u] = 255;
            }
        }
    }
    Ok(GrayImage {
        width: w,
        height: h,
        pixels,
    })
}
