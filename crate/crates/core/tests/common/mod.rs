//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

pub mod fd;

use std::collections::BTreeSet;

use aneuseg_core::{Geometry, LabelMask};
use rand::Rng;

pub type Voxel = [i64; 3];

pub fn voxel_set(mask: &LabelMask) -> BTreeSet<Voxel> {
    let [nx, ny, nz] = mask.dims();
    let mut out = BTreeSet::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) == 1 {
                    out.insert([x as i64, y as i64, z as i64]);
                }
            }
        }
    }
    out
}

/// Jaccard, Dice, precision and recall from set operations. Both empty:
/// all 1. One side empty: the score whose denominator is that side's size
/// is 1, the rest 0.
pub fn overlap_oracle(pred: &LabelMask, reference: &LabelMask) -> [f64; 4] {
    let p = voxel_set(pred);
    let r = voxel_set(reference);
    match (p.is_empty(), r.is_empty()) {
        (true, true) => return [1.0; 4],
        (true, false) => return [0.0, 0.0, 1.0, 0.0],
        (false, true) => return [0.0, 0.0, 0.0, 1.0],
        _ => {}
    }
    let inter = p.intersection(&r).count() as f64;
    let union = p.union(&r).count() as f64;
    [
        inter / union,
        2.0 * inter / (p.len() + r.len()) as f64,
        inter / p.len() as f64,
        inter / r.len() as f64,
    ]
}

/// Foreground voxels with a 6-neighbour outside the set (out of the grid
/// included), in millimetres.
pub fn surface_oracle(mask: &LabelMask) -> Vec<[f64; 3]> {
    let set = voxel_set(mask);
    let s = mask.geometry().spacing;
    let steps: [Voxel; 6] = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    set.iter()
        .filter(|v| {
            steps
                .iter()
                .any(|d| !set.contains(&[v[0] + d[0], v[1] + d[1], v[2] + d[2]]))
        })
        .map(|v| [v[0] as f64 * s[0], v[1] as f64 * s[1], v[2] as f64 * s[2]])
        .collect()
}

/// All-pairs symmetric Hausdorff distance and mean surface distance.
pub fn distance_oracle(pred: &LabelMask, reference: &LabelMask) -> Option<(f64, f64)> {
    let a = surface_oracle(pred);
    let b = surface_oracle(reference);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let ab: Vec<f64> = a.iter().map(|p| nearest(p, &b)).collect();
    let ba: Vec<f64> = b.iter().map(|p| nearest(p, &a)).collect();
    let hd = ab.iter().chain(&ba).copied().fold(0.0, f64::max);
    let mean = ab.iter().chain(&ba).sum::<f64>() / (ab.len() + ba.len()) as f64;
    Some((hd, mean))
}

pub fn random_mask(rng: &mut impl Rng, geom: Geometry, density: f64) -> LabelMask {
    let data = (0..geom.len())
        .map(|_| rng.random_bool(density) as u8)
        .collect();
    LabelMask::new(geom, data).unwrap()
}

/// Hand-built pairs on an 8x8x8 grid: empty masks, single voxels, full
/// and boundary-touching masks.
pub fn edge_cases() -> Vec<(String, LabelMask, LabelMask)> {
    let g = Geometry::new([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
    let m = |v: &[[usize; 3]]| LabelMask::from_voxels(g, v).unwrap();
    let empty = m(&[]);
    let full = LabelMask::new(g, vec![1; 512]).unwrap();
    let block = |lo: usize, hi: usize| {
        let mut v = Vec::new();
        for z in lo..hi {
            for y in lo..hi {
                for x in lo..hi {
                    v.push([x, y, z]);
                }
            }
        }
        m(&v)
    };
    let face = |axis: usize, at: usize| {
        let mut v = Vec::new();
        for a in 0..8 {
            for b in 0..8 {
                let mut p = [a, b, 0];
                p.rotate_right(2 - axis);
                p[axis] = at;
                v.push(p);
            }
        }
        m(&v)
    };
    let cases = vec![
        ("empty/empty", empty.clone(), empty.clone()),
        ("empty/single", empty.clone(), m(&[[3, 3, 3]])),
        ("single/empty", m(&[[3, 3, 3]]), empty.clone()),
        ("empty/full", empty.clone(), full.clone()),
        ("single/same", m(&[[4, 2, 6]]), m(&[[4, 2, 6]])),
        ("single/neighbour", m(&[[4, 2, 6]]), m(&[[5, 2, 6]])),
        ("single/far corners", m(&[[0, 0, 0]]), m(&[[7, 7, 7]])),
        ("corner/corner", m(&[[0, 0, 0]]), m(&[[0, 0, 0]])),
        ("full/full", full.clone(), full.clone()),
        ("full/single", full.clone(), m(&[[3, 4, 5]])),
        ("full/inner block", full.clone(), block(2, 6)),
        ("block/shifted block", block(0, 4), block(1, 5)),
        ("block touching low faces", block(0, 3), block(0, 2)),
        ("block touching high faces", block(5, 8), block(6, 8)),
        ("x faces", face(0, 0), face(0, 7)),
        ("y faces", face(1, 0), face(1, 7)),
        ("z face/same", face(2, 7), face(2, 7)),
        ("face/block", face(2, 0), block(0, 8)),
        (
            "disjoint singles at boundary",
            m(&[[7, 0, 0]]),
            m(&[[0, 7, 0]]),
        ),
        (
            "two voxels/one",
            m(&[[1, 1, 1], [6, 6, 6]]),
            m(&[[1, 1, 1]]),
        ),
    ];
    cases
        .into_iter()
        .map(|(n, a, b)| (n.to_string(), a, b))
        .collect()
}

/// Per-fold rows of the reference five-fold cross-validation table: Jaccard, Dice,
/// Precision, Recall.
pub const REFERENCE_FOLD_ROWS: [[f64; 4]; 5] = [
    [0.7901, 0.8737, 0.8970, 0.8742],
    [0.8335, 0.9034, 0.9046, 0.9173],
    [0.7966, 0.8805, 0.8611, 0.9163],
    [0.7718, 0.8470, 0.8661, 0.8904],
    [0.8638, 0.9256, 0.9384, 0.9197],
];
pub const REFERENCE_AVG_ROW: [f64; 4] = [0.8112, 0.8861, 0.8934, 0.9036];
