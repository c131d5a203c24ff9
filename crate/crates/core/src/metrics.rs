//! Overlap, surface-distance and cohort volume metrics.
//!
//! Overlap metrics come from the voxel counts TP, FP and FN. When both
//! masks are empty all four overlap scores are 1. Surfaces are foreground
//! voxels with at least one 6-neighbour in the background, the grid
//! boundary counting as background. Distances are Euclidean between voxel
//! centres scaled by the spacing.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Percentile taken of each directed distance list before the
    /// maximum; 100 gives the classical Hausdorff distance.
    pub hd_percentile: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            hd_percentile: 100.0,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hd_percentile > 0.0 && self.hd_percentile <= 100.0) {
            return Err(Error::Config(format!(
                "metrics.hd_percentile must be in (0, 100], got {}",
                self.hd_percentile
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub jaccard: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion_counts(pred: &LabelMask, reference: &LabelMask) -> Result<Counts> {
    pred.geometry().ensure_matches(reference.geometry())?;
    let mut c = Counts {
        tp: 0,
        fp: 0,
        fn_: 0,
    };
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        match (p, r) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Overlap {
    pub fn from_counts(c: Counts) -> Self {
        let Counts { tp, fp, fn_ } = c;
        Overlap {
            jaccard: ratio(tp, tp + fp + fn_),
            dice: ratio(2 * tp, 2 * tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    }
}

pub fn overlap_metrics(pred: &LabelMask, reference: &LabelMask) -> Result<Overlap> {
    Ok(Overlap::from_counts(confusion_counts(pred, reference)?))
}

/// Surface voxel centres in millimetres (relative to the grid origin).
pub fn surface_points(mask: &LabelMask) -> Vec<[f64; 3]> {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) == 0 {
                    continue;
                }
                let bg = |dx: isize, dy: isize, dz: isize| {
                    let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    a < 0
                        || b < 0
                        || c < 0
                        || a >= nx as isize
                        || b >= ny as isize
                        || c >= nz as isize
                        || mask.get(a as usize, b as usize, c as usize) == 0
                };
                let on_surface = bg(-1, 0, 0)
                    || bg(1, 0, 0)
                    || bg(0, -1, 0)
                    || bg(0, 1, 0)
                    || bg(0, 0, -1)
                    || bg(0, 0, 1);
                if on_surface {
                    out.push([
                        x as f64 * g.spacing[0],
                        y as f64 * g.spacing[1],
                        z as f64 * g.spacing[2],
                    ]);
                }
            }
        }
    }
    out
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// For each point of `from`, the distance to the nearest point of `to`.
pub fn directed_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hausdorff_mm: f64,
    pub mean_distance_mm: f64,
}

/// Nearest-rank percentile (`q` in (0, 100]); `q = 100` is the maximum.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty() && q > 0.0 && q <= 100.0);
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Symmetric Hausdorff distance at percentile `hd_percentile` (100 is
/// the classical maximum) and the mean over both directed distance lists.
pub fn surface_distances(
    pred: &LabelMask,
    reference: &LabelMask,
    hd_percentile: f64,
) -> Result<SurfaceDistances> {
    pred.geometry().ensure_matches(reference.geometry())?;
    if !(hd_percentile > 0.0 && hd_percentile <= 100.0) {
        return Err(Error::Config(format!(
            "hd_percentile must be in (0, 100], got {hd_percentile}"
        )));
    }
    if pred.is_empty_mask() || reference.is_empty_mask() {
        return Err(Error::Undefined(
            "surface distance needs two nonempty masks".into(),
        ));
    }
    let sp = surface_points(pred);
    let sr = surface_points(reference);
    let d_pr = directed_distances(&sp, &sr);
    let d_rp = directed_distances(&sr, &sp);
    let hausdorff = percentile(&d_pr, hd_percentile).max(percentile(&d_rp, hd_percentile));
    let total: f64 = d_pr.iter().chain(&d_rp).sum();
    Ok(SurfaceDistances {
        hausdorff_mm: hausdorff,
        mean_distance_mm: total / (d_pr.len() + d_rp.len()) as f64,
    })
}

/// Per-case metrics; distances are `None` when either mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub jaccard: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub hausdorff_mm: Option<f64>,
    pub mean_distance_mm: Option<f64>,
    pub vol_pred_mm3: f64,
    pub vol_ref_mm3: f64,
}

pub fn case_metrics(
    pred: &LabelMask,
    reference: &LabelMask,
    hd_percentile: f64,
) -> Result<CaseMetrics> {
    let o = overlap_metrics(pred, reference)?;
    let d = match surface_distances(pred, reference, hd_percentile) {
        Ok(d) => Some(d),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics {
        jaccard: o.jaccard,
        dice: o.dice,
        precision: o.precision,
        recall: o.recall,
        hausdorff_mm: d.map(|d| d.hausdorff_mm),
        mean_distance_mm: d.map(|d| d.mean_distance_mm),
        vol_pred_mm3: pred.volume_mm3(),
        vol_ref_mm3: reference.volume_mm3(),
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub const CONSTANT_VOLUMES: &str = "constant volumes";
pub const TOO_FEW_CASES: &str = "fewer than 2 cases";

/// Errors with [`Error::Undefined`] carrying [`CONSTANT_VOLUMES`] or
/// [`TOO_FEW_CASES`].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    assert_eq!(x.len(), y.len(), "Pearson inputs differ in length");
    if x.len() < 2 {
        return Err(Error::Undefined(TOO_FEW_CASES.into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Error::Undefined(CONSTANT_VOLUMES.into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub jaccard: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    /// Over cases where the distance is defined.
    pub hausdorff_mm: Option<f64>,
    pub mean_distance_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMetrics {
    pub volume_bias_mm3: f64,
    pub volume_pearson_r: Option<f64>,
    /// Why the correlation is undefined, when it is.
    pub pearson_undefined: Option<String>,
    pub means: MetricMeans,
    pub cases: usize,
}

pub fn metric_means(cases: &[CaseMetrics]) -> MetricMeans {
    MetricMeans {
        jaccard: mean(cases.iter().map(|c| c.jaccard)).unwrap_or(f64::NAN),
        dice: mean(cases.iter().map(|c| c.dice)).unwrap_or(f64::NAN),
        precision: mean(cases.iter().map(|c| c.precision)).unwrap_or(f64::NAN),
        recall: mean(cases.iter().map(|c| c.recall)).unwrap_or(f64::NAN),
        hausdorff_mm: mean(cases.iter().filter_map(|c| c.hausdorff_mm)),
        mean_distance_mm: mean(cases.iter().filter_map(|c| c.mean_distance_mm)),
    }
}

/// Signed mean volume difference (pred - ref) and the Pearson correlation
/// of the volumes.
pub fn volume_stats(cases: &[CaseMetrics]) -> Result<CohortMetrics> {
    if cases.is_empty() {
        return Err(Error::Undefined(
            "volume statistics of an empty cohort".into(),
        ));
    }
    let pred: Vec<f64> = cases.iter().map(|c| c.vol_pred_mm3).collect();
    let reference: Vec<f64> = cases.iter().map(|c| c.vol_ref_mm3).collect();
    let bias = pred.iter().zip(&reference).map(|(p, r)| p - r).sum::<f64>() / cases.len() as f64;
    let (r, why) = match pearson(&reference, &pred) {
        Ok(r) => (Some(r), None),
        Err(Error::Undefined(m)) => (None, Some(m)),
        Err(e) => return Err(e),
    };
    Ok(CohortMetrics {
        volume_bias_mm3: bias,
        volume_pearson_r: r,
        pearson_undefined: why,
        means: metric_means(cases),
        cases: cases.len(),
    })
}
