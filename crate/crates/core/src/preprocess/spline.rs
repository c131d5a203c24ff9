//! Separable interpolation kernels on mirror-extended grids.
//!
//! Order 3 is the cubic B-spline: samples are first converted to spline
//! coefficients with the recursive interpolation prefilter so that
//! evaluating at a grid point reproduces the sample exactly.

/// Mirror (whole-sample symmetric) extension: `-1 -> 1`, `n -> n - 2`.
#[inline]
pub fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

/// Converts a line of samples to cubic B-spline coefficients in place.
pub fn prefilter_line(line: &mut [f64]) {
    let n = line.len();
    if n < 2 {
        return;
    }
    let z = POLE;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    for v in line.iter_mut() {
        *v *= gain;
    }

    // causal initialisation over one full mirror period
    let period = 2 * (n - 1);
    let mut zk = 1.0;
    let mut sum = 0.0;
    for k in 0..period {
        sum += zk * line[mirror(k as isize, n)];
        zk *= z;
        if zk.abs() < 1e-18 {
            break;
        }
    }
    let z_period = z.powi(period as i32);
    line[0] = sum / (1.0 - z_period);
    for k in 1..n {
        line[k] += z * line[k - 1];
    }

    line[n - 1] = (z / (z * z - 1.0)) * (line[n - 1] + z * line[n - 2]);
    for k in (0..n - 1).rev() {
        line[k] = z * (line[k + 1] - line[k]);
    }
}

/// Taps (mirrored source indices and weights) for one output coordinate.
#[derive(Debug, Clone)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub len: usize,
}

/// Interpolation taps at continuous source coordinate `u` for a line of
/// length `n`, for order 0, 1 or 3.
pub fn taps(u: f64, n: usize, order: u8) -> Taps {
    let mut t = Taps {
        index: [0; 4],
        weight: [0.0; 4],
        len: 0,
    };
    match order {
        0 => {
            t.index[0] = mirror((u + 0.5).floor() as isize, n);
            t.weight[0] = 1.0;
            t.len = 1;
        }
        1 => {
            let i = u.floor();
            let f = u - i;
            let i = i as isize;
            t.index[0] = mirror(i, n);
            t.index[1] = mirror(i + 1, n);
            t.weight = [1.0 - f, f, 0.0, 0.0];
            t.len = 2;
        }
        3 => {
            let i = u.floor();
            let f = u - i;
            let i = i as isize;
            let f2 = f * f;
            let f3 = f2 * f;
            let omf = 1.0 - f;
            t.weight = [
                omf * omf * omf / 6.0,
                (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
                (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
                f3 / 6.0,
            ];
            for k in 0..4 {
                t.index[k] = mirror(i - 1 + k as isize, n);
            }
            t.len = 4;
        }
        _ => unreachable!("interpolation order is validated by the caller"),
    }
    t
}

/// Applies `f` to every line along `axis` of an x-fastest grid.
pub fn for_each_line(
    data: &mut [f64],
    dims: [usize; 3],
    axis: usize,
    mut f: impl FnMut(&mut [f64]),
) {
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut line = vec![0.0; n];
    let (o1, o2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for b in 0..dims[o2] {
        for a in 0..dims[o1] {
            let mut p = [0usize; 3];
            p[o1] = a;
            p[o2] = b;
            let base = p[0] + dims[0] * (p[1] + dims[1] * p[2]);
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[base + k * stride];
            }
            f(&mut line);
            for (k, v) in line.iter().enumerate() {
                data[base + k * stride] = *v;
            }
        }
    }
}

/// Resamples along one axis: output line `j` samples the source at
/// `coords[j]`.
pub fn resample_axis(
    src: &[f64],
    dims: [usize; 3],
    axis: usize,
    coords: &[f64],
    order: u8,
) -> Vec<f64> {
    let n = dims[axis];
    let mut out_dims = dims;
    out_dims[axis] = coords.len();
    let all_taps: Vec<Taps> = coords.iter().map(|&u| taps(u, n, order)).collect();
    let mut out = vec![0.0; out_dims.iter().product()];
    let (nx, ny) = (dims[0], dims[1]);
    let (ox, oy) = (out_dims[0], out_dims[1]);
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let (j, mut p) = match axis {
                    0 => (x, [0, y, z]),
                    1 => (y, [x, 0, z]),
                    _ => (z, [x, y, 0]),
                };
                let t = &all_taps[j];
                let mut acc = 0.0;
                for k in 0..t.len {
                    p[axis] = t.index[k];
                    acc += t.weight[k] * src[p[0] + nx * (p[1] + ny * p[2])];
                }
                out[x + ox * (y + oy * z)] = acc;
            }
        }
    }
    out
}
