//! Central finite differences on the toy network with the leaky-ReLU
//! branches frozen.

use aneuseg_core::loss_grad::{backward, one_hot};
use aneuseg_core::net::{
    forward_recording_pattern, forward_with_pattern, init_params, ActivationPattern, NetParams,
    Real, Tensor5, UNetConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Problem {
    pub cfg: UNetConfig,
    pub input: Tensor5<f64>,
    pub labels: Vec<u8>,
    pub dims: [usize; 3],
    pub batch: usize,
}

pub fn problem(seed: u64) -> Problem {
    problem_with(seed, 2)
}

pub fn problem_with(seed: u64, batch: usize) -> Problem {
    let dims = [16, 16, 16];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16 * 16 * 16;
    let mut input = Tensor5::zeros(batch, 1, dims);
    let mut labels = vec![0u8; batch * n];
    for b in 0..batch {
        let c = [
            rng.random_range(5.0..11.0),
            rng.random_range(5.0..11.0),
            rng.random_range(5.0..11.0),
        ];
        let r: f64 = rng.random_range(2.0..4.0);
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let i = x + 16 * (y + 16 * z);
                    let d2 = (x as f64 - c[0]).powi(2)
                        + (y as f64 - c[1]).powi(2)
                        + (z as f64 - c[2]).powi(2);
                    let fg = d2 <= r * r;
                    labels[b * n + i] = fg as u8;
                    input.data[b * n + i] =
                        rng.random_range(-1.0..1.0) + if fg { 2.0 } else { 0.0 };
                }
            }
        }
    }
    Problem {
        cfg: UNetConfig::toy(2, 2),
        input,
        labels,
        dims,
        batch,
    }
}

/// Logits with the leaky-ReLU branches frozen at the probe point. The true
/// loss is only piecewise smooth; a central difference straddling a kink
/// measures a secant, not the derivative.
pub fn logits64(p: &NetParams<f64>, pr: &Problem, pattern: &ActivationPattern) -> Tensor5<f64> {
    forward_with_pattern(p, &pr.cfg, &pr.input, pattern).unwrap()
}

/// `L(plus) - L(minus)` for the batch Dice + CE loss, assembled from
/// per-voxel differences so that rounding of the two totals does not swamp
/// a difference of order `h * |grad|`.
pub fn loss_difference(plus: &Tensor5<f64>, minus: &Tensor5<f64>, labels: &[u8]) -> f64 {
    let n = plus.voxels();
    let total = (plus.batch * n) as f64;
    let eps = 1e-5;
    let sig = |u: f64| 1.0 / (1.0 + (-u).exp());
    let (mut d_ce, mut d_inter, mut d_sum_p) = (0.0, 0.0, 0.0);
    let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
    for b in 0..plus.batch {
        let (zp0, zp1) = (plus.channel(b, 0), plus.channel(b, 1));
        let (zm0, zm1) = (minus.channel(b, 0), minus.channel(b, 1));
        for i in 0..n {
            let g = labels[b * n + i] as f64;
            let pm = sig(zm1[i] - zm0[i]);
            let (dz0, dz1) = (zp0[i] - zm0[i], zp1[i] - zm1[i]);
            // lse(z+) - lse(z-) = ln(sum_k softmax(z-)_k exp(dz_k))
            let dlse = ((1.0 - pm) * dz0.exp_m1() + pm * dz1.exp_m1()).ln_1p();
            d_ce += dlse - if g == 1.0 { dz1 } else { dz0 };
            let dp = sig(zp1[i] - zp0[i]) - pm;
            assert!(pm > 1e-10 && pm < 1.0 - 1e-10, "probability near the clamp");
            d_inter += dp * g;
            d_sum_p += dp;
            inter += pm * g;
            sum_p += pm;
            sum_g += g;
        }
    }
    let (a, bb) = (2.0 * inter + eps, sum_p + sum_g + eps);
    let (da, db) = (2.0 * d_inter, d_sum_p);
    let d_dice = -(da * bb - a * db) / ((bb + db) * bb);
    d_ce / total + d_dice
}

/// Max relative error over `probes` randomly chosen parameters.
pub fn fd_check<T: Real>(seed: u64, h: f64, probes: usize) -> f64 {
    let pr = problem_with(seed, 1);
    let p32 = init_params::<f32>(&pr.cfg, seed).unwrap();
    let params: NetParams<T> = p32.cast();
    let input: Tensor5<T> = pr.input.cast();
    let target = one_hot::<T>(&pr.labels, pr.batch, pr.dims).unwrap();
    let (_, grads) = backward(&params, &pr.cfg, &input, &target).unwrap();
    let oracle: NetParams<f64> = params.cast();
    let (_, pattern) = forward_recording_pattern(&oracle, &pr.cfg, &pr.input).unwrap();
    let sizes: Vec<usize> = oracle.tensors.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut k = rng.random_range(0..total);
        let mut t = 0;
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        let mut plus = oracle.clone();
        plus.tensors[t][k] += h;
        let mut minus = oracle.clone();
        minus.tensors[t][k] -= h;
        let zp = logits64(&plus, &pr, &pattern);
        let zm = logits64(&minus, &pr, &pattern);
        let fd = loss_difference(&zp, &zm, &pr.labels) / (2.0 * h);
        let an = grads[t][k].as_f64();
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    worst
}
