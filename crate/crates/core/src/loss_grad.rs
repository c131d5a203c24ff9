//! Dice + cross-entropy loss, its gradient, and the Nesterov SGD update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::real::CompensatedSum;
use crate::net::{
    backward_from_logits, forward_train, softmax_channels, Grads, NetParams, Real, Tensor5,
    UNetConfig,
};

pub const DICE_EPSILON: f64 = 1e-5;
/// Lower clamp on the true-class probability inside the log.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce_term: f64,
    pub dice_term: f64,
    pub epsilon: f64,
}

/// Two-channel one-hot target (`[background, foreground]`) from binary labels
/// laid out `batch x X x Y x Z`.
pub fn one_hot<T: Real>(labels: &[u8], batch: usize, dims: [usize; 3]) -> Result<Tensor5<T>> {
    let n: usize = dims.iter().product();
    if labels.len() != batch * n {
        return Err(Error::Shape(format!(
            "expected {} labels, got {}",
            batch * n,
            labels.len()
        )));
    }
    let mut t = Tensor5::zeros(batch, 2, dims);
    for b in 0..batch {
        let lab = &labels[b * n..(b + 1) * n];
        let dst = t.sample_mut(b);
        for (i, &l) in lab.iter().enumerate() {
            match l {
                0 => dst[i] = T::one(),
                1 => dst[n + i] = T::one(),
                v => {
                    return Err(Error::NonBinaryLabel {
                        index: b * n + i,
                        value: v as f64,
                    })
                }
            }
        }
    }
    Ok(t)
}

fn check_target<T: Real>(logits: &Tensor5<T>, target: &Tensor5<T>) -> Result<()> {
    if logits.channels != 2 {
        return Err(Error::Shape(format!(
            "expected 2 logit channels, got {}",
            logits.channels
        )));
    }
    if (logits.batch, logits.channels, logits.dims) != (target.batch, target.channels, target.dims)
    {
        return Err(Error::Shape(format!(
            "logits {}x{}x{:?} vs target {}x{}x{:?}",
            logits.batch, logits.channels, logits.dims, target.batch, target.channels, target.dims
        )));
    }
    let n = target.voxels();
    for b in 0..target.batch {
        let (g0, g1) = (target.channel(b, 0), target.channel(b, 1));
        for i in 0..n {
            let (a, c) = (g0[i].as_f64(), g1[i].as_f64());
            if !((a == 0.0 || a == 1.0) && (c == 0.0 || c == 1.0) && a + c == 1.0) {
                return Err(Error::Shape(format!(
                    "target is not one-hot at sample {b}, voxel {i}: ({a}, {c})"
                )));
            }
        }
    }
    Ok(())
}

/// Logit gradients of the two loss terms, kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrads<T> {
    pub ce: Tensor5<T>,
    pub dice: Tensor5<T>,
}

/// Loss value and the gradient of each term with respect to the logits.
///
/// `CE = mean(-ln max(p_true, 1e-12))` over every voxel of the batch;
/// `Dice = 1 - (2 I + eps) / (S + eps)` with `I = sum p1 g1`,
/// `S = sum p1 + sum g1` over the whole batch, foreground channel only.
pub fn dice_ce_term_grads<T: Real>(
    logits: &Tensor5<T>,
    target: &Tensor5<T>,
) -> Result<(LossReport, TermGrads<T>)> {
    check_target(logits, target)?;
    let probs = softmax_channels(logits);
    let n = logits.voxels();
    let total_vox = (logits.batch * n) as f64;
    let eps = DICE_EPSILON;

    let mut ce = CompensatedSum::default();
    let (mut inter, mut sum_p) = (CompensatedSum::default(), CompensatedSum::default());
    let mut sum_g = 0.0;
    for b in 0..logits.batch {
        let (p1, g1) = (probs.channel(b, 1), target.channel(b, 1));
        let p0 = probs.channel(b, 0);
        for i in 0..n {
            let g = g1[i].as_f64();
            let pt = if g == 1.0 { p1[i] } else { p0[i] };
            ce.add(-pt.max(CE_CLAMP).ln());
            inter.add(p1[i] * g);
            sum_p.add(p1[i]);
            sum_g += g;
        }
    }
    let (inter, sum_p) = (inter.value(), sum_p.value());
    let ce_term = ce.value() / total_vox;
    let denom = sum_p + sum_g + eps;
    let numer = 2.0 * inter + eps;
    let dice_term = 1.0 - numer / denom;

    let mut d_ce = Tensor5::zeros(logits.batch, 2, logits.dims);
    let mut d_dice = Tensor5::zeros(logits.batch, 2, logits.dims);
    for b in 0..logits.batch {
        let (p0, p1) = (probs.channel(b, 0), probs.channel(b, 1));
        let g1 = target.channel(b, 1);
        let (dc, dd) = (d_ce.sample_mut(b), d_dice.sample_mut(b));
        for i in 0..n {
            let g = g1[i].as_f64();
            let pt = if g == 1.0 { p1[i] } else { p0[i] };
            // z1 derivatives; the z0 derivative of each term is the negative
            let c1 = if pt > CE_CLAMP {
                (p1[i] - g) / total_vox
            } else {
                0.0
            };
            let d1 = -(2.0 * g * denom - numer) / (denom * denom) * p1[i] * p0[i];
            dc[i] = T::of(-c1);
            dc[n + i] = T::of(c1);
            dd[i] = T::of(-d1);
            dd[n + i] = T::of(d1);
        }
    }
    let report = LossReport {
        total: ce_term + dice_term,
        ce_term,
        dice_term,
        epsilon: eps,
    };
    Ok((
        report,
        TermGrads {
            ce: d_ce,
            dice: d_dice,
        },
    ))
}

/// Loss value and the gradient of the total with respect to the logits.
pub fn dice_ce_grad<T: Real>(
    logits: &Tensor5<T>,
    target: &Tensor5<T>,
) -> Result<(LossReport, Tensor5<T>)> {
    let (report, TermGrads { ce: mut grad, dice }) = dice_ce_term_grads(logits, target)?;
    for (g, d) in grad.data.iter_mut().zip(&dice.data) {
        *g += *d;
    }
    Ok((report, grad))
}

pub fn dice_ce_loss<T: Real>(logits: &Tensor5<T>, target: &Tensor5<T>) -> Result<LossReport> {
    dice_ce_grad(logits, target).map(|(r, _)| r)
}

/// Loss and exact gradients for every network parameter.
pub fn backward<T: Real>(
    params: &NetParams<T>,
    cfg: &UNetConfig,
    input: &Tensor5<T>,
    target: &Tensor5<T>,
) -> Result<(LossReport, Grads<T>)> {
    let (logits, caches) = forward_train(params, cfg, input)?;
    let (report, dlogits) = dice_ce_grad(&logits, target)?;
    let grads = backward_from_logits(params, cfg, &caches, &dlogits)?;
    Ok((report, grads))
}

/// Nesterov update in place:
/// `v <- m v - lr g`, then `theta <- theta + (m v - lr g)` with the new `v`.
/// Nothing is modified when a gradient is non-finite.
pub fn sgd_nesterov_step<T: Real>(
    params: &mut NetParams<T>,
    grads: &Grads<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "momentum must be in [0, 1), got {momentum}"
        )));
    }
    if grads.len() != params.tensors.len()
        || grads
            .iter()
            .zip(&params.tensors)
            .any(|(g, t)| g.len() != t.len())
    {
        return Err(Error::Shape(
            "gradient layout does not match parameters".into(),
        ));
    }
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient {
            tensor: params.specs[i].name.clone(),
        });
    }
    let (lr, m) = (T::of(lr), T::of(momentum));
    for ((theta, vel), g) in params
        .tensors
        .iter_mut()
        .zip(params.velocity.iter_mut())
        .zip(grads)
    {
        for ((t, v), &g) in theta.iter_mut().zip(vel.iter_mut()).zip(g) {
            *v = m * *v - lr * g;
            *t = *t + (m * *v - lr * g);
        }
    }
    Ok(())
}

/// `lr0 * (1 - epoch / max_epochs)^power`; `epoch` is clamped to `max_epochs`.
pub fn poly_lr(epoch: usize, max_epochs: usize, lr0: f64, power: f64) -> f64 {
    if max_epochs == 0 {
        return lr0;
    }
    let frac = epoch.min(max_epochs) as f64 / max_epochs as f64;
    lr0 * (1.0 - frac).powf(power)
}
