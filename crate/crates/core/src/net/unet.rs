//! Configurable 3D U-Net.
//!
//! Encoder level 0 is `convs_per_block` 3x3x3 units at `C(0)`. Each deeper
//! level `r` starts with a stride-2 3x3x3 unit `C(r-1) -> C(r)` followed by
//! `convs_per_block` units at `C(r)`. Decoder level `r` (from `R-2` down to
//! 0) upsamples with a kernel-2 stride-2 transposed convolution
//! `C(r+1) -> C(r)`, concatenates `[upsampled, skip]`, then runs
//! `convs_per_block` units (the first maps `2 C(r) -> C(r)`). A 1x1x1
//! convolution maps `C(0)` to the class logits.
//!
//! A unit is conv -> instance norm (affine) -> leaky ReLU. With
//! `norm = none` the conv carries a bias instead. Under instance norm a conv
//! bias is cancelled by the mean subtraction, so none is allocated.
//!
//! Parameter count, with `k = convs_per_block`, `n = 2` (norm) or `1` (none):
//!
//! ```text
//! unit(a, b)  = 27 a b + n b
//! up(a, b)    = 8 a b + b
//! total = unit(in, C0) + (k-1) unit(C0, C0)
//!       + sum_{r=1}^{R-1} [ unit(C(r-1), C(r)) + k unit(C(r), C(r)) ]
//!       + sum_{r=0}^{R-2} [ up(C(r+1), C(r)) + unit(2 C(r), C(r)) + (k-1) unit(C(r), C(r)) ]
//!       + C0 * classes + classes
//! ```

use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::layers::{self, NormCache};
use super::real::{gemm, Mat, Real};
use super::Tensor5;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Instance,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub num_resolutions: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub kernel: usize,
    pub convs_per_block: usize,
    pub norm: NormKind,
    pub norm_eps: f64,
    pub negative_slope: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            num_resolutions: 6,
            in_channels: 1,
            num_classes: 2,
            base_channels: 4,
            channel_cap: 320,
            kernel: 3,
            convs_per_block: 2,
            norm: NormKind::Instance,
            norm_eps: 1e-5,
            negative_slope: 0.01,
        }
    }
}

impl UNetConfig {
    /// Small configuration for desk-scale runs.
    pub fn toy(num_resolutions: usize, base_channels: usize) -> Self {
        UNetConfig {
            num_resolutions,
            base_channels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=16).contains(&self.num_resolutions) {
            return bad(format!(
                "num_resolutions must be in 2..=16, got {}",
                self.num_resolutions
            ));
        }
        if self.base_channels < 1 || self.channel_cap < 1 {
            return bad("base_channels and channel_cap must be >= 1".into());
        }
        if self.in_channels < 1 || self.num_classes < 1 {
            return bad("in_channels and num_classes must be >= 1".into());
        }
        if self.kernel != layers::KERNEL {
            return bad(format!(
                "only kernel size 3 is supported, got {}",
                self.kernel
            ));
        }
        if self.convs_per_block < 1 {
            return bad("convs_per_block must be >= 1".into());
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return bad("norm_eps must be positive".into());
        }
        if !(self.negative_slope.is_finite() && self.negative_slope >= 0.0) {
            return bad("negative_slope must be finite and non-negative".into());
        }
        Ok(())
    }

    /// `C(r) = min(C0 * 2^r, cap)`.
    pub fn channels(&self, r: usize) -> usize {
        let c = (self.base_channels as u128) << r.min(100);
        c.min(self.channel_cap as u128) as usize
    }

    /// Required divisor of every spatial dimension.
    pub fn divisor(&self) -> usize {
        1 << (self.num_resolutions - 1)
    }

    /// Closed-form parameter count (see module docs).
    pub fn param_count(&self) -> usize {
        let n = if self.norm == NormKind::Instance {
            2
        } else {
            1
        };
        let k = self.convs_per_block;
        let unit = |a: usize, b: usize| 27 * a * b + n * b;
        let up = |a: usize, b: usize| 8 * a * b + b;
        let c = |r| self.channels(r);
        let mut total = unit(self.in_channels, c(0)) + (k - 1) * unit(c(0), c(0));
        for r in 1..self.num_resolutions {
            total += unit(c(r - 1), c(r)) + k * unit(c(r), c(r));
        }
        for r in 0..self.num_resolutions - 1 {
            total += up(c(r + 1), c(r)) + unit(2 * c(r), c(r)) + (k - 1) * unit(c(r), c(r));
        }
        total + c(0) * self.num_classes + self.num_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    UpWeight,
    HeadWeight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct Unit {
    w: usize,
    bias: Option<usize>,
    norm: Option<(usize, usize)>,
    cin: usize,
    cout: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Up {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
}

/// Parameter declaration order and wiring derived from a config.
#[derive(Debug, Clone)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    enc: Vec<Vec<Unit>>,
    /// Indexed by level `r`; executed from `R-2` down to 0.
    dec: Vec<(Up, Vec<Unit>)>,
    head: (usize, usize),
}

struct Builder {
    specs: Vec<ParamSpec>,
    instance: bool,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: ParamRole, fan_in: usize) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            role,
            fan_in,
        });
        self.specs.len() - 1
    }

    fn unit(&mut self, prefix: String, cin: usize, cout: usize, stride: usize) -> Unit {
        let w = self.push(
            format!("{prefix}.weight"),
            vec![cout, cin, 3, 3, 3],
            ParamRole::ConvWeight,
            cin * layers::TAPS,
        );
        let (bias, norm) = if self.instance {
            let g = self.push(
                format!("{prefix}.norm.weight"),
                vec![cout],
                ParamRole::NormScale,
                0,
            );
            let b = self.push(
                format!("{prefix}.norm.bias"),
                vec![cout],
                ParamRole::NormShift,
                0,
            );
            (None, Some((g, b)))
        } else {
            let b = self.push(format!("{prefix}.bias"), vec![cout], ParamRole::Bias, 0);
            (Some(b), None)
        };
        Unit {
            w,
            bias,
            norm,
            cin,
            cout,
            stride,
        }
    }
}

impl Layout {
    pub fn new(cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut bld = Builder {
            specs: Vec::new(),
            instance: cfg.norm == NormKind::Instance,
        };
        let k = cfg.convs_per_block;
        let c = |r| cfg.channels(r);
        let mut enc = Vec::new();
        for r in 0..cfg.num_resolutions {
            let mut units = Vec::new();
            if r == 0 {
                units.push(bld.unit("enc0.conv0".into(), cfg.in_channels, c(0), 1));
                for i in 1..k {
                    units.push(bld.unit(format!("enc0.conv{i}"), c(0), c(0), 1));
                }
            } else {
                units.push(bld.unit(format!("enc{r}.down"), c(r - 1), c(r), 2));
                for i in 0..k {
                    units.push(bld.unit(format!("enc{r}.conv{i}"), c(r), c(r), 1));
                }
            }
            enc.push(units);
        }
        let mut dec = Vec::new();
        for r in (0..cfg.num_resolutions - 1).rev() {
            let (cin, cout) = (c(r + 1), c(r));
            let w = bld.push(
                format!("dec{r}.up.weight"),
                vec![cout, 2, 2, 2, cin],
                ParamRole::UpWeight,
                cin,
            );
            let b = bld.push(format!("dec{r}.up.bias"), vec![cout], ParamRole::Bias, 0);
            let mut units = vec![bld.unit(format!("dec{r}.conv0"), 2 * cout, cout, 1)];
            for i in 1..k {
                units.push(bld.unit(format!("dec{r}.conv{i}"), cout, cout, 1));
            }
            dec.push((Up { w, b, cin, cout }, units));
        }
        dec.reverse();
        let hw = bld.push(
            "head.weight".into(),
            vec![cfg.num_classes, c(0), 1, 1, 1],
            ParamRole::HeadWeight,
            c(0),
        );
        let hb = bld.push(
            "head.bias".into(),
            vec![cfg.num_classes],
            ParamRole::Bias,
            0,
        );
        Ok(Layout {
            specs: bld.specs,
            enc,
            dec,
            head: (hw, hb),
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}

/// Named parameter tensors plus the optimizer velocity, in declaration
/// order (encoder, decoder deepest first, head).
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub specs: Vec<ParamSpec>,
    pub tensors: Vec<Vec<T>>,
    pub velocity: Vec<Vec<T>>,
}

/// Gradients with the same layout as [`NetParams::tensors`].
pub type Grads<T> = Vec<Vec<T>>;

impl<T: Real> NetParams<T> {
    pub fn zeros(layout: &Layout) -> Self {
        let tensors: Vec<Vec<T>> = layout
            .specs
            .iter()
            .map(|s| vec![T::zero(); s.len()])
            .collect();
        NetParams {
            specs: layout.specs.clone(),
            velocity: tensors.clone(),
            tensors,
        }
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.tensors
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| self.tensors[i].as_slice())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    /// Converts to another precision (velocity included).
    pub fn cast<U: Real>(&self) -> NetParams<U> {
        let conv = |v: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            v.iter()
                .map(|t| t.iter().map(|x| U::of(x.as_f64())).collect())
                .collect()
        };
        NetParams {
            specs: self.specs.clone(),
            tensors: conv(&self.tensors),
            velocity: conv(&self.velocity),
        }
    }
}

/// He-style initialisation: conv kernels ~ N(0, 2 / fan_in), biases and
/// norm shifts 0, norm scales 1, velocity 0.
pub fn init_params<T: Real>(cfg: &UNetConfig, seed: u64) -> Result<NetParams<T>> {
    let layout = Layout::new(cfg)?;
    let mut params = NetParams::<T>::zeros(&layout);
    let mut rng = crate::rng::stream(seed, "init", 0);
    for (spec, t) in params.specs.iter().zip(params.tensors.iter_mut()) {
        match spec.role {
            ParamRole::ConvWeight | ParamRole::UpWeight | ParamRole::HeadWeight => {
                let normal =
                    Normal::new(0.0, (2.0 / spec.fan_in as f64).sqrt()).expect("valid std");
                for v in t.iter_mut() {
                    *v = T::of(normal.sample(&mut rng));
                }
            }
            ParamRole::NormScale => t.iter_mut().for_each(|v| *v = T::one()),
            ParamRole::Bias | ParamRole::NormShift => {}
        }
    }
    Ok(params)
}

/// Normalisation statistics recorded before the affine transform.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStat {
    pub sample: usize,
    pub layer: String,
    pub channel: usize,
    pub mean: f64,
    pub var: f64,
}

/// Debug view of a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    /// Spatial dims of each encoder level.
    pub level_dims: Vec<[usize; 3]>,
    pub norm_stats: Vec<NormStat>,
}

struct UnitCache<T> {
    input: Vec<T>,
    in_dims: [usize; 3],
    norm: Option<NormCache<T>>,
    output: Vec<T>,
}

/// Activations of one sample kept for the backward pass.
pub struct SampleCache<T> {
    level_dims: Vec<[usize; 3]>,
    enc: Vec<Vec<UnitCache<T>>>,
    dec: Vec<Vec<UnitCache<T>>>,
}

/// Sign pattern of every leaky-ReLU input, in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActivationPattern {
    masks: Vec<Vec<bool>>,
}

impl ActivationPattern {
    /// Number of activations on the negative branch.
    pub fn negative_count(&self) -> usize {
        self.masks.iter().flatten().filter(|&&n| n).count()
    }
}

enum PatternMode<'a> {
    Off,
    Record(ActivationPattern),
    Replay(&'a ActivationPattern, usize),
}

struct Ctx<'a, T> {
    params: &'a NetParams<T>,
    layout: &'a Layout,
    eps: f64,
    slope: T,
    keep: bool,
    cols: Vec<T>,
    pattern: PatternMode<'a>,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&self, i: usize) -> &[T] {
        &self.params.tensors[i]
    }

    fn unit_forward(
        &mut self,
        u: &Unit,
        x: Vec<T>,
        dims: [usize; 3],
        trace: Option<(&mut ForwardTrace, usize)>,
    ) -> (Vec<T>, [usize; 3], Option<UnitCache<T>>) {
        let params = self.params;
        let bias = u.bias.map(|b| params.tensors[b].as_slice());
        let (mut y, od) = layers::conv3d_forward(
            &x,
            u.cin,
            dims,
            &params.tensors[u.w],
            bias,
            u.cout,
            u.stride,
            &mut self.cols,
        );
        let norm = u.norm.map(|(g, b)| {
            layers::instance_norm_forward(
                &mut y,
                u.cout,
                &params.tensors[g],
                &params.tensors[b],
                self.eps,
            )
        });
        if let (Some((tr, sample)), Some(nc)) = (trace, norm.as_ref()) {
            let name = params.specs[u.w]
                .name
                .trim_end_matches(".weight")
                .to_string();
            let n = nc.xhat.len() / u.cout;
            for (channel, h) in nc.xhat.chunks_exact(n).enumerate() {
                let mean = h.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
                let var = h.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
                tr.norm_stats.push(NormStat {
                    sample,
                    layer: name.clone(),
                    channel,
                    mean,
                    var,
                });
            }
        }
        match &mut self.pattern {
            PatternMode::Off => layers::leaky_relu_inplace(&mut y, self.slope),
            PatternMode::Record(p) => {
                p.masks.push(y.iter().map(|&v| v <= T::zero()).collect());
                layers::leaky_relu_inplace(&mut y, self.slope);
            }
            PatternMode::Replay(p, i) => {
                for (v, &neg) in y.iter_mut().zip(&p.masks[*i]) {
                    if neg {
                        *v = *v * self.slope;
                    }
                }
                *i += 1;
            }
        }
        let cache = self.keep.then(|| UnitCache {
            input: x,
            in_dims: dims,
            norm,
            output: y.clone(),
        });
        (y, od, cache)
    }

    fn sample_forward(
        &mut self,
        x: &[T],
        dims: [usize; 3],
        mut trace: Option<(&mut ForwardTrace, usize)>,
    ) -> (Vec<T>, Option<SampleCache<T>>) {
        let layout = self.layout;
        let levels = layout.enc.len();
        let mut level_dims = Vec::with_capacity(levels);
        let mut skips: Vec<Vec<T>> = Vec::with_capacity(levels);
        let mut enc_cache = Vec::new();
        let mut cur = x.to_vec();
        let mut cd = dims;
        for units in &layout.enc {
            let mut caches = Vec::new();
            for u in units {
                let tr = trace.as_mut().map(|(t, s)| (&mut **t, *s));
                let (y, od, c) = self.unit_forward(u, cur, cd, tr);
                cur = y;
                cd = od;
                caches.extend(c);
            }
            level_dims.push(cd);
            enc_cache.push(caches);
            skips.push(cur.clone());
        }
        let mut dec_cache: Vec<Vec<UnitCache<T>>> = (0..levels - 1).map(|_| Vec::new()).collect();
        for r in (0..levels - 1).rev() {
            let (up, units) = &layout.dec[r];
            let (mut cat, ud) =
                layers::upconv_forward(&cur, up.cin, cd, self.p(up.w), self.p(up.b), up.cout);
            debug_assert_eq!(ud, level_dims[r]);
            cat.extend_from_slice(&skips[r]);
            cur = cat;
            cd = ud;
            for u in units {
                let tr = trace.as_mut().map(|(t, s)| (&mut **t, *s));
                let (y, od, c) = self.unit_forward(u, cur, cd, tr);
                cur = y;
                cd = od;
                dec_cache[r].extend(c);
            }
        }
        let logits = self.head_forward(&cur, voxels(cd));
        let cache = self.keep.then_some(SampleCache {
            level_dims,
            enc: enc_cache,
            dec: dec_cache,
        });
        if let Some((tr, 0)) = trace {
            tr.level_dims = cache_dims(self.layout, dims);
        }
        (logits, cache)
    }

    fn head_forward(&self, feat: &[T], n: usize) -> Vec<T> {
        let (hw, hb) = self.layout.head;
        let b = self.p(hb);
        let classes = b.len();
        let c0 = feat.len() / n;
        let mut out = vec![T::zero(); classes * n];
        gemm(
            T::one(),
            Mat::new(self.p(hw), classes, c0),
            Mat::new(feat, c0, n),
            T::zero(),
            &mut out,
        );
        for (k, chunk) in out.chunks_exact_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[k]);
        }
        out
    }

    fn unit_backward(
        &mut self,
        u: &Unit,
        c: &UnitCache<T>,
        mut d: Vec<T>,
        grads: &mut Grads<T>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let params = self.params;
        layers::leaky_relu_backward_inplace(&mut d, &c.output, self.slope);
        if let (Some((g, b)), Some(nc)) = (u.norm, c.norm.as_ref()) {
            let (gg, gb) = pair_mut(grads, g, b);
            d = layers::instance_norm_backward(&d, u.cout, nc, &params.tensors[g], gg, gb);
        }
        let (gw, gbias) = match u.bias {
            Some(b) => {
                let (gw, gb) = pair_mut(grads, u.w, b);
                (gw, Some(gb))
            }
            None => (grads[u.w].as_mut_slice(), None),
        };
        layers::conv3d_backward(
            &c.input,
            u.cin,
            c.in_dims,
            &params.tensors[u.w],
            u.cout,
            u.stride,
            &d,
            gw,
            gbias,
            want_input,
            &mut self.cols,
        )
    }

    fn sample_backward(&mut self, cache: &SampleCache<T>, dlogits: &[T], grads: &mut Grads<T>) {
        let layout = self.layout;
        let levels = layout.enc.len();
        let feat = &cache.dec[0].last().expect("decoder unit").output;
        let n = voxels(cache.level_dims[0]);
        let (hw, hb) = layout.head;
        let classes = self.p(hb).len();
        let c0 = feat.len() / n;
        gemm(
            T::one(),
            Mat::new(dlogits, classes, n),
            Mat::t(feat, c0, n),
            T::one(),
            &mut grads[hw],
        );
        for (k, chunk) in dlogits.chunks_exact(n).enumerate() {
            grads[hb][k] += T::of(chunk.iter().map(|v| v.as_f64()).sum());
        }
        let mut d = vec![T::zero(); c0 * n];
        gemm(
            T::one(),
            Mat::t(self.p(hw), classes, c0),
            Mat::new(dlogits, classes, n),
            T::zero(),
            &mut d,
        );

        let mut skip_grads: Vec<Vec<T>> = Vec::with_capacity(levels - 1);
        for r in 0..levels - 1 {
            let (up, units) = &layout.dec[r];
            for (u, c) in units.iter().zip(&cache.dec[r]).rev() {
                d = self
                    .unit_backward(u, c, d, grads, true)
                    .expect("input grad");
            }
            let split = up.cout * voxels(cache.level_dims[r]);
            skip_grads.push(d.split_off(split));
            let up_in = if r + 1 == levels - 1 {
                &cache.enc[r + 1].last().expect("encoder unit").output
            } else {
                &cache.dec[r + 1].last().expect("decoder unit").output
            };
            let (gw, gb) = pair_mut(grads, up.w, up.b);
            d = layers::upconv_backward(
                up_in,
                up.cin,
                cache.level_dims[r + 1],
                self.p(up.w),
                up.cout,
                &d,
                gw,
                gb,
            );
        }
        for r in (0..levels).rev() {
            if r < levels - 1 {
                for (a, b) in d.iter_mut().zip(&skip_grads[r]) {
                    *a += *b;
                }
            }
            let units = &layout.enc[r];
            for (i, (u, c)) in units.iter().zip(&cache.enc[r]).enumerate().rev() {
                let want = !(r == 0 && i == 0);
                match self.unit_backward(u, c, d, grads, want) {
                    Some(g) => d = g,
                    None => return,
                }
            }
        }
    }
}

fn cache_dims(layout: &Layout, dims: [usize; 3]) -> Vec<[usize; 3]> {
    (0..layout.enc.len())
        .map(|r| dims.map(|n| n >> r))
        .collect()
}

fn voxels(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

fn pair_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i], &mut b[0])
}

fn check_inputs<T: Real>(
    params: &NetParams<T>,
    cfg: &UNetConfig,
    input: &Tensor5<T>,
) -> Result<Layout> {
    let layout = Layout::new(cfg)?;
    if params.specs != layout.specs
        || params
            .tensors
            .iter()
            .zip(&layout.specs)
            .any(|(t, s)| t.len() != s.len())
    {
        return Err(Error::Shape(
            "parameters do not match the network configuration".into(),
        ));
    }
    if input.channels != cfg.in_channels {
        return Err(Error::Shape(format!(
            "expected {} input channel(s), got {}",
            cfg.in_channels, input.channels
        )));
    }
    crate::patch_plan::validate_patch(input.dims, cfg.num_resolutions, 1)?;
    if input.batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(layout)
}

fn run<T: Real>(
    params: &NetParams<T>,
    cfg: &UNetConfig,
    input: &Tensor5<T>,
    keep: bool,
    mut trace: Option<&mut ForwardTrace>,
    pattern: PatternMode<'_>,
) -> Result<(Tensor5<T>, Vec<SampleCache<T>>, Option<ActivationPattern>)> {
    let layout = check_inputs(params, cfg, input)?;
    let mut ctx = Ctx {
        params,
        layout: &layout,
        eps: cfg.norm_eps,
        slope: T::of(cfg.negative_slope),
        keep,
        cols: Vec::new(),
        pattern,
    };
    let mut out = Tensor5::zeros(input.batch, cfg.num_classes, input.dims);
    let mut caches = Vec::new();
    for b in 0..input.batch {
        let tr = trace.as_mut().map(|t| (&mut **t, b));
        let (logits, cache) = ctx.sample_forward(input.sample(b), input.dims, tr);
        out.sample_mut(b).copy_from_slice(&logits);
        caches.extend(cache);
    }
    if let PatternMode::Replay(p, used) = &ctx.pattern {
        if *used != p.masks.len() {
            return Err(Error::Shape(
                "activation pattern does not match the network".into(),
            ));
        }
    }
    let recorded = match ctx.pattern {
        PatternMode::Record(p) => Some(p),
        _ => None,
    };
    Ok((out, caches, recorded))
}

/// Logits `B x classes x X x Y x Z` for input `B x in_channels x X x Y x Z`.
pub fn forward<T: Real>(
    params: &NetParams<T>,
    cfg: &UNetConfig,
    input: &Tensor5<T>,
) -> Result<Tensor5<T>> {
    run(params, cfg, input, false, None, PatternMode::Off).map(|(o, ..)| o)
}

/// [`forward`] plus per-level shapes and normalisation statistics.
pub fn forward_traced<T: Real>(
    params: &NetParams<T>,
    cfg: &UNetConfig,
    input: &Tensor5<T>,
) -> Result<(Tensor5<T>, ForwardTrace)> {
    let mut trace = ForwardTrace::default();
    let (out, ..) = run(
        params,
        cfg,
        input,
        false,
        Some(&mut trace),
        PatternMode::Off,
    )?;
    Ok((out, trace))
}

/// Forward pass that retains activations for [`backward_from_logits`].
pub fn forward_train<T: Real>(
    params: &NetParams<T>,
    cfg: &UNetConfig,
    input: &Tensor5<T>,
) -> Result<(Tensor5<T>, Vec<SampleCache<T>>)> {
    run(params, cfg, input, true, None, PatternMode::Off).map(|(o, c, _)| (o, c))
}

/// [`forward`] that also returns which activations took the negative branch.
pub fn forward_recording_pattern<T: Real>(
    params: &NetParams<T>,
    cfg: &UNetConfig,
    input: &Tensor5<T>,
) -> Result<(Tensor5<T>, ActivationPattern)> {
    let rec = PatternMode::Record(ActivationPattern::default());
    let (out, _, p) = run(params, cfg, input, false, None, rec)?;
    Ok((out, p.expect("recorded pattern")))
}

/// Evaluates the network with every leaky-ReLU branch fixed to `pattern`.
/// The result is smooth in the parameters and coincides with [`forward`]
/// near the point where the pattern was recorded, so finite differences
/// taken through it do not step across activation kinks.
pub fn forward_with_pattern<T: Real>(
    params: &NetParams<T>,
    cfg: &UNetConfig,
    input: &Tensor5<T>,
    pattern: &ActivationPattern,
) -> Result<Tensor5<T>> {
    run(
        params,
        cfg,
        input,
        false,
        None,
        PatternMode::Replay(pattern, 0),
    )
    .map(|(o, ..)| o)
}

/// Reverse pass from the logits gradient to every parameter.
pub fn backward_from_logits<T: Real>(
    params: &NetParams<T>,
    cfg: &UNetConfig,
    caches: &[SampleCache<T>],
    dlogits: &Tensor5<T>,
) -> Result<Grads<T>> {
    let layout = Layout::new(cfg)?;
    if caches.len() != dlogits.batch || dlogits.channels != cfg.num_classes {
        return Err(Error::Shape(
            "logit gradient does not match the cached forward pass".into(),
        ));
    }
    let mut ctx = Ctx {
        params,
        layout: &layout,
        eps: cfg.norm_eps,
        slope: T::of(cfg.negative_slope),
        keep: true,
        cols: Vec::new(),
        pattern: PatternMode::Off,
    };
    let mut grads = params.zero_grads();
    for (b, cache) in caches.iter().enumerate() {
        ctx.sample_backward(cache, dlogits.sample(b), &mut grads);
    }
    Ok(grads)
}
