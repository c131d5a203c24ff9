//! Single-sample layer kernels with hand-written backward passes.
//!
//! Feature maps are `channels x voxels`, each channel x-fastest. The 3x3x3
//! convolution (zero padding 1, stride 1 or 2) is lowered to GEMM through
//! an im2col buffer with rows `ci * 27 + kz * 9 + ky * 3 + kx`.

use super::real::{gemm, CompensatedSum, Mat, Real};

pub const KERNEL: usize = 3;
pub const TAPS: usize = KERNEL * KERNEL * KERNEL;

/// Spatial output size of the 3x3x3, padding-1 convolution.
pub fn conv_out_dims(dims: [usize; 3], stride: usize) -> [usize; 3] {
    dims.map(|n| (n - 1) / stride + 1)
}

pub fn voxels(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Fills `cols` (`cin*27 x out_voxels`) from `input` (`cin x in_voxels`).
pub fn im2col<T: Real>(
    input: &[T],
    cin: usize,
    dims: [usize; 3],
    stride: usize,
    cols: &mut Vec<T>,
) {
    let out = conv_out_dims(dims, stride);
    let nout = voxels(out);
    let nin = voxels(dims);
    cols.clear();
    cols.resize(cin * TAPS * nout, T::zero());
    let [nx, ny, nz] = dims;
    for ci in 0..cin {
        let src = &input[ci * nin..(ci + 1) * nin];
        for kz in 0..KERNEL {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = ci * TAPS + kz * 9 + ky * 3 + kx;
                    let dst = &mut cols[row * nout..(row + 1) * nout];
                    for oz in 0..out[2] {
                        let iz = (oz * stride + kz) as isize - 1;
                        if iz < 0 || iz as usize >= nz {
                            continue;
                        }
                        for oy in 0..out[1] {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy as usize >= ny {
                                continue;
                            }
                            let srow = &src[(iy as usize + ny * iz as usize) * nx..][..nx];
                            let drow = &mut dst[(oy + out[1] * oz) * out[0]..][..out[0]];
                            if stride == 1 {
                                // ix = ox + kx - 1 must lie in [0, nx)
                                let lo = 1usize.saturating_sub(kx);
                                let hi = (nx + 1 - kx).min(out[0]);
                                if lo < hi {
                                    drow[lo..hi].copy_from_slice(&srow[lo + kx - 1..hi + kx - 1]);
                                }
                            } else {
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix >= 0 && (ix as usize) < nx {
                                        *d = srow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into `grad_in` (the adjoint of [`im2col`]).
pub fn col2im<T: Real>(cols: &[T], cin: usize, dims: [usize; 3], stride: usize, grad_in: &mut [T]) {
    let out = conv_out_dims(dims, stride);
    let nout = voxels(out);
    let nin = voxels(dims);
    let [nx, ny, nz] = dims;
    for ci in 0..cin {
        let dst = &mut grad_in[ci * nin..(ci + 1) * nin];
        for kz in 0..KERNEL {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = ci * TAPS + kz * 9 + ky * 3 + kx;
                    let src = &cols[row * nout..(row + 1) * nout];
                    for oz in 0..out[2] {
                        let iz = (oz * stride + kz) as isize - 1;
                        if iz < 0 || iz as usize >= nz {
                            continue;
                        }
                        for oy in 0..out[1] {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy as usize >= ny {
                                continue;
                            }
                            let drow = &mut dst[(iy as usize + ny * iz as usize) * nx..][..nx];
                            let srow = &src[(oy + out[1] * oz) * out[0]..][..out[0]];
                            if stride == 1 {
                                let lo = 1usize.saturating_sub(kx);
                                let hi = (nx + 1 - kx).min(out[0]);
                                for ox in lo..hi {
                                    drow[ox + kx - 1] += srow[ox];
                                }
                            } else {
                                for (ox, &s) in srow.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix >= 0 && (ix as usize) < nx {
                                        drow[ix as usize] += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions with at most this many channel pairs run directly on
/// a zero-padded grid instead of through im2col + GEMM.
pub const DIRECT_MAX_CHANNEL_PAIRS: usize = 256;

fn use_direct(cin: usize, cout: usize, stride: usize) -> bool {
    stride == 1 && cin * cout <= DIRECT_MAX_CHANNEL_PAIRS
}

/// 3x3x3 convolution, `weight` is `cout x (cin*27)`. Returns the output
/// feature map and its spatial dims; `cols` is scratch space.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward<T: Real>(
    input: &[T],
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    stride: usize,
    cols: &mut Vec<T>,
) -> (Vec<T>, [usize; 3]) {
    if use_direct(cin, cout, stride) {
        (direct::forward(input, cin, dims, weight, bias, cout), dims)
    } else {
        conv3d_forward_gemm(input, cin, dims, weight, bias, cout, stride, cols)
    }
}

/// Accumulates weight/bias gradients and returns the input gradient when
/// `want_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    input: &[T],
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    cout: usize,
    stride: usize,
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
    want_input_grad: bool,
    cols: &mut Vec<T>,
) -> Option<Vec<T>> {
    if use_direct(cin, cout, stride) {
        direct::backward(
            input,
            cin,
            dims,
            weight,
            cout,
            grad_out,
            grad_weight,
            grad_bias,
            want_input_grad,
        )
    } else {
        conv3d_backward_gemm(
            input,
            cin,
            dims,
            weight,
            cout,
            stride,
            grad_out,
            grad_weight,
            grad_bias,
            want_input_grad,
            cols,
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward_gemm<T: Real>(
    input: &[T],
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    stride: usize,
    cols: &mut Vec<T>,
) -> (Vec<T>, [usize; 3]) {
    let out_dims = conv_out_dims(dims, stride);
    let nout = voxels(out_dims);
    im2col(input, cin, dims, stride, cols);
    let mut out = vec![T::zero(); cout * nout];
    gemm(
        T::one(),
        Mat::new(weight, cout, cin * TAPS),
        Mat::new(cols, cin * TAPS, nout),
        T::zero(),
        &mut out,
    );
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_exact_mut(nout).enumerate() {
            let bc = b[co];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
    }
    (out, out_dims)
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward_gemm<T: Real>(
    input: &[T],
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    cout: usize,
    stride: usize,
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
    want_input_grad: bool,
    cols: &mut Vec<T>,
) -> Option<Vec<T>> {
    let nout = voxels(conv_out_dims(dims, stride));
    let k = cin * TAPS;
    im2col(input, cin, dims, stride, cols);
    gemm(
        T::one(),
        Mat::new(grad_out, cout, nout),
        Mat::t(cols, k, nout),
        T::one(),
        grad_weight,
    );
    if let Some(gb) = grad_bias {
        for (co, chunk) in grad_out.chunks_exact(nout).enumerate() {
            gb[co] += T::of(chunk.iter().map(|v| v.as_f64()).sum());
        }
    }
    if !want_input_grad {
        return None;
    }
    gemm(
        T::one(),
        Mat::t(weight, cout, k),
        Mat::new(grad_out, cout, nout),
        T::zero(),
        cols,
    );
    let mut grad_in = vec![T::zero(); cin * voxels(dims)];
    col2im(cols, cin, dims, stride, &mut grad_in);
    Some(grad_in)
}

/// Stride-1 convolution on a zero-padded copy of the input. On the padded
/// grid every tap is a constant flat offset, so each (out, in, tap) triple is
/// one long axpy over the span between the first and last interior voxel.
/// Pad positions inside that span receive junk and are dropped.
mod direct {
    use super::{voxels, Real, TAPS};

    pub(super) struct Grid {
        pub p: [usize; 3],
        pub start: usize,
        pub span: usize,
        pub offsets: [isize; TAPS],
    }

    impl Grid {
        pub fn new(dims: [usize; 3]) -> Self {
            let p = dims.map(|n| n + 2);
            let (sy, sz) = (p[0], p[0] * p[1]);
            let start = 1 + sy + sz;
            let last = dims[0] + sy * dims[1] + sz * dims[2];
            let mut offsets = [0isize; TAPS];
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        offsets[kz * 9 + ky * 3 + kx] = (kx as isize - 1)
                            + sy as isize * (ky as isize - 1)
                            + sz as isize * (kz as isize - 1);
                    }
                }
            }
            Grid {
                p,
                start,
                span: last - start + 1,
                offsets,
            }
        }

        pub fn padded_len(&self) -> usize {
            voxels(self.p)
        }

        /// Copies `channels` interior blocks into a zeroed padded buffer.
        pub fn pad<T: Real>(&self, src: &[T], channels: usize, dims: [usize; 3]) -> Vec<T> {
            let n = voxels(dims);
            let plen = self.padded_len();
            let mut out = vec![T::zero(); channels * plen];
            for c in 0..channels {
                let s = &src[c * n..(c + 1) * n];
                let d = &mut out[c * plen..(c + 1) * plen];
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        let o = 1 + self.p[0] * ((y + 1) + self.p[1] * (z + 1));
                        let i = dims[0] * (y + dims[1] * z);
                        d[o..o + dims[0]].copy_from_slice(&s[i..i + dims[0]]);
                    }
                }
            }
            out
        }

        /// Interior voxels of `span`-indexed buffers (index 0 = `start`).
        pub fn unpad_span<T: Real>(&self, src: &[T], channels: usize, dims: [usize; 3]) -> Vec<T> {
            let n = voxels(dims);
            let mut out = vec![T::zero(); channels * n];
            for c in 0..channels {
                let s = &src[c * self.span..(c + 1) * self.span];
                let d = &mut out[c * n..(c + 1) * n];
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        let o = self.p[0] * (y + self.p[1] * z);
                        let i = dims[0] * (y + dims[1] * z);
                        d[i..i + dims[0]].copy_from_slice(&s[o..o + dims[0]]);
                    }
                }
            }
            out
        }
    }

    const BLOCK: usize = 64;
    const LANES: usize = 16;

    /// For each of `CO` rows: `out[r][j] += sum_k w[r * K + k] * x[base[k] + j]`,
    /// terms added in `k` order for every element. A block of every row
    /// stays in registers while the shared input loads are reused.
    #[inline(always)]
    fn multi_axpy_body<T: Real, const CO: usize>(
        w: &[T],
        base: &[usize],
        x: &[T],
        out: &mut [T],
        stride: usize,
        n: usize,
    ) {
        let k = base.len();
        let full = n / BLOCK * BLOCK;
        let mut s = 0;
        while s < full {
            let mut acc = [[T::zero(); BLOCK]; CO];
            for (r, a) in acc.iter_mut().enumerate() {
                a.copy_from_slice(&out[r * stride + s..r * stride + s + BLOCK]);
            }
            for (kk, &bk) in base.iter().enumerate() {
                let xs: &[T; BLOCK] = x[bk + s..bk + s + BLOCK].try_into().unwrap();
                for (r, a) in acc.iter_mut().enumerate() {
                    let wk = w[r * k + kk];
                    for j in 0..BLOCK {
                        a[j] += wk * xs[j];
                    }
                }
            }
            for (r, a) in acc.iter().enumerate() {
                out[r * stride + s..r * stride + s + BLOCK].copy_from_slice(a);
            }
            s += BLOCK;
        }
        for r in 0..CO {
            let o = &mut out[r * stride + full..r * stride + n];
            for (kk, &bk) in base.iter().enumerate() {
                let wk = w[r * k + kk];
                for (ov, &xv) in o.iter_mut().zip(&x[bk + full..bk + n]) {
                    *ov += wk * xv;
                }
            }
        }
    }

    const GROUP: usize = 9;

    type Lanes<T, const CO: usize> = [[[T; LANES]; GROUP]; CO];

    /// 16 lane-wise partial sums of `d[r][j] * x[base[t] + j]` over whole
    /// 16-blocks of `j`, for `CO` rows of `d` and a group of 9 taps.
    #[inline(always)]
    fn multi_dot_body<T: Real, const CO: usize>(
        d: &[T],
        dstride: usize,
        n: usize,
        base: &[usize; GROUP],
        x: &[T],
    ) -> Lanes<T, CO> {
        let full = n / LANES * LANES;
        let mut acc = [[[T::zero(); LANES]; GROUP]; CO];
        let mut j = 0;
        while j < full {
            let mut dv = [[T::zero(); LANES]; CO];
            for (r, v) in dv.iter_mut().enumerate() {
                v.copy_from_slice(&d[r * dstride + j..r * dstride + j + LANES]);
            }
            for t in 0..GROUP {
                let xs: &[T; LANES] = x[base[t] + j..base[t] + j + LANES].try_into().unwrap();
                for r in 0..CO {
                    for i in 0..LANES {
                        acc[r][t][i] += dv[r][i] * xs[i];
                    }
                }
            }
            j += LANES;
        }
        acc
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn multi_axpy_avx512<T: Real, const CO: usize>(
        w: &[T],
        base: &[usize],
        x: &[T],
        out: &mut [T],
        stride: usize,
        n: usize,
    ) {
        multi_axpy_body::<T, CO>(w, base, x, out, stride, n)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn multi_axpy_avx2<T: Real, const CO: usize>(
        w: &[T],
        base: &[usize],
        x: &[T],
        out: &mut [T],
        stride: usize,
        n: usize,
    ) {
        multi_axpy_body::<T, CO>(w, base, x, out, stride, n)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn multi_dot_avx512<T: Real, const CO: usize>(
        d: &[T],
        dstride: usize,
        n: usize,
        base: &[usize; GROUP],
        x: &[T],
    ) -> Lanes<T, CO> {
        multi_dot_body::<T, CO>(d, dstride, n, base, x)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn multi_dot_avx2<T: Real, const CO: usize>(
        d: &[T],
        dstride: usize,
        n: usize,
        base: &[usize; GROUP],
        x: &[T],
    ) -> Lanes<T, CO> {
        multi_dot_body::<T, CO>(d, dstride, n, base, x)
    }

    fn multi_axpy_rows<T: Real, const CO: usize>(
        w: &[T],
        base: &[usize],
        x: &[T],
        out: &mut [T],
        stride: usize,
        n: usize,
    ) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                return unsafe { multi_axpy_avx512::<T, CO>(w, base, x, out, stride, n) };
            }
            if std::is_x86_feature_detected!("avx2") {
                return unsafe { multi_axpy_avx2::<T, CO>(w, base, x, out, stride, n) };
            }
        }
        multi_axpy_body::<T, CO>(w, base, x, out, stride, n)
    }

    // Wider registers only change how many lanes run at once; no fused
    // multiply-add is emitted, so every path gives identical bits.
    /// Rows of `out` (each `n` long) with weight rows of `base.len()`.
    fn multi_axpy<T: Real>(w: &[T], base: &[usize], x: &[T], out: &mut [T], n: usize) {
        let k = base.len();
        let rows = out.len() / n;
        let mut r = 0;
        while r + 4 <= rows {
            multi_axpy_rows::<T, 4>(&w[r * k..], base, x, &mut out[r * n..], n, n);
            r += 4;
        }
        while r < rows {
            multi_axpy_rows::<T, 1>(&w[r * k..], base, x, &mut out[r * n..], n, n);
            r += 1;
        }
    }

    fn multi_dot_lanes<T: Real, const CO: usize>(
        d: &[T],
        dstride: usize,
        n: usize,
        base: &[usize; GROUP],
        x: &[T],
    ) -> Lanes<T, CO> {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                return unsafe { multi_dot_avx512::<T, CO>(d, dstride, n, base, x) };
            }
            if std::is_x86_feature_detected!("avx2") {
                return unsafe { multi_dot_avx2::<T, CO>(d, dstride, n, base, x) };
            }
        }
        multi_dot_body::<T, CO>(d, dstride, n, base, x)
    }

    /// `gw[r][t] += sum_j d[r][j] * x[base[t] + j]` for `CO` rows of `d`
    /// (row stride `dstride`, length `n`) and all 27 taps. `gw` rows are
    /// `gstride` apart.
    #[allow(clippy::too_many_arguments)]
    fn multi_dot<T: Real, const CO: usize>(
        d: &[T],
        dstride: usize,
        n: usize,
        base: &[usize; TAPS],
        x: &[T],
        gw: &mut [T],
        gstride: usize,
    ) {
        let full = n / LANES * LANES;
        for g in 0..TAPS / GROUP {
            let gb: &[usize; GROUP] = base[g * GROUP..(g + 1) * GROUP].try_into().unwrap();
            let lanes = multi_dot_lanes::<T, CO>(d, dstride, n, gb, x);
            for (r, lr) in lanes.iter().enumerate() {
                let drow = &d[r * dstride + full..r * dstride + n];
                for (t, l) in lr.iter().enumerate() {
                    let mut sum: f64 = l.iter().map(|v| v.as_f64()).sum();
                    for (dv, xv) in drow.iter().zip(&x[gb[t] + full..gb[t] + n]) {
                        sum += (*dv * *xv).as_f64();
                    }
                    gw[r * gstride + g * GROUP + t] += T::of(sum);
                }
            }
        }
    }

    pub fn forward<T: Real>(
        input: &[T],
        cin: usize,
        dims: [usize; 3],
        weight: &[T],
        bias: Option<&[T]>,
        cout: usize,
    ) -> Vec<T> {
        let g = Grid::new(dims);
        let plen = g.padded_len();
        let xp = g.pad(input, cin, dims);
        let base: Vec<usize> = (0..cin)
            .flat_map(|ci| {
                (0..TAPS).map(move |t| ci * plen + (g.start as isize + g.offsets[t]) as usize)
            })
            .collect();
        let mut acc = vec![T::zero(); cout * g.span];
        if let Some(b) = bias {
            for (out, &bv) in acc.chunks_exact_mut(g.span).zip(b) {
                out.iter_mut().for_each(|v| *v = bv);
            }
        }
        multi_axpy(weight, &base, &xp, &mut acc, g.span);
        g.unpad_span(&acc, cout, dims)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        input: &[T],
        cin: usize,
        dims: [usize; 3],
        weight: &[T],
        cout: usize,
        grad_out: &[T],
        grad_weight: &mut [T],
        grad_bias: Option<&mut [T]>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let g = Grid::new(dims);
        let plen = g.padded_len();
        let n = voxels(dims);
        let xp = g.pad(input, cin, dims);
        // gradient on the padded grid, zero outside the interior
        let dyp = g.pad(grad_out, cout, dims);
        if let Some(gb) = grad_bias {
            for co in 0..cout {
                gb[co] += T::of(
                    grad_out[co * n..(co + 1) * n]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum(),
                );
            }
        }
        let mut tap_base = [0usize; TAPS];
        for (b, &o) in tap_base.iter_mut().zip(&g.offsets) {
            *b = (g.start as isize + o) as usize;
        }
        let gstride = cin * TAPS;
        let mut co = 0;
        while co < cout {
            let rows = if co + 2 <= cout { 2 } else { 1 };
            let d = &dyp[co * plen + g.start..];
            for ci in 0..cin {
                let x = &xp[ci * plen..(ci + 1) * plen];
                let gw = &mut grad_weight[(co * cin + ci) * TAPS..];
                if rows == 2 {
                    multi_dot::<T, 2>(d, plen, g.span, &tap_base, x, gw, gstride);
                } else {
                    multi_dot::<T, 1>(d, plen, g.span, &tap_base, x, gw, gstride);
                }
            }
            co += rows;
        }
        if !want_input_grad {
            return None;
        }
        // dx[p] = sum over (co, tap) of w * dy[p - offset]
        let base: Vec<usize> = (0..cout)
            .flat_map(|co| {
                (0..TAPS).map(move |t| co * plen + (g.start as isize - g.offsets[t]) as usize)
            })
            .collect();
        // weights regrouped as cin rows of (co, tap)
        let mut w_t = vec![T::zero(); cin * cout * TAPS];
        for ci in 0..cin {
            for co in 0..cout {
                w_t[(ci * cout + co) * TAPS..][..TAPS]
                    .copy_from_slice(&weight[(co * cin + ci) * TAPS..][..TAPS]);
            }
        }
        let mut dx = vec![T::zero(); cin * g.span];
        multi_axpy(&w_t, &base, &dyp, &mut dx, g.span);
        Some(g.unpad_span(&dx, cin, dims))
    }
}

/// Transposed convolution with kernel 2 and stride 2. `weight` is
/// `(cout*8) x cin` with row `co * 8 + oz * 4 + oy * 2 + ox`.
pub fn upconv_forward<T: Real>(
    input: &[T],
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> (Vec<T>, [usize; 3]) {
    let nin = voxels(dims);
    let out_dims = dims.map(|n| 2 * n);
    let mut cols = vec![T::zero(); cout * 8 * nin];
    gemm(
        T::one(),
        Mat::new(weight, cout * 8, cin),
        Mat::new(input, cin, nin),
        T::zero(),
        &mut cols,
    );
    let mut out = vec![T::zero(); cout * voxels(out_dims)];
    scatter_up(
        &cols,
        cout,
        dims,
        |co, src, dst| *dst = src + bias[co],
        &mut out,
    );
    (out, out_dims)
}

fn scatter_up<T: Real>(
    cols: &[T],
    cout: usize,
    dims: [usize; 3],
    mut f: impl FnMut(usize, T, &mut T),
    out: &mut [T],
) {
    let nin = voxels(dims);
    let [ox_n, oy_n] = [2 * dims[0], 2 * dims[1]];
    let nout = voxels(dims) * 8;
    for co in 0..cout {
        for o in 0..8 {
            let (ox, oy, oz) = (o & 1, (o >> 1) & 1, o >> 2);
            let src = &cols[(co * 8 + o) * nin..][..nin];
            let dst = &mut out[co * nout..][..nout];
            let mut i = 0;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    let base = (2 * y + oy + oy_n * (2 * z + oz)) * ox_n + ox;
                    for x in 0..dims[0] {
                        f(co, src[i], &mut dst[base + 2 * x]);
                        i += 1;
                    }
                }
            }
        }
    }
}

fn gather_up<T: Real>(grad_out: &[T], cout: usize, dims: [usize; 3]) -> Vec<T> {
    let nin = voxels(dims);
    let [ox_n, oy_n] = [2 * dims[0], 2 * dims[1]];
    let nout = nin * 8;
    let mut cols = vec![T::zero(); cout * 8 * nin];
    for co in 0..cout {
        for o in 0..8 {
            let (ox, oy, oz) = (o & 1, (o >> 1) & 1, o >> 2);
            let dst = &mut cols[(co * 8 + o) * nin..][..nin];
            let src = &grad_out[co * nout..][..nout];
            let mut i = 0;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    let base = (2 * y + oy + oy_n * (2 * z + oz)) * ox_n + ox;
                    for x in 0..dims[0] {
                        dst[i] = src[base + 2 * x];
                        i += 1;
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
pub fn upconv_backward<T: Real>(
    input: &[T],
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    cout: usize,
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Vec<T> {
    let nin = voxels(dims);
    let nout = nin * 8;
    for (co, chunk) in grad_out.chunks_exact(nout).enumerate() {
        grad_bias[co] += T::of(chunk.iter().map(|v| v.as_f64()).sum());
    }
    let dcols = gather_up(grad_out, cout, dims);
    gemm(
        T::one(),
        Mat::new(&dcols, cout * 8, nin),
        Mat::t(input, cin, nin),
        T::one(),
        grad_weight,
    );
    let mut grad_in = vec![T::zero(); cin * nin];
    gemm(
        T::one(),
        Mat::t(weight, cout * 8, cin),
        Mat::new(&dcols, cout * 8, nin),
        T::zero(),
        &mut grad_in,
    );
    grad_in
}

/// Saved state of one instance normalisation.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
}

/// Per-channel standardisation followed by the affine `gamma * xhat + beta`,
/// in place. Statistics are accumulated in f64.
pub fn instance_norm_forward<T: Real>(
    x: &mut [T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> NormCache<T> {
    let n = x.len() / channels;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(channels);
    for c in 0..channels {
        let xs = &mut x[c * n..(c + 1) * n];
        let mut acc = CompensatedSum::default();
        xs.iter().for_each(|v| acc.add(v.as_f64()));
        let mean = acc.value() / n as f64;
        let mut acc = CompensatedSum::default();
        xs.iter().for_each(|v| {
            let d = v.as_f64() - mean;
            acc.add(d * d)
        });
        let var = acc.value() / n as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let (g, b) = (gamma[c], beta[c]);
        let (m, s) = (T::of(mean), T::of(istd));
        for (v, h) in xs.iter_mut().zip(xhat[c * n..(c + 1) * n].iter_mut()) {
            *h = (*v - m) * s;
            *v = g * *h + b;
        }
    }
    NormCache { xhat, inv_std }
}

/// Returns the input gradient; accumulates `gamma`/`beta` gradients.
pub fn instance_norm_backward<T: Real>(
    grad_out: &[T],
    channels: usize,
    cache: &NormCache<T>,
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Vec<T> {
    let n = grad_out.len() / channels;
    let mut grad_in = vec![T::zero(); grad_out.len()];
    for c in 0..channels {
        let dy = &grad_out[c * n..(c + 1) * n];
        let xh = &cache.xhat[c * n..(c + 1) * n];
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for (d, h) in dy.iter().zip(xh) {
            let d = d.as_f64();
            sum_dy += d;
            sum_dy_xh += d * h.as_f64();
        }
        grad_beta[c] += T::of(sum_dy);
        grad_gamma[c] += T::of(sum_dy_xh);
        let g = gamma[c].as_f64();
        let mean_dxh = g * sum_dy / n as f64;
        let mean_dxh_xh = g * sum_dy_xh / n as f64;
        let istd = cache.inv_std[c];
        let (gs, a, b) = (
            T::of(g * istd),
            T::of(mean_dxh * istd),
            T::of(mean_dxh_xh * istd),
        );
        for ((out, d), h) in grad_in[c * n..(c + 1) * n].iter_mut().zip(dy).zip(xh) {
            *out = gs * *d - a - *h * b;
        }
    }
    grad_in
}

pub fn leaky_relu_inplace<T: Real>(x: &mut [T], slope: T) {
    for v in x.iter_mut() {
        if *v <= T::zero() {
            *v = *v * slope;
        }
    }
}

/// Multiplies `grad` by the derivative, read off the activation output.
pub fn leaky_relu_backward_inplace<T: Real>(grad: &mut [T], output: &[T], slope: T) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = *g * slope;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (*seed >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    /// Direct seven-loop convolution used as an oracle.
    fn conv_naive(
        input: &[f64],
        cin: usize,
        dims: [usize; 3],
        w: &[f64],
        cout: usize,
        stride: usize,
    ) -> Vec<f64> {
        let od = conv_out_dims(dims, stride);
        let mut out = vec![0.0; cout * voxels(od)];
        for co in 0..cout {
            for oz in 0..od[2] {
                for oy in 0..od[1] {
                    for ox in 0..od[0] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        let iy = (oy * stride + ky) as isize - 1;
                                        let iz = (oz * stride + kz) as isize - 1;
                                        if ix < 0 || iy < 0 || iz < 0 {
                                            continue;
                                        }
                                        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                                        if ix >= dims[0] || iy >= dims[1] || iz >= dims[2] {
                                            continue;
                                        }
                                        acc += w[co * cin * 27 + ci * 27 + kz * 9 + ky * 3 + kx]
                                            * input[ci * voxels(dims)
                                                + ix
                                                + dims[0] * (iy + dims[1] * iz)];
                                    }
                                }
                            }
                        }
                        out[co * voxels(od) + ox + od[0] * (oy + od[1] * oz)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut s = 11;
        for (dims, stride) in [([5, 4, 3], 1), ([6, 4, 8], 2), ([1, 2, 3], 1)] {
            let (cin, cout) = (2, 3);
            let input: Vec<f64> = (0..cin * voxels(dims)).map(|_| lcg(&mut s)).collect();
            let w: Vec<f64> = (0..cout * cin * 27).map(|_| lcg(&mut s)).collect();
            let mut cols = Vec::new();
            let (got, _) =
                conv3d_forward_gemm(&input, cin, dims, &w, None, cout, stride, &mut cols);
            if stride == 1 {
                let d = direct::forward(&input, cin, dims, &w, None, cout);
                for (a, b) in d.iter().zip(&got) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            let want = conv_naive(&input, cin, dims, &w, cout, stride);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direct_and_gemm_paths_agree() {
        let mut s = 21;
        for dims in [[5, 4, 3], [1, 1, 1], [8, 2, 6]] {
            let (cin, cout) = (3, 2);
            let x: Vec<f64> = (0..cin * voxels(dims)).map(|_| lcg(&mut s)).collect();
            let w: Vec<f64> = (0..cout * cin * 27).map(|_| lcg(&mut s)).collect();
            let b = [0.25, -0.5];
            let dy: Vec<f64> = (0..cout * voxels(dims)).map(|_| lcg(&mut s)).collect();
            let mut cols = Vec::new();
            let (y1, _) = conv3d_forward_gemm(&x, cin, dims, &w, Some(&b), cout, 1, &mut cols);
            let y2 = direct::forward(&x, cin, dims, &w, Some(&b), cout);
            for (a, c) in y1.iter().zip(&y2) {
                assert!((a - c).abs() < 1e-12);
            }
            let (mut gw1, mut gw2) = (vec![0.0; w.len()], vec![0.0; w.len()]);
            let (mut gb1, mut gb2) = (vec![0.0; 2], vec![0.0; 2]);
            let dx1 = conv3d_backward_gemm(
                &x,
                cin,
                dims,
                &w,
                cout,
                1,
                &dy,
                &mut gw1,
                Some(&mut gb1),
                true,
                &mut cols,
            )
            .unwrap();
            let dx2 =
                direct::backward(&x, cin, dims, &w, cout, &dy, &mut gw2, Some(&mut gb2), true)
                    .unwrap();
            for (a, c) in dx1
                .iter()
                .zip(&dx2)
                .chain(gw1.iter().zip(&gw2))
                .chain(gb1.iter().zip(&gb2))
            {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let dims = [6, 5, 4];
        let mut s = 3;
        let input: Vec<f32> = (0..voxels(dims)).map(|_| lcg(&mut s) as f32).collect();
        let mut w = vec![0.0f32; 27];
        w[13] = 1.0;
        let mut cols = Vec::new();
        let (out, od) = conv3d_forward(&input, 1, dims, &w, Some(&[0.0]), 1, 1, &mut cols);
        assert_eq!(od, dims);
        assert_eq!(out, input);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut s = 5;
        for (dims, stride) in [([4, 3, 5], 1), ([4, 6, 2], 2)] {
            let cin = 2;
            let x: Vec<f64> = (0..cin * voxels(dims)).map(|_| lcg(&mut s)).collect();
            let mut cols = Vec::new();
            im2col(&x, cin, dims, stride, &mut cols);
            let c: Vec<f64> = (0..cols.len()).map(|_| lcg(&mut s)).collect();
            let mut back = vec![0.0; x.len()];
            col2im(&c, cin, dims, stride, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn upconv_places_blocks() {
        // one input voxel, one channel in/out: output block equals weights + bias
        let w: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let (out, od) = upconv_forward(&[2.0], 1, [1, 1, 1], &w, &[0.5], 1);
        assert_eq!(od, [2, 2, 2]);
        let expect: Vec<f64> = (0..8).map(|i| 2.0 * i as f64 + 0.5).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn norm_output_is_standardised() {
        let mut s = 9;
        let mut x: Vec<f64> = (0..2 * 100).map(|_| 3.0 + 5.0 * lcg(&mut s)).collect();
        let cache = instance_norm_forward(&mut x, 2, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        for c in 0..2 {
            let h = &cache.xhat[c * 100..(c + 1) * 100];
            let m: f64 = h.iter().sum::<f64>() / 100.0;
            let v: f64 = h.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 100.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
