//! From-scratch 3D U-Net: layers, network wiring, checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod real;
pub mod unet;

pub use real::Real;
pub use unet::{
    backward_from_logits, forward, forward_recording_pattern, forward_traced, forward_train,
    forward_with_pattern, init_params, ActivationPattern, ForwardTrace, Grads, Layout, NetParams,
    NormKind, NormStat, ParamRole, ParamSpec, SampleCache, UNetConfig,
};

/// Dense `batch x channels x X x Y x Z` tensor, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    pub batch: usize,
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(batch: usize, channels: usize, dims: [usize; 3]) -> Self {
        Tensor5 {
            batch,
            channels,
            dims,
            data: vec![T::zero(); batch * channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        dims: [usize; 3],
        data: Vec<T>,
    ) -> crate::Result<Self> {
        let want = batch * channels * dims.iter().product::<usize>();
        if data.len() != want {
            return Err(crate::Error::Shape(format!(
                "expected {want} values for {batch}x{channels}x{dims:?}, got {}",
                data.len()
            )));
        }
        Ok(Tensor5 {
            batch,
            channels,
            dims,
            data,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.channels * self.voxels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.channels * self.voxels();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let n = self.voxels();
        &self.sample(b)[c * n..(c + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            batch: self.batch,
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Per-voxel softmax over channels, evaluated in f64 with the channel
/// maximum subtracted.
pub fn softmax_channels<T: Real>(logits: &Tensor5<T>) -> Tensor5<f64> {
    let n = logits.voxels();
    let c = logits.channels;
    let mut out = Tensor5::<f64>::zeros(logits.batch, c, logits.dims);
    let mut z = vec![0.0f64; c];
    for b in 0..logits.batch {
        let src = logits.sample(b);
        let dst = out.sample_mut(b);
        for i in 0..n {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                z[k] = src[k * n + i].as_f64();
                m = m.max(z[k]);
            }
            let mut s = 0.0;
            for v in z.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for k in 0..c {
                dst[k * n + i] = z[k] / s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sm(a: f64, b: f64) -> (f64, f64) {
        let t = Tensor5::from_vec(1, 2, [1, 1, 1], vec![a, b]).unwrap();
        let p = softmax_channels(&t);
        (p.data[0], p.data[1])
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(sm(0.0, 0.0), (0.5, 0.5));
        let (p, q) = sm(1000.0, 0.0);
        assert!(p == 1.0 && q >= 0.0 && q < 1e-300);
        let (p, q) = sm(3f64.ln(), 0.0);
        assert!((p - 0.75).abs() < 1e-9 && (q - 0.25).abs() < 1e-9);
    }
}
