//! Dense layers: linear, batch normalization, ReLU, sigmoid, and the fused
//! linear + batch-norm + ReLU block used by the pillar encoder.

use rand::Rng;

use super::tensor::{axpy, dot, Param, Scalar, Tensor};
use super::{Layer, NnError};
use crate::parallel;

/// Fully connected layer, `y = x W^T + b`, weight shape (out, in).
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_features: usize,
    out_features: usize,
    saved_input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform init in `[-1/sqrt(in), 1/sqrt(in)]` for weight and bias.
    pub fn new(in_features: usize, out_features: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Param::new(Tensor::uniform(&[out_features, in_features], bound, rng)),
            bias: bias.then(|| Param::new(Tensor::uniform(&[out_features], bound, rng))),
            in_features,
            out_features,
            saved_input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, input: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let (rows, cols) = input.dims2();
        if cols != self.in_features {
            return Err(NnError::shape(
                "linear",
                format!("input has {cols} features, layer expects {}", self.in_features),
            ));
        }
        let out_f = self.out_features;
        let w = self.weight.value.as_slice();
        let b = self.bias.as_ref().map(|b| b.value.as_slice().to_vec());
        let x = input.as_slice();
        let mut out = Tensor::zeros(&[rows, out_f]);
        let in_f = self.in_features;
        parallel::for_each_chunk_mut(out.as_mut_slice(), out_f, |r, row_out| {
            let xr = &x[r * in_f..(r + 1) * in_f];
            for (o, slot) in row_out.iter_mut().enumerate() {
                let mut v = dot(&w[o * in_f..(o + 1) * in_f], xr);
                if let Some(b) = &b {
                    v += b[o];
                }
                *slot = v;
            }
        });
        self.saved_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let input = self.saved_input.as_ref().expect("linear backward before forward");
        let (rows, _) = input.dims2();
        assert_eq!(grad_out.shape(), &[rows, self.out_features], "linear grad shape");
        let (in_f, out_f) = (self.in_features, self.out_features);
        let x = input.as_slice();
        let g = grad_out.as_slice();
        let w = self.weight.value.as_slice();

        let mut grad_in = Tensor::zeros(&[rows, in_f]);
        parallel::for_each_chunk_mut(grad_in.as_mut_slice(), in_f, |r, row| {
            for o in 0..out_f {
                axpy(row, g[r * out_f + o], &w[o * in_f..(o + 1) * in_f]);
            }
        });

        parallel::for_each_chunk_mut(self.weight.grad.as_mut_slice(), in_f, |o, wrow| {
            for r in 0..rows {
                axpy(wrow, g[r * out_f + o], &x[r * in_f..(r + 1) * in_f]);
            }
        });
        if let Some(bias) = &mut self.bias {
            let bg = bias.grad.as_mut_slice();
            for r in 0..rows {
                for o in 0..out_f {
                    bg[o] += g[r * out_f + o];
                }
            }
        }
        grad_in
    }

    fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        visit(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            visit(&format!("{prefix}.bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
struct BnSaved<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    /// Elements normalized per channel.
    count: usize,
    training: bool,
}

/// Batch normalization over (N, C, H, W), statistics per channel.
///
/// Training mode normalizes with biased batch variance and updates running
/// statistics with `running = (1 - momentum) * running + momentum * batch`,
/// where the running variance uses the unbiased estimate. Inference
/// normalizes with the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
    channels: usize,
    saved: Option<BnSaved<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            eps: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
            channels,
            saved: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, input: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        let (n, c, h, w) = input.dims4();
        if c != self.channels {
            return Err(NnError::shape(
                "batch_norm",
                format!("input has {c} channels, layer expects {}", self.channels),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let x = input.as_slice();
        let channel_rows = |ch: usize| (0..n).map(move |s| (s * c + ch) * plane);

        // (mean, inv_std) per channel; each channel reduces sequentially.
        let stats: Vec<(T, T)> = if training {
            let per_channel = parallel::map_indexed(c, |ch| {
                let mut sum = T::zero();
                for off in channel_rows(ch) {
                    for &v in &x[off..off + plane] {
                        sum += v;
                    }
                }
                let mean = sum / T::from_f64(count as f64);
                let mut ss = T::zero();
                for off in channel_rows(ch) {
                    for &v in &x[off..off + plane] {
                        let d = v - mean;
                        ss += d * d;
                    }
                }
                let var = ss / T::from_f64(count as f64);
                (mean, var)
            });
            let rm = self.running_mean.as_mut_slice();
            let rv = self.running_var.as_mut_slice();
            let unbias = T::from_f64(count as f64 / (count.max(2) - 1) as f64);
            for (ch, &(mean, var)) in per_channel.iter().enumerate() {
                rm[ch] = (T::one() - self.momentum) * rm[ch] + self.momentum * mean;
                rv[ch] = (T::one() - self.momentum) * rv[ch] + self.momentum * var * unbias;
            }
            per_channel
                .into_iter()
                .map(|(mean, var)| (mean, T::one() / (var + self.eps).sqrt()))
                .collect()
        } else {
            let rm = self.running_mean.as_slice();
            let rv = self.running_var.as_slice();
            (0..c)
                .map(|ch| (rm[ch], T::one() / (rv[ch] + self.eps).sqrt()))
                .collect()
        };

        let mut x_hat = Tensor::zeros(input.shape());
        parallel::for_each_chunk_mut(x_hat.as_mut_slice(), plane, |idx, chunk| {
            let ch = idx % c;
            let (mean, inv_std) = stats[ch];
            let src = &x[idx * plane..(idx + 1) * plane];
            for (o, &v) in chunk.iter_mut().zip(src) {
                *o = (v - mean) * inv_std;
            }
        });
        let gamma = self.gamma.value.as_slice();
        let beta = self.beta.value.as_slice();
        let xh = x_hat.as_slice();
        let mut out = Tensor::zeros(input.shape());
        parallel::for_each_chunk_mut(out.as_mut_slice(), plane, |idx, chunk| {
            let ch = idx % c;
            let (g, b) = (gamma[ch], beta[ch]);
            let src = &xh[idx * plane..(idx + 1) * plane];
            for (o, &v) in chunk.iter_mut().zip(src) {
                *o = g * v + b;
            }
        });
        self.saved = Some(BnSaved {
            x_hat,
            inv_std: stats.iter().map(|&(_, s)| s).collect(),
            count,
            training,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let saved = self.saved.as_ref().expect("batch_norm backward before forward");
        let (n, c, h, w) = grad_out.dims4();
        assert_eq!(grad_out.shape(), saved.x_hat.shape(), "batch_norm grad shape");
        let plane = h * w;
        let g = grad_out.as_slice();
        let xh = saved.x_hat.as_slice();

        // Per channel: sum(dy) and sum(dy * x_hat), sequential reduction.
        let sums: Vec<(T, T)> = parallel::map_indexed(c, |ch| {
            let mut s = T::zero();
            let mut sx = T::zero();
            for smp in 0..n {
                let off = (smp * c + ch) * plane;
                for i in 0..plane {
                    let gv = g[off + i];
                    s += gv;
                    sx += gv * xh[off + i];
                }
            }
            (s, sx)
        });
        {
            let gg = self.gamma.grad.as_mut_slice();
            let gb = self.beta.grad.as_mut_slice();
            for (ch, &(s, sx)) in sums.iter().enumerate() {
                gb[ch] += s;
                gg[ch] += sx;
            }
        }

        let gamma = self.gamma.value.as_slice();
        let m = T::from_f64(saved.count as f64);
        let mut grad_in = Tensor::zeros(grad_out.shape());
        let inv_std = &saved.inv_std;
        let training = saved.training;
        parallel::for_each_chunk_mut(grad_in.as_mut_slice(), plane, |idx, chunk| {
            let ch = idx % c;
            let scale = gamma[ch] * inv_std[ch];
            let off = idx * plane;
            if training {
                let (s, sx) = sums[ch];
                let (mean_g, mean_gx) = (s / m, sx / m);
                for (i, o) in chunk.iter_mut().enumerate() {
                    *o = scale * (g[off + i] - mean_g - xh[off + i] * mean_gx);
                }
            } else {
                for (i, o) in chunk.iter_mut().enumerate() {
                    *o = scale * g[off + i];
                }
            }
        });
        grad_in
    }

    fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        visit(&format!("{prefix}.gamma"), &mut self.gamma);
        visit(&format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        visit(&format!("{prefix}.running_mean"), &mut self.running_mean);
        visit(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

/// Batch normalization over (rows, features): the rank-2 view of
/// [`BatchNorm2d`] with one statistic per feature.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<T> {
    pub inner: BatchNorm2d<T>,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(features: usize) -> Self {
        Self {
            inner: BatchNorm2d::new(features),
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm1d<T> {
    fn forward(&mut self, input: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        let (rows, cols) = input.dims2();
        let as4 = input.clone().reshape(&[rows, cols, 1, 1]);
        Ok(self.inner.forward(&as4, training)?.reshape(&[rows, cols]))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let (rows, cols) = grad_out.dims2();
        let as4 = grad_out.clone().reshape(&[rows, cols, 1, 1]);
        self.inner.backward(&as4).reshape(&[rows, cols])
    }

    fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.inner.visit_params(prefix, visit);
    }

    fn visit_buffers(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.inner.visit_buffers(prefix, visit);
    }
}

/// Rectified linear unit. The gradient at exactly zero is zero.
#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    saved_out: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { saved_out: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, input: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
        self.saved_out = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let y = self.saved_out.as_ref().expect("relu backward before forward");
        assert_eq!(grad_out.shape(), y.shape(), "relu grad shape");
        let mut grad_in = grad_out.clone();
        for (g, &v) in grad_in.as_mut_slice().iter_mut().zip(y.as_slice()) {
            if v <= T::zero() {
                *g = T::zero();
            }
        }
        grad_in
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Elementwise sigmoid layer.
#[derive(Debug, Clone, Default)]
pub struct SigmoidGate<T> {
    saved_out: Option<Tensor<T>>,
}

impl<T: Scalar> SigmoidGate<T> {
    pub fn new() -> Self {
        Self { saved_out: None }
    }
}

impl<T: Scalar> Layer<T> for SigmoidGate<T> {
    fn forward(&mut self, input: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let out = input.map(sigmoid);
        self.saved_out = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let y = self.saved_out.as_ref().expect("sigmoid backward before forward");
        assert_eq!(grad_out.shape(), y.shape(), "sigmoid grad shape");
        let mut grad_in = grad_out.clone();
        for (g, &v) in grad_in.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *g = *g * v * (T::one() - v);
        }
        grad_in
    }
}

/// `relu(batch_norm(linear(x)))`, the per-point encoder block.
#[derive(Debug, Clone)]
pub struct LinearBnRelu<T> {
    pub linear: Linear<T>,
    pub bn: BatchNorm1d<T>,
    pub relu: Relu<T>,
}

impl<T: Scalar> LinearBnRelu<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(in_features, out_features, true, rng),
            bn: BatchNorm1d::new(out_features),
            relu: Relu::new(),
        }
    }
}

impl<T: Scalar> Layer<T> for LinearBnRelu<T> {
    fn forward(&mut self, input: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        let y = self.linear.forward(input, training)?;
        let y = self.bn.forward(&y, training)?;
        self.relu.forward(&y, training)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let g = self.relu.backward(grad_out);
        let g = self.bn.backward(&g);
        self.linear.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.linear.visit_params(&format!("{prefix}.linear"), visit);
        self.bn.visit_params(&format!("{prefix}.bn"), visit);
    }

    fn visit_buffers(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), visit);
    }
}
