//! Convolutional block attention: channel attention from spatially pooled
//! descriptors through a shared bottleneck MLP, then spatial attention from
//! channel-pooled maps through a 7x7 convolution. Both gates are sigmoid
//! multipliers, so the backward pass applies the product rule through each
//! gate and routes pooling gradients back to their sources (mean spreads
//! uniformly, max routes to the recorded argmax).

use rand::Rng;

use super::conv::Conv2d;
use super::layers::{sigmoid, Linear, Relu};
use super::tensor::{axpy, Param, Scalar, Tensor};
use super::{Layer, NnError};
use crate::parallel;

#[derive(Debug, Clone)]
struct CbamSaved<T> {
    x: Tensor<T>,
    /// Channel gate per (sample, channel).
    sc: Vec<T>,
    /// Input scaled by the channel gate.
    y: Tensor<T>,
    /// Spatial gate per (sample, pixel).
    ss: Vec<T>,
    /// Flattened plane argmax per (sample, channel) for the channel branch.
    plane_argmax: Vec<usize>,
    /// Channel argmax per (sample, pixel) for the spatial branch.
    channel_argmax: Vec<usize>,
}

/// Channel + spatial attention block. Output shape equals input shape.
#[derive(Debug, Clone)]
pub struct Cbam<T> {
    pub fc1: Linear<T>,
    pub relu: Relu<T>,
    pub fc2: Linear<T>,
    pub spatial: Conv2d<T>,
    channels: usize,
    saved: Option<CbamSaved<T>>,
}

impl<T: Scalar> Cbam<T> {
    /// `reduction` must divide `channels`; the shared MLP bottleneck has
    /// `channels / reduction` units.
    pub fn new(channels: usize, reduction: usize, spatial_kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(
            reduction >= 1 && channels % reduction == 0,
            "reduction {reduction} must divide channels {channels}"
        );
        let hidden = channels / reduction;
        Self {
            fc1: Linear::new(channels, hidden, true, rng),
            relu: Relu::new(),
            fc2: Linear::new(hidden, channels, true, rng),
            spatial: Conv2d::new(2, 1, spatial_kernel, 1, true, rng),
            channels,
            saved: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Cbam<T> {
    fn forward(&mut self, input: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        let (n, c, h, w) = input.dims4();
        if c != self.channels {
            return Err(NnError::shape(
                "cbam",
                format!("input has {c} channels, block expects {}", self.channels),
            ));
        }
        let plane = h * w;
        let x = input.as_slice();

        // Spatial average and max per (sample, channel), interleaved as
        // rows [avg_0, max_0, avg_1, max_1, ...] for one shared-MLP pass.
        let pooled_rows: Vec<(T, T, usize)> = parallel::map_indexed(n * c, |idx| {
            let p = &x[idx * plane..(idx + 1) * plane];
            let mut sum = T::zero();
            let mut best = p[0];
            let mut arg = 0usize;
            for (i, &v) in p.iter().enumerate() {
                sum += v;
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            (sum / T::from_f64(plane as f64), best, arg)
        });
        let mut pooled = Tensor::zeros(&[2 * n, c]);
        let mut plane_argmax = vec![0usize; n * c];
        {
            let pr = pooled.as_mut_slice();
            for (idx, &(avg, mx, arg)) in pooled_rows.iter().enumerate() {
                let (smp, ch) = (idx / c, idx % c);
                pr[2 * smp * c + ch] = avg;
                pr[(2 * smp + 1) * c + ch] = mx;
                plane_argmax[idx] = arg;
            }
        }
        let hid = self.fc1.forward(&pooled, training)?;
        let hid = self.relu.forward(&hid, training)?;
        let mlp = self.fc2.forward(&hid, training)?;
        let mlp = mlp.as_slice();
        let sc: Vec<T> = (0..n * c)
            .map(|idx| {
                let (smp, ch) = (idx / c, idx % c);
                sigmoid(mlp[2 * smp * c + ch] + mlp[(2 * smp + 1) * c + ch])
            })
            .collect();

        let mut y = Tensor::zeros(input.shape());
        parallel::for_each_chunk_mut(y.as_mut_slice(), plane, |idx, yplane| {
            let gate = sc[idx];
            let src = &x[idx * plane..(idx + 1) * plane];
            for (o, &v) in yplane.iter_mut().zip(src) {
                *o = v * gate;
            }
        });

        // Channel mean and max per pixel, stacked as a 2-channel image.
        let yv = y.as_slice();
        let mut stack = Tensor::zeros(&[n, 2, h, w]);
        let mut channel_argmax = vec![0usize; n * plane];
        {
            let planes: Vec<(Vec<T>, Vec<T>, Vec<usize>)> = parallel::map_indexed(n, |smp| {
                let base = smp * c * plane;
                let mut mean = vec![T::zero(); plane];
                let mut mx = yv[base..base + plane].to_vec();
                let mut arg = vec![0usize; plane];
                for ch in 0..c {
                    let p = &yv[base + ch * plane..base + (ch + 1) * plane];
                    for (i, &v) in p.iter().enumerate() {
                        mean[i] += v;
                        if ch > 0 && v > mx[i] {
                            mx[i] = v;
                            arg[i] = ch;
                        }
                    }
                }
                let inv = T::one() / T::from_f64(c as f64);
                for m in &mut mean {
                    *m = *m * inv;
                }
                (mean, mx, arg)
            });
            let st = stack.as_mut_slice();
            for (smp, (mean, mx, arg)) in planes.into_iter().enumerate() {
                st[smp * 2 * plane..smp * 2 * plane + plane].copy_from_slice(&mean);
                st[smp * 2 * plane + plane..(smp + 1) * 2 * plane].copy_from_slice(&mx);
                channel_argmax[smp * plane..(smp + 1) * plane].copy_from_slice(&arg);
            }
        }
        let u = self.spatial.forward(&stack, training)?;
        let ss: Vec<T> = u.as_slice().iter().map(|&v| sigmoid(v)).collect();

        let mut out = Tensor::zeros(input.shape());
        parallel::for_each_chunk_mut(out.as_mut_slice(), plane, |idx, oplane| {
            let smp = idx / c;
            let src = &yv[idx * plane..(idx + 1) * plane];
            let gate = &ss[smp * plane..(smp + 1) * plane];
            for i in 0..plane {
                oplane[i] = src[i] * gate[i];
            }
        });

        self.saved = Some(CbamSaved {
            x: input.clone(),
            sc,
            y,
            ss,
            plane_argmax,
            channel_argmax,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let saved = self.saved.as_ref().expect("cbam backward before forward");
        let (n, c, h, w) = saved.x.dims4();
        assert_eq!(grad_out.shape(), saved.x.shape(), "cbam grad shape");
        let plane = h * w;
        let g = grad_out.as_slice();
        let yv = saved.y.as_slice();
        let xv = saved.x.as_slice();

        // Through the spatial gate: z = y * ss.
        let dss: Vec<T> = parallel::map_indexed(n * plane, |pix| {
            let (smp, p) = (pix / plane, pix % plane);
            let mut acc = T::zero();
            for ch in 0..c {
                let off = (smp * c + ch) * plane + p;
                acc += g[off] * yv[off];
            }
            acc
        });
        let mut dy = Tensor::zeros(saved.x.shape());
        parallel::for_each_chunk_mut(dy.as_mut_slice(), plane, |idx, dyp| {
            let smp = idx / c;
            let gp = &g[idx * plane..(idx + 1) * plane];
            let gate = &saved.ss[smp * plane..(smp + 1) * plane];
            for i in 0..plane {
                dyp[i] = gp[i] * gate[i];
            }
        });

        // Through sigmoid and the 7x7 convolution back to the pooled stack.
        let du: Vec<T> = dss
            .iter()
            .zip(&saved.ss)
            .map(|(&d, &s)| d * s * (T::one() - s))
            .collect();
        let dstack = self.spatial.backward(&Tensor::from_vec(&[n, 1, h, w], du));
        let ds = dstack.as_slice();
        let inv_c = T::one() / T::from_f64(c as f64);
        parallel::for_each_chunk_mut(dy.as_mut_slice(), c * plane, |smp, dyn_| {
            let dmean = &ds[smp * 2 * plane..smp * 2 * plane + plane];
            let dmax = &ds[smp * 2 * plane + plane..(smp + 1) * 2 * plane];
            let args = &saved.channel_argmax[smp * plane..(smp + 1) * plane];
            for ch in 0..c {
                axpy(&mut dyn_[ch * plane..(ch + 1) * plane], inv_c, dmean);
            }
            for (i, (&dm, &ch)) in dmax.iter().zip(args).enumerate() {
                dyn_[ch * plane + i] += dm;
            }
        });

        // Through the channel gate: y = x * sc.
        let dyv = dy.as_slice();
        let dsc: Vec<T> = parallel::map_indexed(n * c, |idx| {
            let mut acc = T::zero();
            for i in 0..plane {
                acc += dyv[idx * plane + i] * xv[idx * plane + i];
            }
            acc
        });
        let mut dx = Tensor::zeros(saved.x.shape());
        parallel::for_each_chunk_mut(dx.as_mut_slice(), plane, |idx, dxp| {
            let gate = saved.sc[idx];
            let src = &dyv[idx * plane..(idx + 1) * plane];
            for (o, &v) in dxp.iter_mut().zip(src) {
                *o = v * gate;
            }
        });

        // Both MLP branches feed the same pre-sigmoid sum.
        let mut dmlp = Tensor::zeros(&[2 * n, c]);
        {
            let dm = dmlp.as_mut_slice();
            for idx in 0..n * c {
                let (smp, ch) = (idx / c, idx % c);
                let s = saved.sc[idx];
                let dv = dsc[idx] * s * (T::one() - s);
                dm[2 * smp * c + ch] = dv;
                dm[(2 * smp + 1) * c + ch] = dv;
            }
        }
        let dpooled = self.fc1.backward(&self.relu.backward(&self.fc2.backward(&dmlp)));
        let dp = dpooled.as_slice();
        let inv_plane = T::one() / T::from_f64(plane as f64);
        parallel::for_each_chunk_mut(dx.as_mut_slice(), plane, |idx, dxp| {
            let (smp, ch) = (idx / c, idx % c);
            let davg = dp[2 * smp * c + ch];
            let dmax = dp[(2 * smp + 1) * c + ch];
            let spread = davg * inv_plane;
            for v in dxp.iter_mut() {
                *v += spread;
            }
            dxp[saved.plane_argmax[idx]] += dmax;
        });
        dx
    }

    fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_params(&format!("{prefix}.fc1"), visit);
        self.fc2.visit_params(&format!("{prefix}.fc2"), visit);
        self.spatial.visit_params(&format!("{prefix}.spatial"), visit);
    }
}
