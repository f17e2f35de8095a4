//! 2-D convolution: full cross-correlation, depthwise, and the
//! depthwise-separable block (depthwise 3x3, pointwise 1x1, batch norm,
//! ReLU).
//!
//! The stride-1 kernels decompose the convolution into per-tap shifted-row
//! AXPY and dot operations over contiguous slices, which autovectorize. Work
//! is split across disjoint output planes, so parallel and sequential runs
//! produce identical bytes.

use rand::Rng;

use super::layers::{BatchNorm2d, Relu};
use super::tensor::{axpy, dot, Param, Scalar, Tensor};
use super::{Layer, NnError};
use crate::parallel;

/// Index window over which `dst[i]` and `src[i + shift]` are both valid:
/// returns `(start, end)` with `start <= end`.
fn overlap(dst_len: usize, src_len: usize, shift: isize) -> (usize, usize) {
    let start = (-shift).max(0) as usize;
    let end = (dst_len as isize).min(src_len as isize - shift).max(0) as usize;
    (start.min(end), end)
}

/// Full 2-D cross-correlation, weight shape (out, in, k, k), square odd
/// kernels, zero padding `k/2` ("same" for stride 1).
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    saved_input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "square odd kernels only");
        assert!(stride >= 1);
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::new(Tensor::uniform(
                &[out_channels, in_channels, kernel, kernel],
                bound,
                rng,
            )),
            bias: bias.then(|| Param::new(Tensor::uniform(&[out_channels], bound, rng))),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            saved_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, input: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let (n, cin, h, w) = input.dims4();
        if cin != self.in_channels {
            return Err(NnError::shape(
                "conv2d",
                format!("input has {cin} channels, layer expects {}", self.in_channels),
            ));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(NnError::shape(
                "conv2d",
                format!("spatial dims {h}x{w} smaller than kernel {}", self.kernel),
            ));
        }
        let (oh, ow) = self.out_spatial(h, w);
        let (k, p, s) = (self.kernel, self.pad as isize, self.stride);
        let (cout, plane_in, plane_out) = (self.out_channels, h * w, oh * ow);
        let x = input.as_slice();
        let wv = self.weight.value.as_slice();
        let bias: Option<Vec<T>> = self.bias.as_ref().map(|b| b.value.as_slice().to_vec());
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        parallel::for_each_chunk_mut(out.as_mut_slice(), plane_out, |idx, oplane| {
            let (smp, oc) = (idx / cout, idx % cout);
            if let Some(b) = &bias {
                oplane.fill(b[oc]);
            }
            for ic in 0..cin {
                let iplane = &x[(smp * cin + ic) * plane_in..(smp * cin + ic + 1) * plane_in];
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = wv[((oc * cin + ic) * k + dy) * k + dx];
                        let (sy, sx) = (dy as isize - p, dx as isize - p);
                        if s == 1 {
                            let (y0, y1) = overlap(oh, h, sy);
                            let (x0, x1) = overlap(ow, w, sx);
                            for oy in y0..y1 {
                                let iy = (oy as isize + sy) as usize;
                                axpy(
                                    &mut oplane[oy * ow + x0..oy * ow + x1],
                                    wt,
                                    &iplane[(iy * w) as usize + (x0 as isize + sx) as usize
                                        ..iy * w + (x1 as isize + sx) as usize],
                                );
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * s) as isize + sy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * s) as isize + sx;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    oplane[oy * ow + ox] +=
                                        wt * iplane[iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
        self.saved_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let input = self.saved_input.as_ref().expect("conv2d backward before forward");
        let (n, cin, h, w) = input.dims4();
        let (oh, ow) = self.out_spatial(h, w);
        assert_eq!(
            grad_out.shape(),
            &[n, self.out_channels, oh, ow],
            "conv2d grad shape"
        );
        let (k, p, s) = (self.kernel, self.pad as isize, self.stride);
        let (cout, plane_in, plane_out) = (self.out_channels, h * w, oh * ow);
        let x = input.as_slice();
        let g = grad_out.as_slice();
        let wv = self.weight.value.as_slice();

        let mut grad_in = Tensor::zeros(input.shape());
        parallel::for_each_chunk_mut(grad_in.as_mut_slice(), plane_in, |idx, giplane| {
            let (smp, ic) = (idx / cin, idx % cin);
            for oc in 0..cout {
                let gplane = &g[(smp * cout + oc) * plane_out..(smp * cout + oc + 1) * plane_out];
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = wv[((oc * cin + ic) * k + dy) * k + dx];
                        if s == 1 {
                            // Transposed shift: gin[i] += w * gout[i + p - d].
                            let (sy, sx) = (p - dy as isize, p - dx as isize);
                            let (y0, y1) = overlap(h, oh, sy);
                            let (x0, x1) = overlap(w, ow, sx);
                            for iy in y0..y1 {
                                let oy = (iy as isize + sy) as usize;
                                axpy(
                                    &mut giplane[iy * w + x0..iy * w + x1],
                                    wt,
                                    &gplane[oy * ow + (x0 as isize + sx) as usize
                                        ..oy * ow + (x1 as isize + sx) as usize],
                                );
                            }
                        } else {
                            let (sy, sx) = (dy as isize - p, dx as isize - p);
                            for oy in 0..oh {
                                let iy = (oy * s) as isize + sy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * s) as isize + sx;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    giplane[iy as usize * w + ix as usize] +=
                                        wt * gplane[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        });

        let ktaps = cin * k * k;
        parallel::for_each_chunk_mut(self.weight.grad.as_mut_slice(), ktaps, |oc, wg| {
            for smp in 0..n {
                let gplane = &g[(smp * cout + oc) * plane_out..(smp * cout + oc + 1) * plane_out];
                for ic in 0..cin {
                    let iplane =
                        &x[(smp * cin + ic) * plane_in..(smp * cin + ic + 1) * plane_in];
                    for dy in 0..k {
                        for dx in 0..k {
                            let (sy, sx) = (dy as isize - p, dx as isize - p);
                            let mut acc = T::zero();
                            if s == 1 {
                                let (y0, y1) = overlap(oh, h, sy);
                                let (x0, x1) = overlap(ow, w, sx);
                                for oy in y0..y1 {
                                    let iy = (oy as isize + sy) as usize;
                                    acc += dot(
                                        &gplane[oy * ow + x0..oy * ow + x1],
                                        &iplane[iy * w + (x0 as isize + sx) as usize
                                            ..iy * w + (x1 as isize + sx) as usize],
                                    );
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = (oy * s) as isize + sy;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * s) as isize + sx;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += gplane[oy * ow + ox]
                                            * iplane[iy as usize * w + ix as usize];
                                    }
                                }
                            }
                            wg[(ic * k + dy) * k + dx] += acc;
                        }
                    }
                }
            }
        });

        if let Some(bias) = &mut self.bias {
            let bg = bias.grad.as_mut_slice();
            for smp in 0..n {
                for oc in 0..cout {
                    let gplane =
                        &g[(smp * cout + oc) * plane_out..(smp * cout + oc + 1) * plane_out];
                    let mut acc = T::zero();
                    for &v in gplane {
                        acc += v;
                    }
                    bg[oc] += acc;
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

/// Per-channel (grouped, groups = channels) 3x3 convolution, stride 1, same
/// padding, no bias. Weight shape (channels, k, k).
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d<T> {
    pub weight: Param<T>,
    channels: usize,
    kernel: usize,
    pad: usize,
    saved_input: Option<Tensor<T>>,
}

impl<T: Scalar> DepthwiseConv2d<T> {
    pub fn new(channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "square odd kernels only");
        let bound = 1.0 / ((kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::new(Tensor::uniform(&[channels, kernel, kernel], bound, rng)),
            channels,
            kernel,
            pad: kernel / 2,
            saved_input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for DepthwiseConv2d<T> {
    fn forward(&mut self, input: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let (_, c, h, w) = input.dims4();
        if c != self.channels {
            return Err(NnError::shape(
                "depthwise_conv",
                format!("input has {c} channels, layer expects {}", self.channels),
            ));
        }
        let (k, p, plane) = (self.kernel, self.pad as isize, h * w);
        let x = input.as_slice();
        let wv = self.weight.value.as_slice();
        let mut out = Tensor::zeros(input.shape());
        parallel::for_each_chunk_mut(out.as_mut_slice(), plane, |idx, oplane| {
            let ch = idx % c;
            let iplane = &x[idx * plane..(idx + 1) * plane];
            for dy in 0..k {
                for dx in 0..k {
                    let wt = wv[(ch * k + dy) * k + dx];
                    let (sy, sx) = (dy as isize - p, dx as isize - p);
                    let (y0, y1) = overlap(h, h, sy);
                    let (x0, x1) = overlap(w, w, sx);
                    for oy in y0..y1 {
                        let iy = (oy as isize + sy) as usize;
                        axpy(
                            &mut oplane[oy * w + x0..oy * w + x1],
                            wt,
                            &iplane[iy * w + (x0 as isize + sx) as usize
                                ..iy * w + (x1 as isize + sx) as usize],
                        );
                    }
                }
            }
        });
        self.saved_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let input = self
            .saved_input
            .as_ref()
            .expect("depthwise backward before forward");
        let (n, c, h, w) = input.dims4();
        assert_eq!(grad_out.shape(), input.shape(), "depthwise grad shape");
        let (k, p, plane) = (self.kernel, self.pad as isize, h * w);
        let x = input.as_slice();
        let g = grad_out.as_slice();
        let wv = self.weight.value.as_slice();

        let mut grad_in = Tensor::zeros(input.shape());
        parallel::for_each_chunk_mut(grad_in.as_mut_slice(), plane, |idx, giplane| {
            let ch = idx % c;
            let gplane = &g[idx * plane..(idx + 1) * plane];
            for dy in 0..k {
                for dx in 0..k {
                    let wt = wv[(ch * k + dy) * k + dx];
                    let (sy, sx) = (p - dy as isize, p - dx as isize);
                    let (y0, y1) = overlap(h, h, sy);
                    let (x0, x1) = overlap(w, w, sx);
                    for iy in y0..y1 {
                        let oy = (iy as isize + sy) as usize;
                        axpy(
                            &mut giplane[iy * w + x0..iy * w + x1],
                            wt,
                            &gplane[oy * w + (x0 as isize + sx) as usize
                                ..oy * w + (x1 as isize + sx) as usize],
                        );
                    }
                }
            }
        });

        parallel::for_each_chunk_mut(self.weight.grad.as_mut_slice(), k * k, |ch, wg| {
            for smp in 0..n {
                let base = (smp * c + ch) * plane;
                let gplane = &g[base..base + plane];
                let iplane = &x[base..base + plane];
                for dy in 0..k {
                    for dx in 0..k {
                        let (sy, sx) = (dy as isize - p, dx as isize - p);
                        let (y0, y1) = overlap(h, h, sy);
                        let (x0, x1) = overlap(w, w, sx);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = (oy as isize + sy) as usize;
                            acc += dot(
                                &gplane[oy * w + x0..oy * w + x1],
                                &iplane[iy * w + (x0 as isize + sx) as usize
                                    ..iy * w + (x1 as isize + sx) as usize],
                            );
                        }
                        wg[dy * k + dx] += acc;
                    }
                }
            }
        });
        grad_in
    }

    fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        visit(&format!("{prefix}.weight"), &mut self.weight);
    }
}

/// Depthwise-separable block: depthwise 3x3 (groups = channels, no bias),
/// pointwise 1x1 (no bias), batch norm, ReLU. Weight parameter count is
/// `9 Cin + Cin Cout` plus the two affine vectors of the norm.
#[derive(Debug, Clone)]
pub struct Dsc<T> {
    pub depthwise: DepthwiseConv2d<T>,
    pub pointwise: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub relu: Relu<T>,
}

impl<T: Scalar> Dsc<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            depthwise: DepthwiseConv2d::new(in_channels, 3, rng),
            pointwise: Conv2d::new(in_channels, out_channels, 1, 1, false, rng),
            bn: BatchNorm2d::new(out_channels),
            relu: Relu::new(),
        }
    }

    /// The convolution stages alone (no norm, no activation).
    pub fn convolve(&mut self, input: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        let y = self.depthwise.forward(input, training)?;
        self.pointwise.forward(&y, training)
    }
}

impl<T: Scalar> Layer<T> for Dsc<T> {
    fn forward(&mut self, input: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError> {
        let y = self.convolve(input, training)?;
        let y = self.bn.forward(&y, training)?;
        self.relu.forward(&y, training)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let g = self.relu.backward(grad_out);
        let g = self.bn.backward(&g);
        let g = self.pointwise.backward(&g);
        self.depthwise.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.depthwise.visit_params(&format!("{prefix}.dw"), visit);
        self.pointwise.visit_params(&format!("{prefix}.pw"), visit);
        self.bn.visit_params(&format!("{prefix}.bn"), visit);
    }

    fn visit_buffers(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), visit);
    }
}
