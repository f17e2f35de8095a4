//! Spatial resampling: 2x2 max-pooling and bilinear x2 upsampling.

use super::tensor::{Scalar, Tensor};
use super::{Layer, NnError};
use crate::parallel;

/// 2x2 max-pool, stride 2. The gradient routes to the argmax element; ties
/// go to the first element in scan order.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    saved: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self { saved: None }
    }
}

impl<T: Scalar> Layer<T> for MaxPool2 {
    fn forward(&mut self, input: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let (n, c, h, w) = input.dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::shape(
                "maxpool2",
                format!("spatial dims {h}x{w} not divisible by 2"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = input.as_slice();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        {
            let o = out.as_mut_slice();
            let am = &mut argmax;
            // Planes are independent; the inner scan is fixed-order.
            let results = parallel::map_indexed(n * c, |idx| {
                let iplane = &x[idx * h * w..(idx + 1) * h * w];
                let mut vals = Vec::with_capacity(oh * ow);
                let mut args = Vec::with_capacity(oh * ow);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = (2 * oy) * w + 2 * ox;
                        let mut best = iplane[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = (2 * oy + dy) * w + 2 * ox + dx;
                            if iplane[i] > best {
                                best = iplane[i];
                                best_idx = i;
                            }
                        }
                        vals.push(best);
                        args.push(idx * h * w + best_idx);
                    }
                }
                (vals, args)
            });
            for (idx, (vals, args)) in results.into_iter().enumerate() {
                o[idx * oh * ow..(idx + 1) * oh * ow].copy_from_slice(&vals);
                am[idx * oh * ow..(idx + 1) * oh * ow].copy_from_slice(&args);
            }
        }
        self.saved = Some((argmax, input.shape().to_vec()));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let (argmax, in_shape) = self.saved.as_ref().expect("maxpool backward before forward");
        assert_eq!(grad_out.len(), argmax.len(), "maxpool grad shape");
        let mut grad_in = Tensor::zeros(in_shape);
        let gi = grad_in.as_mut_slice();
        for (&src, &g) in argmax.iter().zip(grad_out.as_slice()) {
            gi[src] += g;
        }
        grad_in
    }
}

/// Bilinear x2 upsampling, align-corners = false: output pixel centers map
/// to source coordinates `(i + 0.5) / 2 - 0.5`, clamped at the borders.
#[derive(Debug, Clone, Default)]
pub struct UpsampleBilinear2 {
    saved_in_shape: Option<Vec<usize>>,
}

/// Per-output-index interpolation taps along one axis: indices i0 <= i1 and
/// the weight of i1 (i0 gets `1 - w`).
fn axis_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl UpsampleBilinear2 {
    pub fn new() -> Self {
        Self { saved_in_shape: None }
    }
}

impl<T: Scalar> Layer<T> for UpsampleBilinear2 {
    fn forward(&mut self, input: &Tensor<T>, _training: bool) -> Result<Tensor<T>, NnError> {
        let (n, c, h, w) = input.dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let ty = axis_taps(oh, h);
        let tx = axis_taps(ow, w);
        let x = input.as_slice();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        parallel::for_each_chunk_mut(out.as_mut_slice(), oh * ow, |idx, oplane| {
            let iplane = &x[idx * h * w..(idx + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let (wy, wx) = (T::from_f64(wy), T::from_f64(wx));
                    let top = iplane[y0 * w + x0] * (T::one() - wx) + iplane[y0 * w + x1] * wx;
                    let bot = iplane[y1 * w + x0] * (T::one() - wx) + iplane[y1 * w + x1] * wx;
                    oplane[oy * ow + ox] = top * (T::one() - wy) + bot * wy;
                }
            }
        });
        self.saved_in_shape = Some(input.shape().to_vec());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let in_shape = self
            .saved_in_shape
            .as_ref()
            .expect("upsample backward before forward");
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (oh, ow) = (2 * h, 2 * w);
        assert_eq!(grad_out.shape(), &[n, c, oh, ow], "upsample grad shape");
        let ty = axis_taps(oh, h);
        let tx = axis_taps(ow, w);
        let g = grad_out.as_slice();
        let mut grad_in = Tensor::zeros(in_shape);
        parallel::for_each_chunk_mut(grad_in.as_mut_slice(), h * w, |idx, giplane| {
            let gplane = &g[idx * oh * ow..(idx + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let gv = gplane[oy * ow + ox];
                    let (wy, wx) = (T::from_f64(wy), T::from_f64(wx));
                    giplane[y0 * w + x0] += gv * (T::one() - wy) * (T::one() - wx);
                    giplane[y0 * w + x1] += gv * (T::one() - wy) * wx;
                    giplane[y1 * w + x0] += gv * wy * (T::one() - wx);
                    giplane[y1 * w + x1] += gv * wy * wx;
                }
            }
        });
        grad_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::gradcheck::{check_layer, separated_input};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(31)
    }

    #[test]
    fn maxpool_constant_and_block() {
        let mut pool = MaxPool2::new();
        let x = Tensor::<f64>::filled(&[1, 1, 4, 4], 3.5);
        let y = pool.forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.as_slice().iter().all(|&v| v == 3.5));

        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = pool.forward(&x, false).unwrap();
        assert_eq!(y.as_slice(), &[4.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_index() {
        let mut pool = MaxPool2::new();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let _ = pool.forward(&x, true).unwrap();
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
        let gi = Layer::<f64>::backward(&mut pool, &g);
        assert_eq!(gi.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut pool = MaxPool2::new();
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(pool.forward(&x, false).is_err());
    }

    #[test]
    fn maxpool_gradients_away_from_ties() {
        let mut r = rng();
        let mut pool = MaxPool2::new();
        let x = separated_input(&[2, 2, 6, 6], 0.05, &mut r);
        let report = check_layer(&mut pool, &x, true, 1e-3, &mut r);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let mut up = UpsampleBilinear2::new();
        let x = Tensor::<f64>::filled(&[1, 2, 3, 3], 2.25);
        let y = up.forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        assert!(y.as_slice().iter().all(|&v| (v - 2.25).abs() < 1e-12));

        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![7.5]);
        let y = up.forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.as_slice().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn upsample_reproduces_affine_ramp() {
        // Bilinear interpolation is exact on affine images; border pixels
        // clamp, so check the interior.
        let (h, w) = (4, 4);
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.push(2.0 * y as f64 + 3.0 * x as f64 + 1.0);
            }
        }
        let x = Tensor::from_vec(&[1, 1, h, w], data);
        let mut up = UpsampleBilinear2::new();
        let y = up.forward(&x, false).unwrap();
        for oy in 1..2 * h - 1 {
            for ox in 1..2 * w - 1 {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                let want = 2.0 * sy + 3.0 * sx + 1.0;
                let got = y.as_slice()[oy * 2 * w + ox];
                assert!((got - want).abs() < 1e-12, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn upsample_gradients_match_finite_differences() {
        let mut r = rng();
        let mut up = UpsampleBilinear2::new();
        let x = Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut r);
        let report = check_layer(&mut up, &x, true, 1e-3, &mut r);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
