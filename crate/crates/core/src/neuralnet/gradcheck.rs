//! Finite-difference gradient checking and reference oracles.
//!
//! Every layer's analytic backward pass is validated against central finite
//! differences in 64-bit: loss `L(x) = sum(w .* layer(x))` with fixed random
//! weights `w`, derivative estimated as `(L(x+h) - L(x-h)) / 2h`. The checks
//! cover the gradient with respect to the input and every trainable
//! parameter.

use rand::seq::SliceRandom;
use rand::Rng;

use super::tensor::{Scalar, Tensor};
use super::Layer;

/// Relative error with a small-magnitude floor: differences below the floor
/// are judged on an absolute scale, which keeps finite-difference roundoff
/// on near-zero gradients from dominating the report.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub compared: usize,
    /// (analytic, finite-difference) pair behind `max_rel_err`.
    pub worst: (f64, f64),
}

/// Input whose elements are a seeded shuffle of an arithmetic progression:
/// every pair of values differs by at least `gap`, so max-pool and max-over-
/// channel argmax choices cannot flip under finite-difference perturbation.
pub fn separated_input(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    vals.shuffle(rng);
    Tensor::from_vec(shape, vals)
}

/// Smallest absolute value in `t`; used to assert that pre-ReLU activations
/// stay clear of the kink before a finite-difference check.
pub fn min_abs_activation(t: &Tensor<f64>) -> f64 {
    t.as_slice().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn weighted_loss<T: Scalar>(out: &Tensor<T>, w: &Tensor<f64>) -> f64 {
    out.as_slice()
        .iter()
        .zip(w.as_slice())
        .map(|(&y, &wi)| y.to_f64() * wi)
        .sum()
}

fn forward_loss<L: Layer<f64>>(
    layer: &mut L,
    input: &Tensor<f64>,
    training: bool,
    w: &Tensor<f64>,
) -> f64 {
    let out = layer.forward(input, training).expect("gradcheck forward");
    weighted_loss(&out, w)
}

/// Adds `delta` to element `elem` of the `target`-th visited parameter.
fn nudge_param<L: Layer<f64>>(layer: &mut L, target: usize, elem: usize, delta: f64) {
    let mut k = 0usize;
    layer.visit_params("", &mut |_, p| {
        if k == target {
            p.value.as_mut_slice()[elem] += delta;
        }
        k += 1;
    });
}

/// Checks `layer`'s input and parameter gradients against central finite
/// differences at `step`. Returns the worst relative error observed.
pub fn check_layer<L: Layer<f64>>(
    layer: &mut L,
    input: &Tensor<f64>,
    training: bool,
    step: f64,
    rng: &mut impl Rng,
) -> CheckReport {
    let probe = layer.forward(input, training).expect("gradcheck probe forward");
    let w = Tensor::<f64>::uniform(probe.shape(), 1.0, rng);

    super::zero_grads(layer);
    let out = layer.forward(input, training).expect("gradcheck forward");
    let grad_in = layer.backward(&w);
    assert_eq!(out.shape(), w.shape());
    let mut param_grads: Vec<Vec<f64>> = Vec::new();
    layer.visit_params("", &mut |_, p| param_grads.push(p.grad.as_slice().to_vec()));

    let mut report = CheckReport {
        max_rel_err: 0.0,
        compared: 0,
        worst: (0.0, 0.0),
    };
    let mut note = |analytic: f64, fd: f64| {
        let e = rel_err(analytic, fd);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = (analytic, fd);
        }
        report.compared += 1;
    };

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.as_slice()[i];
        x.as_mut_slice()[i] = orig + step;
        let up = forward_loss(layer, &x, training, &w);
        x.as_mut_slice()[i] = orig - step;
        let down = forward_loss(layer, &x, training, &w);
        x.as_mut_slice()[i] = orig;
        note(grad_in.as_slice()[i], (up - down) / (2.0 * step));
    }

    for (pi, grads) in param_grads.iter().enumerate() {
        for (j, &analytic) in grads.iter().enumerate() {
            nudge_param(layer, pi, j, step);
            let up = forward_loss(layer, input, training, &w);
            nudge_param(layer, pi, j, -2.0 * step);
            let down = forward_loss(layer, input, training, &w);
            nudge_param(layer, pi, j, step);
            note(analytic, (up - down) / (2.0 * step));
        }
    }
    report
}

/// Reference convolution: explicit zero padding, six nested loops, and a
/// count of every multiply-accumulate executed. Oracle for both the fast
/// convolution kernels and the closed-form complexity accountant.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Tensor<f64>, u64) {
    let (n, cin, h, w) = input.dims4();
    let ws = weight.shape();
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], cin);
    assert_eq!(ws[2], ws[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0f64; n * cin * ph * pw];
    for s in 0..n {
        for c in 0..cin {
            for y in 0..h {
                for x in 0..w {
                    padded[((s * cin + c) * ph + y + pad) * pw + x + pad] =
                        input.as_slice()[((s * cin + c) * h + y) * w + x];
                }
            }
        }
    }
    let oh = (ph - k) / stride + 1;
    let ow = (pw - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let mut macs = 0u64;
    let o = out.as_mut_slice();
    let wv = weight.as_slice();
    for s in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += wv[((oc * cin + ic) * k + dy) * k + dx]
                                    * padded[((s * cin + ic) * ph + oy * stride + dy) * pw
                                        + ox * stride
                                        + dx];
                                macs += 1;
                            }
                        }
                    }
                    o[((s * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, macs)
}
