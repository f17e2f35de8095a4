//! Minimal dense-tensor compute with reverse-mode gradients.
//!
//! The layer set is exactly what the segmentation network needs: linear,
//! batch norm, ReLU, sigmoid, full and depthwise convolution, channel and
//! spatial attention, 2x2 max-pool, bilinear x2 upsample, focal loss, and an
//! Adam optimizer with a plateau schedule. There is no general autodiff:
//! every layer implements its own backward pass, and each pass is verified
//! against central finite differences in 64-bit.
//!
//! Layers follow one protocol, [`Layer`]: `forward` validates shapes and
//! caches whatever the analytic `backward` needs; `visit_params` exposes the
//! trainable tensors by stable name for the optimizer, the checkpoint writer
//! and the parameter counter. All compute is generic over [`Scalar`]
//! (`f32` for training and inference, `f64` for gradient checks).
//!
//! Determinism: reductions run in a fixed order (parallelism, when enabled,
//! only splits work across disjoint output slots), so outputs are
//! bitwise-identical within one build regardless of thread count.

pub mod attention;
pub mod complexity;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod resample;
pub mod tensor;

use thiserror::Error;

pub use attention::Cbam;
pub use conv::{Conv2d, DepthwiseConv2d, Dsc};
pub use layers::{BatchNorm1d, BatchNorm2d, Linear, LinearBnRelu, Relu, SigmoidGate};
pub use loss::{focal_loss, FocalLoss};
pub use optim::{Adam, Plateau};
pub use resample::{MaxPool2, UpsampleBilinear2};
pub use tensor::{Param, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid parameter for {op}: {detail}")]
    InvalidParam { op: &'static str, detail: String },
}

impl NnError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NnError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn param(op: &'static str, detail: impl Into<String>) -> Self {
        NnError::InvalidParam {
            op,
            detail: detail.into(),
        }
    }
}

/// Common layer protocol. `forward` in training mode must cache the state
/// `backward` needs; `backward` consumes that state, accumulates parameter
/// gradients, and returns the gradient with respect to the layer input.
pub trait Layer<T: Scalar> {
    fn forward(&mut self, input: &Tensor<T>, training: bool) -> Result<Tensor<T>, NnError>;

    /// Panics when called before `forward` or with a gradient whose shape
    /// does not match the last output; both are caller bugs.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T>;

    /// Visits trainable parameters as `(name, param)` with `prefix` leading
    /// each name. Order and names are stable across calls and runs.
    fn visit_params(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Param<T>)) {
        let _ = (prefix, visit);
    }

    /// Visits non-trainable state (running statistics) by stable name.
    /// Checkpoints persist these alongside the parameters; the optimizer
    /// never touches them.
    fn visit_buffers(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let _ = (prefix, visit);
    }
}

/// Clears accumulated gradients on every parameter of `layer`.
pub fn zero_grads<T: Scalar, L: Layer<T> + ?Sized>(layer: &mut L) {
    layer.visit_params("", &mut |_, p| p.grad.fill(T::zero()));
}

/// Total trainable scalar count of `layer`.
pub fn param_count<T: Scalar, L: Layer<T> + ?Sized>(layer: &mut L) -> u64 {
    let mut n = 0u64;
    layer.visit_params("", &mut |_, p| n += p.value.len() as u64);
    n
}
