//! Adam with decoupled weight decay and a reduce-on-plateau learning-rate
//! schedule.

use std::collections::HashMap;

use super::tensor::Scalar;
use super::Layer;

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam, β = (0.9, 0.999), ε = 1e-8, with bias correction. Weight decay is
/// decoupled: each step applies an additive `-lr * wd * θ` term alongside
/// the moment-based update. Per-parameter state is keyed by the stable
/// visitation name.
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step_count: u64,
    slots: HashMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(weight_decay),
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter of `model` using its accumulated
    /// gradients. Gradients are not cleared here.
    pub fn step<L: Layer<T> + ?Sized>(&mut self, model: &mut L) {
        self.step_with(&mut |visit| model.visit_params("", visit));
    }

    /// As [`Adam::step`], but over any parameter visitation — for models
    /// that expose `visit_params` without implementing [`Layer`].
    pub fn step_with(
        &mut self,
        for_each: &mut dyn FnMut(&mut dyn FnMut(&str, &mut super::tensor::Param<T>)),
    ) {
        self.step_count += 1;
        let t = self.step_count;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = T::one() - b1.powi(t as i32);
        let bc2 = T::one() - b2.powi(t as i32);
        let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
        let slots = &mut self.slots;
        for_each(&mut |name, p| {
            let n = p.value.len();
            let slot = slots.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            assert_eq!(slot.m.len(), n, "moment shape changed for {name}");
            let theta = p.value.as_mut_slice();
            let grad = p.grad.as_slice();
            for i in 0..n {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let decay = lr * wd * theta[i];
                theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps) - decay;
            }
        });
    }
}

/// Reduce-on-plateau: multiply the learning rate by `factor` after
/// `patience` consecutive epochs without a relative improvement of at least
/// `rel_threshold` over the best metric seen. The bad-epoch counter resets
/// on each reduction, so a plateau of exactly `patience` epochs triggers
/// exactly one reduction.
#[derive(Debug, Clone)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub rel_threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, rel_threshold: f64) -> Self {
        assert!(factor > 0.0 && factor < 1.0);
        assert!(patience >= 1);
        Self {
            factor,
            patience,
            rel_threshold,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch metric (lower is better). Returns true when the
    /// learning rate should be reduced now.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best * (1.0 - self.rel_threshold) {
            self.best = metric;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            true
        } else {
            false
        }
    }
}

impl Default for Plateau {
    fn default() -> Self {
        Self::new(0.35, 3, 1e-4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::tensor::{Param, Tensor};
    use crate::neuralnet::{zero_grads, Layer, NnError};

    /// One scalar parameter, gradient set directly by tests.
    struct Knob {
        p: Param<f64>,
    }

    impl Layer<f64> for Knob {
        fn forward(&mut self, x: &Tensor<f64>, _t: bool) -> Result<Tensor<f64>, NnError> {
            Ok(x.clone())
        }
        fn backward(&mut self, g: &Tensor<f64>) -> Tensor<f64> {
            g.clone()
        }
        fn visit_params(&mut self, _p: &str, visit: &mut dyn FnMut(&str, &mut Param<f64>)) {
            visit("knob", &mut self.p);
        }
    }

    fn knob(value: f64) -> Knob {
        Knob {
            p: Param::new(Tensor::from_vec(&[1], vec![value])),
        }
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut k = knob(1.5);
        let mut adam = Adam::<f64>::new(0.003, 0.0);
        for _ in 0..5 {
            adam.step(&mut k);
        }
        assert_eq!(k.p.value.as_slice()[0], 1.5);
    }

    #[test]
    fn first_step_is_minus_lr() {
        let mut k = knob(0.0);
        k.p.grad.as_mut_slice()[0] = 1.0;
        let mut adam = Adam::<f64>::new(0.003, 0.0);
        adam.step(&mut k);
        // Bias-corrected unit ratio: m_hat = 1, v_hat = 1.
        assert!((k.p.value.as_slice()[0] + 0.003).abs() < 1e-6 * 0.003 + 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut k = knob(2.0);
        let mut adam = Adam::<f64>::new(0.01, 0.1);
        adam.step(&mut k);
        // No gradient: only the -lr*wd*theta term fires.
        assert!((k.p.value.as_slice()[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_walks_at_lr_rate() {
        let mut k = knob(0.0);
        let mut adam = Adam::<f64>::new(0.01, 0.0);
        for _ in 0..50 {
            zero_grads(&mut k);
            k.p.grad.as_mut_slice()[0] = 2.0;
            adam.step(&mut k);
        }
        // Constant gradient: every bias-corrected step is ~ -lr.
        assert!((k.p.value.as_slice()[0] + 0.01 * 50.0).abs() < 1e-4);
    }

    #[test]
    fn plateau_fires_once_per_stall() {
        let mut p = Plateau::new(0.35, 3, 1e-4);
        assert!(!p.observe(1.0));
        // Three non-improving epochs: reduction exactly at the third.
        assert!(!p.observe(1.0));
        assert!(!p.observe(0.99999));
        assert!(p.observe(1.0));
        // Counter reset: the next stall needs three more epochs.
        assert!(!p.observe(1.0));
        assert!(!p.observe(1.0));
        assert!(p.observe(1.0));
        // Real improvement resets the streak.
        assert!(!p.observe(0.5));
        assert!(!p.observe(0.5));
        assert!(!p.observe(0.49999));
        assert!(p.observe(0.5));
    }

    #[test]
    fn plateau_improvement_threshold_is_relative() {
        let mut p = Plateau::new(0.35, 1, 1e-2);
        assert!(!p.observe(100.0));
        // 1% relative threshold: 99.5 is not enough improvement.
        assert!(p.observe(99.5));
        assert!(!p.observe(98.0));
    }
}
