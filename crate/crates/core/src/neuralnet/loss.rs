//! Sigmoid focal loss over a binary logit map.
//!
//! Per element with logit `z` and binary truth `t`:
//! `p = sigmoid(z)`, `p_t = p` when `t` is positive else `1 - p`,
//! `a_t = alpha` when positive else `1 - alpha`, and the loss is the mean of
//! `-a_t * (1 - p_t)^power * ln(p_t)`. `ln(p_t)` is evaluated through the
//! stable log-sigmoid and `p_t` is clamped below at 1e-12.

use super::layers::sigmoid;
use super::tensor::{Scalar, Tensor};
use super::NnError;

const PT_FLOOR: f64 = 1e-12;

/// `ln(sigmoid(v))` without overflow at either tail.
fn log_sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        -(T::one() + (-v).exp()).ln()
    } else {
        v - (T::one() + v.exp()).ln()
    }
}

/// Focal loss configuration. `alpha` weights the positive class, `1 - alpha`
/// the negative class; `power` is the focusing exponent.
#[derive(Debug, Clone, Copy)]
pub struct FocalLoss {
    pub alpha: f64,
    pub power: f64,
}

impl Default for FocalLoss {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            power: 2.0,
        }
    }
}

impl FocalLoss {
    /// Mean loss and its gradient with respect to the logits.
    pub fn compute<T: Scalar>(
        &self,
        logits: &Tensor<T>,
        truth: &[bool],
    ) -> Result<(T, Tensor<T>), NnError> {
        focal_loss_weighted(logits, truth, self.alpha, 1.0 - self.alpha, self.power)
    }
}

/// Focal loss with the standard class weighting `a_t = alpha` / `1 - alpha`.
pub fn focal_loss<T: Scalar>(
    logits: &Tensor<T>,
    truth: &[bool],
    alpha: f64,
    power: f64,
) -> Result<(T, Tensor<T>), NnError> {
    focal_loss_weighted(logits, truth, alpha, 1.0 - alpha, power)
}

/// Focal loss with explicit per-class weights. `power = 0` with both weights
/// 1 reduces to mean binary cross-entropy.
pub fn focal_loss_weighted<T: Scalar>(
    logits: &Tensor<T>,
    truth: &[bool],
    alpha_pos: f64,
    alpha_neg: f64,
    power: f64,
) -> Result<(T, Tensor<T>), NnError> {
    if logits.len() != truth.len() {
        return Err(NnError::shape(
            "focal_loss",
            format!("{} logits vs {} labels", logits.len(), truth.len()),
        ));
    }
    if logits.is_empty() {
        return Err(NnError::param("focal_loss", "empty logit map"));
    }
    let n = T::from_f64(logits.len() as f64);
    let power_t = T::from_f64(power);
    let floor = T::from_f64(PT_FLOOR);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    {
        let gslice = grad.as_mut_slice();
        for (i, (&z, &t)) in logits.as_slice().iter().zip(truth).enumerate() {
            let u = if t { z } else { -z };
            let a_t = T::from_f64(if t { alpha_pos } else { alpha_neg });
            let p_t = sigmoid(u).max(floor);
            let one_minus = sigmoid(-u);
            let log_pt = log_sigmoid(u).max(floor.ln());
            let focus = one_minus.powf(power_t);
            total += -a_t * focus * log_pt;
            // d/du of -a (1-p)^b ln p  =  -a (1-p)^b ((1-p) - b p ln p),
            // and u = z for positives, -z for negatives.
            let du = -a_t * focus * (one_minus - power_t * p_t * log_pt);
            let dz = if t { du } else { -du };
            gslice[i] = dz / n;
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent binary cross-entropy, straight from the definition.
    fn bce(logits: &[f64], truth: &[bool]) -> f64 {
        let s: f64 = logits
            .iter()
            .zip(truth)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                if t {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        s / logits.len() as f64
    }

    #[test]
    fn confident_correct_prediction_vanishes() {
        let logits = Tensor::from_vec(&[1], vec![30.0f64]);
        let (loss, _) = focal_loss(&logits, &[true], 0.25, 2.0).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn zero_logit_ground_value() {
        let logits = Tensor::from_vec(&[1], vec![0.0f64]);
        let (loss, _) = focal_loss(&logits, &[true], 0.25, 2.0).unwrap();
        // -0.25 * 0.5^2 * ln(0.5)
        assert_relative_eq!(loss, 0.25 * 0.25 * std::f64::consts::LN_2, max_relative = 1e-12);
        assert_relative_eq!(loss, 0.043321698784, max_relative = 1e-9);
    }

    #[test]
    fn degenerates_to_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..64).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let truth: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.5)).collect();
        let t = Tensor::from_vec(&[64], logits.clone());
        let (loss, _) = focal_loss_weighted(&t, &truth, 1.0, 1.0, 0.0).unwrap();
        assert!((loss - bce(&logits, &truth)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 24;
        let mut logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let (_, grad) =
            focal_loss(&Tensor::from_vec(&[n], logits.clone()), &truth, 0.25, 2.0).unwrap();
        let h = 1e-3;
        for i in 0..n {
            let orig = logits[i];
            logits[i] = orig + h;
            let (up, _) =
                focal_loss(&Tensor::from_vec(&[n], logits.clone()), &truth, 0.25, 2.0).unwrap();
            logits[i] = orig - h;
            let (down, _) =
                focal_loss(&Tensor::from_vec(&[n], logits.clone()), &truth, 0.25, 2.0).unwrap();
            logits[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = crate::neuralnet::gradcheck::rel_err(grad.as_slice()[i], fd);
            assert!(err < 1e-6, "element {i}: analytic {} vs fd {fd}", grad.as_slice()[i]);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Tensor::from_vec(&[4], vec![800.0f64, -800.0, 800.0, -800.0]);
        let truth = [true, true, false, false];
        let (loss, grad) = focal_loss(&logits, &truth, 0.25, 2.0).unwrap();
        assert!(loss.is_finite());
        assert!(grad.as_slice().iter().all(|g| g.is_finite()));
        // The two confident elements contribute nothing; the clamp caps each
        // hopeless element at -a_t ln(1e-12).
        let cap = -(1e-12f64).ln();
        assert_relative_eq!(loss, (0.25 * cap + 0.75 * cap) / 4.0, max_relative = 1e-9);
    }

    #[test]
    fn shape_and_emptiness_checked() {
        let logits = Tensor::from_vec(&[2], vec![0.0f64, 1.0]);
        assert!(matches!(
            focal_loss(&logits, &[true], 0.25, 2.0),
            Err(NnError::ShapeMismatch { .. })
        ));
        let empty = Tensor::<f64>::zeros(&[0]);
        assert!(focal_loss(&empty, &[], 0.25, 2.0).is_err());
    }
}
