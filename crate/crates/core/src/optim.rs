//! Stochastic-gradient optimizers (bias-corrected Adam, plain SGD).

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer hyperparameters shared by a parameter group.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// When false, applies plain SGD steps (`p -= lr * g`).
    pub adaptive: bool,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            adaptive: true,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        AdamConfig {
            adaptive: false,
            ..Self::with_lr(lr)
        }
    }
}

/// Per-parameter moment accumulators and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One update step. Deterministic given inputs; the step count increases by
/// exactly one.
pub fn adam_step<S: Scalar>(
    cfg: &AdamConfig,
    param: &mut Tensor<S>,
    grad: &Tensor<S>,
    state: &mut AdamState<S>,
) -> Result<(), TensorError> {
    if param.shape() != grad.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    state.t += 1;
    let lr = S::from_f64_c(cfg.lr);
    if !cfg.adaptive {
        for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p = *p - lr * g;
        }
        return Ok(());
    }
    let b1 = S::from_f64_c(cfg.beta1);
    let b2 = S::from_f64_c(cfg.beta2);
    let eps = S::from_f64_c(cfg.eps);
    let one = S::one();
    let bc1 = one - S::from_f64_c(cfg.beta1.powi(state.t as i32));
    let bc2 = one - S::from_f64_c(cfg.beta2.powi(state.t as i32));
    for i in 0..param.numel() {
        let g = grad.data()[i];
        let m = b1 * state.m.data()[i] + (one - b1) * g;
        let v = b2 * state.v.data()[i] + (one - b2) * g * g;
        state.m.data_mut()[i] = m;
        state.v.data_mut()[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        param.data_mut()[i] = param.data()[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias correction makes the normalized gradient ~1 on step one.
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = Tensor::<f64>::scalar(5.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[1]);
        adam_step(&cfg, &mut p, &g, &mut st).unwrap();
        assert!((p.item().unwrap() - 4.9).abs() < 1e-6);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_is_identity_on_params() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[3]);
        adam_step(&cfg, &mut p, &Tensor::zeros(&[3]), &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn identical_calls_identical_results() {
        let cfg = AdamConfig::with_lr(0.01);
        let g = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let run = || {
            let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
            let mut st = AdamState::new(&[2]);
            adam_step(&cfg, &mut p, &g, &mut st).unwrap();
            adam_step(&cfg, &mut p, &g, &mut st).unwrap();
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut st = AdamState::new(&[2]);
        assert!(adam_step(&cfg, &mut p, &Tensor::zeros(&[3]), &mut st).is_err());
    }
}
