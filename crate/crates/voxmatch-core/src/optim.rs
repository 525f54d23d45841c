//! Adam with bias correction, one state per parameter tensor.

use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step; increments `state.t` by exactly one.
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    hy: &AdamHyper,
) -> Result<(), TensorError> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(TensorError::ShapeMismatch {
            left: param.shape().to_vec(),
            right: grad.shape().to_vec(),
            context: "adam_update".into(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hy.beta1.powi(t);
    let bc2 = 1.0 - hy.beta2.powi(t);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = hy.beta1 * m[i] + (1.0 - hy.beta1) * g;
        v[i] = hy.beta2 * v[i] + (1.0 - hy.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + hy.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::full(&[3], 0.5);
        let mut st = AdamState::new(&[3]);
        adam_update(&mut p, &g, &mut st, 1e-2, &AdamHyper::default()).unwrap();
        for (i, want) in [1.0, 2.0, 3.0].iter().enumerate() {
            let delta = want - p.data()[i];
            // m_hat / sqrt(v_hat) == 1 on the first step up to eps.
            assert!((delta - 1e-2).abs() < 1e-6, "delta {delta}");
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[2]);
        let before = p.clone();
        adam_update(&mut p, &g, &mut st, 1e-2, &AdamHyper::default()).unwrap();
        assert_eq!(p, before);
        assert!(st.m.data().iter().all(|&v| v == 0.0));
        assert!(st.v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        // Independent hand-rolled recurrence for a scalar parameter.
        let hy = AdamHyper::default();
        let lr = 1e-3;
        let g = 0.37;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x = 4.2;
        for t in 1..=2 {
            m = hy.beta1 * m + (1.0 - hy.beta1) * g;
            v = hy.beta2 * v + (1.0 - hy.beta2) * g * g;
            let mh = m / (1.0 - hy.beta1.powi(t));
            let vh = v / (1.0 - hy.beta2.powi(t));
            x -= lr * mh / (vh.sqrt() + hy.eps);
        }

        let mut p = Tensor::scalar(4.2);
        let grad = Tensor::scalar(g);
        let mut st = AdamState::new(&[1]);
        adam_update(&mut p, &grad, &mut st, lr, &hy).unwrap();
        adam_update(&mut p, &grad, &mut st, lr, &hy).unwrap();
        assert!((p.item() - x).abs() < 1e-15);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[2]);
        assert!(adam_update(&mut p, &g, &mut st, 1e-2, &AdamHyper::default()).is_err());
    }
}
