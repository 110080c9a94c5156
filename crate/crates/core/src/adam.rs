//! Bias-corrected Adam optimizer state and update step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter Adam moments.
///
/// Moments are zero at `step_count == 0` and the second moment stays
/// elementwise non-negative. Adam with `learning_rate == 0` is the
/// identity on parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], learning_rate: f64) -> Self {
        Self {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
            learning_rate,
        }
    }
}

/// One in-place Adam update; increments the step counter.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.first_moment.shape() {
        return Err(Error::Dimension(format!(
            "adam shapes disagree: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.first_moment.shape()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = state.learning_rate;
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256StarStar;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Tensor::vector(&[1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut state = AdamState::new(p.shape(), 0.01);
        let zero_grad = Tensor::zeros(p.shape());
        adam_step(&mut p, &zero_grad, &mut state).unwrap();
        assert!(p.bitwise_eq(&before));
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // constant gradient g: m_hat/sqrt(v_hat) == sign(g) up to eps
        let lr = 0.05;
        let mut p = Tensor::vector(&[0.0, 0.0]);
        let mut state = AdamState::new(p.shape(), lr);
        let g = Tensor::vector(&[3.0, -0.25]);
        adam_step(&mut p, &g, &mut state).unwrap();
        assert!((p.data()[0] - (-lr)).abs() < lr * 1e-6);
        assert!((p.data()[1] - lr).abs() < lr * 1e-6);
    }

    #[test]
    fn two_steps_match_unrolled_oracle() {
        let lr = 0.003;
        let mut rng = Xoshiro256StarStar::seed_from_u64(101);
        let mut p = Tensor::vector(&[(0..4).map(|_| rng.normal()).collect::<Vec<_>>()].concat());
        let g1 = Tensor::vector(&[(0..4).map(|_| rng.normal()).collect::<Vec<_>>()].concat());
        let g2 = Tensor::vector(&[(0..4).map(|_| rng.normal()).collect::<Vec<_>>()].concat());

        // Hand-unrolled reference for both steps.
        let mut expect = p.data().to_vec();
        let mut m = vec![0.0; 4];
        let mut v = vec![0.0; 4];
        for (t, g) in [(1, &g1), (2, &g2)] {
            for i in 0..4 {
                let gi = g.data()[i];
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let m_hat = m[i] / (1.0 - 0.9f64.powi(t));
                let v_hat = v[i] / (1.0 - 0.999f64.powi(t));
                expect[i] -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            }
        }

        let mut state = AdamState::new(p.shape(), lr);
        adam_step(&mut p, &g1, &mut state).unwrap();
        adam_step(&mut p, &g2, &mut state).unwrap();
        for i in 0..4 {
            assert!((p.data()[i] - expect[i]).abs() < 1e-14);
        }
        assert_eq!(state.step_count, 2);
        assert!(state.second_moment.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(7);
        let mut p = Tensor::vector(&[(0..6).map(|_| rng.normal()).collect::<Vec<_>>()].concat());
        let before = p.clone();
        let mut state = AdamState::new(p.shape(), 0.0);
        for _ in 0..3 {
            let g = Tensor::vector(&[(0..6).map(|_| rng.normal()).collect::<Vec<_>>()].concat());
            adam_step(&mut p, &g, &mut state).unwrap();
        }
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::vector(&[1.0]);
        let mut state = AdamState::new(&[1], 0.1);
        assert!(adam_step(&mut p, &Tensor::vector(&[1.0, 2.0]), &mut state).is_err());
    }
}
