//! Adam optimizer over [`Parameter`] collections.

use crate::error::{Error, Result};
use crate::tensor::Parameter;

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(params: &[Parameter], learning_rate: f64) -> OptimizerState {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: params.iter().map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()])).collect(),
        }
    }
}

/// One bias-corrected Adam update. Consumes and zeroes the gradients;
/// errors if any parameter has no gradient.
pub fn adam_step(params: &[Parameter], state: &mut OptimizerState) -> Result<()> {
    assert_eq!(params.len(), state.moments.len(), "optimizer built for a different parameter set");
    for p in params {
        if p.grad_clone().is_none() {
            return Err(Error::MissingGradient { name: p.name() });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (p, (m, v)) in params.iter().zip(state.moments.iter_mut()) {
        p.with_data_grad(|data, grad| {
            let g = grad.as_ref().expect("checked above");
            for i in 0..data.len() {
                m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
            }
            *grad = None;
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn first_step_moves_by_about_lr() {
        let p = Parameter::new("p", &[], vec![1.0]);
        let mut st = OptimizerState::new(std::slice::from_ref(&p), 0.1);
        p.accumulate_grad(&[1.0]);
        adam_step(std::slice::from_ref(&p), &mut st).unwrap();
        let v = p.data_clone()[0];
        assert!((v - 0.9).abs() < 1e-6, "got {v}");
        // gradients zeroed afterwards
        assert!(p.grad_clone().is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let p = Parameter::new("p", &[2], vec![3.0, -1.0]);
        let mut st = OptimizerState::new(std::slice::from_ref(&p), 0.1);
        p.accumulate_grad(&[0.0, 0.0]);
        adam_step(std::slice::from_ref(&p), &mut st).unwrap();
        assert_eq!(p.data_clone(), vec![3.0, -1.0]);
    }

    #[test]
    fn missing_gradient_is_named() {
        let p = Parameter::new("policy.fc1.w", &[1], vec![0.0]);
        let mut st = OptimizerState::new(std::slice::from_ref(&p), 0.1);
        let err = adam_step(std::slice::from_ref(&p), &mut st).unwrap_err();
        assert!(err.to_string().contains("policy.fc1.w"));
    }

    #[test]
    fn quadratic_loss_decreases_over_ten_steps() {
        // (p − 5)² under repeated Adam steps: strictly decreasing loss.
        let p = Parameter::new("p", &[], vec![1.0]);
        let mut st = OptimizerState::new(std::slice::from_ref(&p), 0.1);
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let mut tape = Tape::new();
            let x = tape.param(&p);
            let d = tape.scalar_add(&x, -5.0);
            let sq = tape.mul(&d, &d).unwrap();
            let loss = tape.sum_all(&sq);
            let lv = loss.item();
            assert!(lv < last, "loss did not decrease: {lv} >= {last}");
            last = lv;
            tape.backward(&loss).unwrap();
            adam_step(std::slice::from_ref(&p), &mut st).unwrap();
        }
        let final_loss = (p.data_clone()[0] - 5.0).powi(2);
        assert!(final_loss < last);
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let p = Parameter::new("p", &[3], vec![0.5, -0.25, 2.0]);
            let mut st = OptimizerState::new(std::slice::from_ref(&p), 1e-3);
            for step in 0..20 {
                let g = [0.1 * (step as f64 + 1.0), -0.2, 0.05];
                p.accumulate_grad(&g);
                adam_step(std::slice::from_ref(&p), &mut st).unwrap();
            }
            p.data_clone()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sum_of_tensor_works_as_loss() {
        let t = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let mut tape = Tape::new();
        let leaf = tape.leaf(&t);
        let s = tape.sum_all(&leaf);
        assert_eq!(s.item(), 3.0);
    }
}
