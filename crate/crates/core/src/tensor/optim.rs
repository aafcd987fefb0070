//! Adam optimizer with bias correction.

use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Standard Adam. Moment buffers are keyed by parameter position and persist
/// across steps; construct once per training run.
pub struct Adam<E: Elem> {
    params: Vec<Tensor<E>>,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<E: Elem> Adam<E> {
    pub fn new(params: Vec<Tensor<E>>, lr: f64) -> Self {
        Adam::with_hyperparams(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(
        params: Vec<Tensor<E>>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let m = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        Adam { params, m, v, t: 0, lr, beta1, beta2, eps }
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    /// One in-place update over all parameters. Every parameter must carry a
    /// populated gradient.
    pub fn step(&mut self) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::contract(format!(
                    "adam step: parameter {i} has no gradient; run backward first"
                )));
            }
        }
        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad().expect("checked above");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.with_data_mut(|data| {
                for j in 0..data.len() {
                    m[j] = b1 * m[j] + (one - b1) * g[j];
                    v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let p = Tensor::<f64>::from_vec(vec![1.0], &[1], true).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        opt.step().unwrap();
        // Bias-corrected first step has magnitude lr regardless of grad scale.
        assert!((p.value()[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let p = Tensor::<f64>::from_vec(vec![0.5], &[1], true).unwrap();
        p.accumulate_grad(&[0.0]);
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        opt.step().unwrap();
        assert_eq!(p.value()[0], 0.5);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let p = Tensor::<f64>::from_vec(vec![0.5], &[1], true).unwrap();
        let mut opt = Adam::new(vec![p], 0.1);
        assert!(opt.step().is_err());
    }

    #[test]
    fn quadratic_converges_and_matches_reference() {
        // Engine run: minimize x^2 from x = 1 with lr = 0.05.
        let p = Tensor::<f64>::from_vec(vec![1.0], &[1], true).unwrap();
        let mut opt = Adam::new(vec![p.clone()], 0.05);
        for _ in 0..100 {
            opt.zero_grad();
            // d(x^2)/dx = 2x, fed directly; the tape is exercised elsewhere.
            p.accumulate_grad(&[2.0 * p.value()[0]]);
            opt.step().unwrap();
        }
        let engine_x = p.value()[0];

        // Independent reference recurrence for the same problem.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let (b1, b2, lr, eps) = (0.9, 0.999, 0.05, 1e-8);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((engine_x - x).abs() < 1e-12, "engine {engine_x} vs reference {x}");
        assert!(engine_x.abs() < 0.05, "not converged: {engine_x}");
    }
}
