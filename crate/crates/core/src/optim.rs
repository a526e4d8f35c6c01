//! Plain SGD with a polynomial learning-rate decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{state_err, value_err, Result};
use crate::tensor::Tensor;

/// Schedule state for polynomially decayed SGD.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub power: f64,
    pub total_iters: usize,
    pub current_iter: usize,
}

impl OptimizerState {
    pub fn new(base_lr: f64, power: f64, total_iters: usize) -> Result<Self> {
        if !(base_lr > 0.0) {
            return Err(value_err!("base_lr must be positive, got {base_lr}"));
        }
        if total_iters == 0 {
            return Err(value_err!("total_iters must be positive"));
        }
        Ok(OptimizerState { base_lr, power, total_iters, current_iter: 0 })
    }

    pub fn lr(&self) -> f64 {
        poly_lr(self)
    }

    pub fn advance(&mut self) {
        self.current_iter += 1;
    }
}

/// `base_lr * (1 - t/T)^power`, clamped so t past T yields 0.
pub fn poly_lr(state: &OptimizerState) -> f64 {
    let frac = (state.current_iter as f64 / state.total_iters as f64).min(1.0);
    state.base_lr * (1.0 - frac).powf(state.power)
}

/// One SGD step `p <- p - lr * g` over every parameter, then zeroes grads.
/// `lr = 0` is the identity (used to probe schedules); negative lr is
/// rejected. Every parameter must carry a populated grad buffer.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(value_err!("learning rate must be finite and >= 0, got {lr}"));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad.is_none() {
            return Err(state_err!("parameter {i} has no gradient; run backward first"));
        }
    }
    for p in params.iter_mut() {
        let g = p.grad.take().unwrap();
        for (v, gv) in p.data_mut().iter_mut().zip(&g) {
            *v -= lr * gv;
        }
        p.quantize();
        p.grad = Some(vec![0.0; g.len()]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        let mut s = OptimizerState::new(2.5e-4, 0.9, 100).unwrap();
        assert_eq!(poly_lr(&s), 2.5e-4);
        s.current_iter = 100;
        assert_eq!(poly_lr(&s), 0.0);
        let mid = OptimizerState { base_lr: 1.0, power: 0.9, total_iters: 2, current_iter: 1 };
        assert!((poly_lr(&mid) - 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((poly_lr(&mid) - 0.53589).abs() < 1e-5);
    }

    #[test]
    fn poly_lr_is_non_increasing() {
        let mut s = OptimizerState::new(1.0, 0.9, 37).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..=37 {
            s.current_iter = t;
            let lr = poly_lr(&s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_closed_form_and_zeroing() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        p.grad = Some(vec![2.0]);
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.data()[0], 0.8);
        assert_eq!(p.grad.as_deref().unwrap(), &[0.0]);
    }

    #[test]
    fn sgd_zero_grad_and_zero_lr_are_identity() {
        let mut p = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap();
        p.grad = Some(vec![0.0, 0.0]);
        sgd_step(&mut [&mut p], 0.3).unwrap();
        assert_eq!(p.data(), &[1.5, -0.5]);
        p.grad = Some(vec![10.0, -10.0]);
        sgd_step(&mut [&mut p], 0.0).unwrap();
        assert_eq!(p.data(), &[1.5, -0.5]);
    }

    #[test]
    fn sgd_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let grads: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lr = 0.017;
        let expect: Vec<f64> = vals.iter().zip(&grads).map(|(v, g)| v - lr * g).collect();
        let mut p = Tensor::new(vec![64], vals).unwrap();
        p.grad = Some(grads);
        sgd_step(&mut [&mut p], lr).unwrap();
        for (a, b) in p.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_missing_grad_is_state_error() {
        let mut p = Tensor::zeros(vec![2]);
        assert!(matches!(
            sgd_step(&mut [&mut p], 0.1),
            Err(crate::error::Error::State(_))
        ));
    }
}
