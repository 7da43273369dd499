//! Adam with decoupled weight decay.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; parameters and moments are untouched.
    SkippedNonFinite,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err("adam: parameter/gradient count mismatch");
        }
        for (p, g) in params.iter().zip(grads) {
            p.expect_same_shape(g, "adam")?;
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, eps, decay) = (T::of(lr), T::of(c.eps), T::of(lr * c.weight_decay));
        let one = T::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - decay * *pv - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Cosine annealing from `lr_max` at iteration 0 to 0 at `total`.
pub fn cosine_lr(lr_max: f64, iteration: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let p = (iteration as f64 / total as f64).min(1.0);
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64)];
        let before = p.clone();
        let mut adam = Adam::new(no_decay(), &[&[3]]);
        for _ in 0..10 {
            adam.step(&mut p, &[Tensor::zeros(&[3])], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut adam = Adam::new(no_decay(), &[&[1]]);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0].data()[0];
            adam.step(&mut p, &[Tensor::scalar(2.5)], 0.01).unwrap();
            last = p[0].data()[0] - before;
        }
        assert!(last < 0.0);
        assert!((last.abs() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut adam = Adam::new(no_decay(), &[&[1]]);
        let mut reached = None;
        for it in 0..500 {
            let x = p[0].data()[0];
            if x * x < 1e-3 && reached.is_none() {
                reached = Some(it);
            }
            adam.step(&mut p, &[Tensor::scalar(2.0 * x)], 0.01).unwrap();
        }
        let x = p[0].data()[0];
        assert!(x * x < 1e-3, "f(x) = {}", x * x);
        assert!(reached.is_some());
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = vec![Tensor::<f32>::scalar(1.0)];
        let mut adam = Adam::new(AdamConfig::default(), &[&[1]]);
        let out = adam.step(&mut p, &[Tensor::scalar(f32::NAN)], 0.1).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!(cosine_lr(1e-4, 100, 100).abs() < 1e-20);
        assert!((cosine_lr(1e-4, 50, 100) - 5e-5).abs() < 1e-12);
    }
}
