//! RMSProp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

/// Per-parameter squared-gradient averages.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp<T> {
    pub config: RmsPropConfig,
    pub square_avg: Vec<NdArray<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(config: RmsPropConfig, params: &[&NdArray<T>]) -> Self {
        Self {
            config,
            square_avg: params.iter().map(|p| NdArray::zeros(p.shape())).collect(),
        }
    }

    /// `v <- a v + (1 - a) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
    pub fn step(&mut self, params: &mut [&mut NdArray<T>], grads: &[&NdArray<T>]) -> Result<()> {
        if params.len() != self.square_avg.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "optimizer parameter count",
                self.square_avg.len(),
                params.len(),
            ));
        }
        let lr = T::lit(self.config.lr);
        let a = T::lit(self.config.alpha);
        let one_minus = T::one() - a;
        let eps = T::lit(self.config.eps);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.square_avg) {
            p.expect_same_shape(g)?;
            v.expect_same_shape(g)?;
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = a * *vi + one_minus * gi * gi;
                *pi = *pi - lr * gi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(theta: f64, grads: &[f64]) -> (f64, f64) {
        let mut p = NdArray::full(&[1], theta);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &[&p]);
        for &g in grads {
            let g = NdArray::full(&[1], g);
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        (p.data()[0], opt.square_avg[0].data()[0])
    }

    #[test]
    fn single_step_by_hand() {
        let (theta, v) = run(1.0, &[1.0]);
        assert!((v - 0.01).abs() < 1e-15);
        let want = 1.0 - 0.0005 / (0.01f64.sqrt() + 1e-8);
        assert!((theta - want).abs() < 1e-15);
        assert!((theta - 0.995).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_average() {
        let mut p = NdArray::full(&[2], 3.0f64);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &[&p]);
        opt.square_avg[0] = NdArray::full(&[2], 1.0);
        opt.step(&mut [&mut p], &[&NdArray::zeros(&[2])]).unwrap();
        assert_eq!(p.data(), &[3.0, 3.0]);
        assert!((opt.square_avg[0].data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_keeps_descending() {
        let (one, _) = run(1.0, &[1.0]);
        let (two, _) = run(1.0, &[1.0, 1.0]);
        assert!(two < one);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = NdArray::full(&[2], 1.0f64);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &[&p]);
        assert!(opt.step(&mut [&mut p], &[&NdArray::zeros(&[3])]).is_err());
    }
}
