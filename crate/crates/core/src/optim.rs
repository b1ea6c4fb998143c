//! Adaptive-moment gradient descent on ndarray parameters.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<D: Dimension> {
    cfg: AdamConfig,
    m: Array<f64, D>,
    v: Array<f64, D>,
    step: i32,
}

impl<D: Dimension> Adam<D> {
    pub fn new(cfg: AdamConfig, shape: D) -> Self {
        Self { cfg, m: Array::zeros(shape.clone()), v: Array::zeros(shape), step: 0 }
    }

    /// In-place descent step. A zero gradient leaves `param` bit-identical.
    pub fn step(&mut self, param: &mut Array<f64, D>, grad: &Array<f64, D>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        Zip::from(param).and(&mut self.m).and(&mut self.v).and(grad).for_each(|p, m, v, &g| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let update = c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            if update != 0.0 {
                *p -= update;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = array![3.0, -2.0];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, x.raw_dim());
        for _ in 0..500 {
            let g = &x * 2.0;
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut x = array![[0.1, -0.0, 7.0]];
        let before = x.clone();
        let mut opt = Adam::new(AdamConfig::default(), x.raw_dim());
        for _ in 0..5 {
            opt.step(&mut x, &ndarray::Array2::zeros((1, 3)));
        }
        assert_eq!(x, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = array![1.0];
        let mut opt = Adam::new(AdamConfig::default(), x.raw_dim());
        opt.step(&mut x, &array![123.0]);
        assert!((x[0] - (1.0 - 1e-2)).abs() < 1e-9);
    }
}
