use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    #[serde(skip)]
    m: Vec<T>,
    #[serde(skip)]
    v: Vec<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_moments(mut self, m: Vec<T>, v: Vec<T>) -> Self {
        self.m = m;
        self.v = v;
        self
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps, wd) = (T::lit(lr), T::lit(self.eps), T::lit(self.weight_decay));
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps) + wd * *p;
            *p -= lr * update;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut opt = AdamW::<f64>::new(2, 0.1);
        let mut p = vec![0.5, -1.0];
        opt.step(&mut p, &[3.0, -2.0], 0.0);
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut opt = AdamW::<f64>::new(2, 0.0);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.002], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::<f32>::new(1, 0.0);
        let mut p = vec![4.0f32];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.step(&mut p, &g, 0.01);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
