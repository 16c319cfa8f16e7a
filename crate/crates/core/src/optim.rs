//! Adam optimizer over named parameter matrices.

use std::collections::HashMap;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: HashMap<String, Matrix<T>>,
    v: HashMap<String, Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::c(0.9),
            beta2: T::c(0.999),
            eps: T::c(1e-8),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update over `(name, parameter, gradient)` triples. A zero
    /// gradient leaves its parameter bit-identically unchanged.
    pub fn step(&mut self, updates: Vec<(&str, &mut Matrix<T>, &Matrix<T>)>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (name, param, grad) in updates {
            debug_assert_eq!(param.shape(), grad.shape(), "{name}: grad shape");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(param.rows(), param.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(param.rows(), param.cols()));
            for ((p, g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * *g;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * *g * *g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
