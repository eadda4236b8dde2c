use std::collections::BTreeMap;

use super::network::{Grads, NetworkParams};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters. Moments are created on first use and
/// mirror the shape of their parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Keras defaults for the betas and epsilon.
    pub fn new(lr: f64) -> Self {
        Self::with_params(lr, 0.9, 0.999, 1e-7)
    }

    pub fn with_params(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { lr, beta1, beta2, epsilon, step: 0, moments: BTreeMap::new() }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }
}

/// One bias-corrected Adam update of every parameter present in `grads`.
/// Parameters without a gradient entry are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &Grads<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::shape(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient {name} {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let one = T::one();
    let correction1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let correction2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let lr = T::from_f64_lossy(state.lr);
    let eps = T::from_f64_lossy(state.epsilon);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
        for (((pv, mv), vv), &gv) in
            p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / correction1;
            let v_hat = *vv / correction2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
