//! Classical (heavy-ball) momentum SGD.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ConvParams;

/// Velocity buffers plus the step hyperparameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    velocities: Vec<ConvParams<T>>,
    learning_rate: f64,
    momentum: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero velocities shaped like `params`.
    ///
    /// A zero learning rate is accepted so that a run can be pinned to its
    /// initialization.
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a ConvParams<T>>,
        learning_rate: f64,
        momentum: f64,
    ) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self { velocities: params.into_iter().map(ConvParams::zeros_like).collect(), learning_rate, momentum })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocities(&self) -> &[ConvParams<T>] {
        &self.velocities
    }
}

#[inline]
fn update<T: Scalar>(p: &mut [T], g: &[T], v: &mut [T], lr: f64, momentum: f64) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        let nv = momentum * v.widen() - lr * g.widen();
        *v = T::narrow(nv);
        *p = T::narrow(p.widen() + v.widen());
    }
}

/// `v ← momentum·v − lr·g; p ← p + v` for every parameter block.
pub fn sgd_momentum_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut ConvParams<T>>,
    grads: &[ConvParams<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let params: Vec<&mut ConvParams<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::Usage(format!(
            "optimizer step got {} parameter blocks, {} gradients and {} velocities",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocities).enumerate() {
        if !p.same_shape(g) || !p.same_shape(v) {
            return Err(Error::Usage(format!("parameter block {i} shape disagrees with its gradient or velocity")));
        }
    }
    let (lr, momentum) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params.into_iter().zip(grads).zip(state.velocities.iter_mut()) {
        let (pw, pb) = p.split_mut();
        let (vw, vb) = v.split_mut();
        update(pw, g.weights(), vw, lr, momentum);
        update(pb, g.bias(), vb, lr, momentum);
    }
    Ok(())
}
