use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cosine decay from `lr0` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One momentum-SGD update of a single tensor:
/// `v ← momentum·v + grad + wd·param`, `param ← param − lr·v`.
pub fn sgd_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_update",
            lhs: param.shape(),
            rhs: grad.shape(),
        });
    }
    let (lr, m, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers, created lazily per parameter.
#[derive(Debug, Clone, Default)]
pub struct SgdState<T> {
    pub velocity: BTreeMap<String, Tensor<T>>,
}

/// Updates every parameter that has a gradient. Weight decay applies only to
/// parameters whose manifest entry enables it.
pub fn sgd_step<T: Scalar>(
    g: &Graph,
    params: &mut Params<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, grad) in grads {
        let decay = g.param_spec(name).is_some_and(|s| s.decay);
        let p = params.get_mut(name)?;
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        sgd_update(p, grad, v, lr, momentum, if decay { weight_decay } else { 0.0 })?;
    }
    Ok(())
}

/// Exponential moving average of every parameter and buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub shadow: Params<T>,
    pub decay: f64,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(params: &Params<T>, decay: f64) -> Self {
        EmaState {
            shadow: params.clone(),
            decay,
        }
    }

    /// `shadow ← decay·shadow + (1 − decay)·param`
    pub fn update(&mut self, params: &Params<T>) -> Result<()> {
        let d = T::lit(self.decay);
        let e = T::lit(1.0 - self.decay);
        for (name, p) in params.iter() {
            let s = self.shadow.get_mut(name)?;
            if s.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "ema_update",
                    lhs: s.shape(),
                    rhs: p.shape(),
                });
            }
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + e * b;
            }
        }
        Ok(())
    }
}
