use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Infer,
}

/// Result of a batch-norm forward pass.
///
/// `mean`/`inv_std` are the statistics actually used (batch statistics in
/// train mode, running statistics in infer mode); `running_*` are the updated
/// running statistics (unchanged in infer mode).
#[derive(Debug, Clone)]
pub struct BnOutput<T> {
    pub y: Tensor<T>,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<BnOutput<T>> {
    let s = x.shape();
    let c = s.c;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: s,
            rhs: Shape::new(1, gamma.len(), 1, 1),
        });
    }
    let m = s.n * s.plane();
    if m == 0 {
        return Err(Error::invalid("batch_norm", format!("zero-element channels in {s}")));
    }
    let eps_t = T::lit(eps);
    let plane = s.plane();
    let xd = x.data();
    let (mean, var) = match mode {
        BnMode::Train => {
            let inv_m = T::one() / T::lit(m as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    for &v in &xd[(n * c + ch) * plane..(n * c + ch + 1) * plane] {
                        acc += v;
                    }
                }
                let mu = acc * inv_m;
                let mut sq = T::zero();
                for n in 0..s.n {
                    for &v in &xd[(n * c + ch) * plane..(n * c + ch + 1) * plane] {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq * inv_m;
            }
            (mean, var)
        }
        BnMode::Infer => (running_mean.to_vec(), running_var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut y = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let (g, b, mu, is) = (gamma[ch], beta[ch], mean[ch], inv_std[ch]);
            for i in base..base + plane {
                y[i] = g * (xd[i] - mu) * is + b;
            }
        }
    }
    let (running_mean, running_var) = match mode {
        BnMode::Train => {
            let mo = T::lit(momentum);
            let keep = T::one() - mo;
            (
                running_mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| keep * r + mo * b)
                    .collect(),
                running_var.iter().zip(&var).map(|(&r, &b)| keep * r + mo * b).collect(),
            )
        }
        BnMode::Infer => (running_mean.to_vec(), running_var.to_vec()),
    };
    Ok(BnOutput {
        y: Tensor::new(s, y)?,
        mean,
        inv_std,
        running_mean,
        running_var,
    })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    grad_out: &Tensor<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let s = x.shape();
    super::check_same("batch_norm_backward", s, grad_out.shape())?;
    let c = s.c;
    let plane = s.plane();
    let m = T::lit((s.n * plane) as f64);
    let xd = x.data();
    let gd = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        for n in 0..s.n {
            let base = (n * c + ch) * plane;
            for i in base..base + plane {
                dbeta[ch] += gd[i];
                dgamma[ch] += gd[i] * (xd[i] - mu) * is;
            }
        }
    }
    let mut gx = vec![T::zero(); s.numel()];
    for ch in 0..c {
        let (mu, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
        for n in 0..s.n {
            let base = (n * c + ch) * plane;
            for i in base..base + plane {
                gx[i] = match mode {
                    BnMode::Infer => g * is * gd[i],
                    BnMode::Train => {
                        let xhat = (xd[i] - mu) * is;
                        g * is / m * (m * gd[i] - dbeta[ch] - xhat * dgamma[ch])
                    }
                };
            }
        }
    }
    Ok((Tensor::new(s, gx)?, dgamma, dbeta))
}
