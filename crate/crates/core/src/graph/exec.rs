use std::collections::BTreeMap;

use super::{Graph, NodeId, Op, ParamRole, Params};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self as k, BnMode, Shape, Tensor};

/// Every intermediate value of one forward pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub mode: BnMode,
    pub values: Vec<Tensor<T>>,
    bn_stats: Vec<Option<(Vec<T>, Vec<T>)>>,
    /// Updated running statistics (train mode only), keyed by buffer name.
    pub buffer_updates: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn output<'a>(&'a self, g: &Graph, name: &str) -> Result<&'a Tensor<T>> {
        Ok(&self.values[g.output(name)?.0])
    }

    /// Writes the updated running statistics into `params`.
    pub fn apply_buffer_updates(&self, params: &mut Params<T>) {
        for (name, t) in &self.buffer_updates {
            params.insert(name.clone(), t.clone());
        }
    }
}

/// Parameter and input gradients. Every trainable parameter has an entry,
/// zero when the seeded outputs do not depend on it.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub inputs: BTreeMap<String, Tensor<T>>,
}

fn vec_of<T: Scalar>(t: &Tensor<T>) -> &[T] {
    t.data()
}

/// Evaluates every node in topological order.
pub fn forward<T: Scalar>(
    g: &Graph,
    params: &Params<T>,
    inputs: &BTreeMap<String, Tensor<T>>,
    mode: BnMode,
) -> Result<Trace<T>> {
    let mut values: Vec<Tensor<T>> = Vec::with_capacity(g.nodes.len());
    let mut bn_stats = vec![None; g.nodes.len()];
    let mut buffer_updates = BTreeMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|x| &values[x.0]).collect();
        let out = match &node.op {
            Op::Input { name, channels } => {
                let t = inputs.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
                let s = t.shape();
                if s.c != *channels {
                    return Err(Error::ShapeMismatch {
                        op: "input",
                        lhs: s,
                        rhs: s.with_c(*channels),
                    });
                }
                let m = g.required_multiple;
                if s.h % m != 0 || s.w % m != 0 {
                    return Err(Error::Divisibility {
                        h: s.h,
                        w: s.w,
                        multiple: m,
                    });
                }
                t.clone()
            }
            Op::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => k::conv2d(ins[0], params.get(weight)?, *stride, *padding)?,
            Op::DepthwiseConv2d {
                weight,
                stride,
                padding,
                ..
            } => k::depthwise_conv2d(ins[0], params.get(weight)?, *stride, *padding)?,
            Op::BiasAdd { bias } => k::bias_add(ins[0], vec_of(params.get(bias)?))?,
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            } => {
                let out = k::batch_norm(
                    ins[0],
                    vec_of(params.get(gamma)?),
                    vec_of(params.get(beta)?),
                    vec_of(params.get(running_mean)?),
                    vec_of(params.get(running_var)?),
                    mode,
                    *eps,
                    *momentum,
                )?;
                if mode == BnMode::Train {
                    buffer_updates.insert(running_mean.clone(), Tensor::channel_vec(out.running_mean));
                    buffer_updates.insert(running_var.clone(), Tensor::channel_vec(out.running_var));
                }
                bn_stats[i] = Some((out.mean, out.inv_std));
                out.y
            }
            Op::Activation { kind } => k::activate(ins[0], *kind),
            Op::Pool2d {
                kind,
                kernel,
                stride,
                padding,
            } => k::pool2d(ins[0], *kind, *kernel, *stride, *padding)?,
            Op::GlobalAvgPool => k::global_avg_pool(ins[0])?,
            Op::Upsample { factor } => {
                let s = ins[0].shape();
                k::bilinear_resize(ins[0], s.h * factor, s.w * factor)?
            }
            Op::Add => k::add_n(&ins)?,
            Op::ChannelGate => k::channel_gate(ins[0], ins[1])?,
            Op::FastFusion { weights, eps } => {
                let c = k::fast_normalized_coeffs(vec_of(params.get(weights)?), *eps);
                k::weighted_sum(&ins, &c)?
            }
            Op::SoftmaxFusion { weights } => {
                let c = k::softmax_coeffs(vec_of(params.get(weights)?))?;
                k::weighted_sum(&ins, &c)?
            }
            Op::FixedFusion { coeffs } => {
                let c: Vec<T> = coeffs.iter().map(|&v| T::lit(v)).collect();
                k::weighted_sum(&ins, &c)?
            }
            Op::SumAll => k::sum_all(ins[0]),
        };
        values.push(out);
    }
    Ok(Trace {
        mode,
        values,
        bn_stats,
        buffer_updates,
    })
}

/// Reverse-mode gradients of a scalar `(1, 1, 1, 1)` loss node.
pub fn backward<T: Scalar>(g: &Graph, params: &Params<T>, trace: &Trace<T>, loss: NodeId) -> Result<Gradients<T>> {
    let v = trace
        .values
        .get(loss.0)
        .ok_or_else(|| Error::Graph(format!("loss node {loss} does not exist")))?;
    if v.shape() != Shape::new(1, 1, 1, 1) {
        return Err(Error::Graph(format!(
            "loss node {loss} must be scalar, found shape {}",
            v.shape()
        )));
    }
    backward_from(g, params, trace, vec![(loss, Tensor::scalar(T::one()))])
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Reverse-mode gradients given output-gradient seeds for arbitrary nodes.
pub fn backward_from<T: Scalar>(
    g: &Graph,
    params: &Params<T>,
    trace: &Trace<T>,
    seeds: Vec<(NodeId, Tensor<T>)>,
) -> Result<Gradients<T>> {
    let n = g.nodes.len();
    if trace.values.len() != n {
        return Err(Error::Graph("trace does not belong to this graph".into()));
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
    for (id, seed) in seeds {
        let v = trace
            .values
            .get(id.0)
            .ok_or_else(|| Error::Graph(format!("seed node {id} does not exist")))?;
        if v.shape() != seed.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward_seed",
                lhs: v.shape(),
                rhs: seed.shape(),
            });
        }
        accumulate(&mut grads[id.0], seed)?;
    }
    let mut pgrads: BTreeMap<String, Tensor<T>> = g
        .params
        .iter()
        .filter(|p| p.role == ParamRole::Weight)
        .map(|p| (p.name.clone(), Tensor::zeros(p.shape)))
        .collect();
    let mut igrads = BTreeMap::new();
    let mut add_param = |name: &str, t: Tensor<T>| -> Result<()> {
        let slot = pgrads
            .get_mut(name)
            .ok_or_else(|| Error::UnboundParam(name.to_string()))?;
        let t = t.reshape(slot.shape())?;
        slot.add_assign(&t)
    };

    for i in (0..n).rev() {
        let Some(gy) = grads[i].take() else { continue };
        let node = &g.nodes[i];
        let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|x| &trace.values[x.0]).collect();
        let mut to_inputs: Vec<Tensor<T>> = Vec::new();
        match &node.op {
            Op::Input { name, .. } => {
                igrads.insert(name.clone(), gy);
                continue;
            }
            Op::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let (gx, gw) = k::conv2d_backward(xs[0], params.get(weight)?, &gy, *stride, *padding)?;
                add_param(weight, gw)?;
                to_inputs.push(gx);
            }
            Op::DepthwiseConv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let (gx, gw) = k::depthwise_conv2d_backward(xs[0], params.get(weight)?, &gy, *stride, *padding)?;
                add_param(weight, gw)?;
                to_inputs.push(gx);
            }
            Op::BiasAdd { bias } => {
                add_param(bias, Tensor::channel_vec(k::bias_add_backward(&gy)))?;
                to_inputs.push(gy);
            }
            Op::BatchNorm { gamma, beta, .. } => {
                let (mean, inv_std) = trace.bn_stats[i]
                    .as_ref()
                    .ok_or_else(|| Error::Graph(format!("missing batch-norm statistics for %{i}")))?;
                let (gx, dg, db) =
                    k::batch_norm_backward(xs[0], vec_of(params.get(gamma)?), mean, inv_std, &gy, trace.mode)?;
                add_param(gamma, Tensor::channel_vec(dg))?;
                add_param(beta, Tensor::channel_vec(db))?;
                to_inputs.push(gx);
            }
            Op::Activation { kind } => to_inputs.push(k::activate_backward(xs[0], &gy, *kind)?),
            Op::Pool2d {
                kind,
                kernel,
                stride,
                padding,
            } => to_inputs.push(k::pool2d_backward(xs[0], &gy, *kind, *kernel, *stride, *padding)?),
            Op::GlobalAvgPool => to_inputs.push(k::global_avg_pool_backward(xs[0].shape(), &gy)?),
            Op::Upsample { .. } => to_inputs.push(k::bilinear_resize_backward(xs[0].shape(), &gy)?),
            Op::Add => {
                for _ in 1..xs.len() {
                    to_inputs.push(gy.clone());
                }
                to_inputs.push(gy);
            }
            Op::ChannelGate => {
                let (gx, gg) = k::channel_gate_backward(xs[0], xs[1], &gy)?;
                to_inputs.push(gx);
                to_inputs.push(gg);
            }
            Op::FastFusion { weights, eps } => {
                let w = vec_of(params.get(weights)?);
                let c = k::fast_normalized_coeffs(w, *eps);
                let gc = k::weighted_sum_backward(&xs, &gy);
                let gw = k::fast_normalized_backward(w, *eps, &gc);
                add_param(weights, Tensor::new(Shape::new(gw.len(), 1, 1, 1), gw)?)?;
                to_inputs.extend(c.iter().map(|&ci| gy.scale(ci)));
            }
            Op::SoftmaxFusion { weights } => {
                let c = k::softmax_coeffs(vec_of(params.get(weights)?))?;
                let gc = k::weighted_sum_backward(&xs, &gy);
                let gw = k::softmax_vec_backward(&c, &gc);
                add_param(weights, Tensor::new(Shape::new(gw.len(), 1, 1, 1), gw)?)?;
                to_inputs.extend(c.iter().map(|&ci| gy.scale(ci)));
            }
            Op::FixedFusion { coeffs } => {
                to_inputs.extend(coeffs.iter().map(|&ci| gy.scale(T::lit(ci))));
            }
            Op::SumAll => to_inputs.push(Tensor::full(xs[0].shape(), gy.data()[0])),
        }
        for (inp, gx) in node.inputs.iter().zip(to_inputs) {
            accumulate(&mut grads[inp.0], gx)?;
        }
    }
    Ok(Gradients {
        params: pgrads,
        inputs: igrads,
    })
}
