use std::collections::BTreeMap;

use super::{Graph, Op};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, Shape};

/// Shape of every node for a graph with a single input.
pub fn infer_shapes(g: &Graph, input: Shape) -> Result<Vec<Shape>> {
    let mut named = BTreeMap::new();
    for (name, _) in g.inputs() {
        named.insert(name.to_string(), input);
    }
    infer_shapes_named(g, &named)
}

pub fn infer_shapes_named(g: &Graph, inputs: &BTreeMap<String, Shape>) -> Result<Vec<Shape>> {
    let mut shapes: Vec<Shape> = Vec::with_capacity(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        let ins: Vec<Shape> = node.inputs.iter().map(|x| shapes[x.0]).collect();
        let s = node_shape(g, &node.op, &ins, inputs).map_err(|e| match e {
            Error::Graph(msg) => Error::Graph(format!("node %{i} ({}): {msg}", node.scope)),
            other => other,
        })?;
        shapes.push(s);
    }
    Ok(shapes)
}

fn param_shape(g: &Graph, name: &str) -> Result<Shape> {
    g.param_spec(name)
        .map(|p| p.shape)
        .ok_or_else(|| Error::UnboundParam(name.to_string()))
}

fn expect(op: &'static str, ok: bool, lhs: Shape, rhs: Shape) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, lhs, rhs })
    }
}

fn window_out(op: &'static str, x: Shape, k: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    match (conv_out_dim(x.h, k, s, p), conv_out_dim(x.w, k, s, p)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::invalid(op, format!("window k{k}/s{s}/p{p} does not fit {x}"))),
    }
}

fn node_shape(g: &Graph, op: &Op, ins: &[Shape], inputs: &BTreeMap<String, Shape>) -> Result<Shape> {
    Ok(match op {
        Op::Input { name, channels } => {
            let s = *inputs.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
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
            s
        }
        Op::Conv2d {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let x = ins[0];
            let ws = param_shape(g, weight)?;
            expect(
                "conv2d",
                x.c == *in_channels && ws == Shape::new(*out_channels, *in_channels, *kernel, *kernel),
                x,
                ws,
            )?;
            if *padding != 0 && *padding != kernel / 2 {
                return Err(Error::invalid(
                    "conv2d",
                    format!("padding {padding} for kernel {kernel}"),
                ));
            }
            let (h, w) = window_out("conv2d", x, *kernel, *stride, *padding)?;
            Shape::new(x.n, *out_channels, h, w)
        }
        Op::DepthwiseConv2d {
            weight,
            channels,
            kernel,
            stride,
            padding,
        } => {
            let x = ins[0];
            let ws = param_shape(g, weight)?;
            expect(
                "depthwise_conv2d",
                x.c == *channels && ws == Shape::new(*channels, 1, *kernel, *kernel),
                x,
                ws,
            )?;
            let (h, w) = window_out("depthwise_conv2d", x, *kernel, *stride, *padding)?;
            Shape::new(x.n, x.c, h, w)
        }
        Op::BiasAdd { bias } => {
            let bs = param_shape(g, bias)?;
            expect("bias_add", bs == Shape::new(1, ins[0].c, 1, 1), ins[0], bs)?;
            ins[0]
        }
        Op::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } => {
            let want = Shape::new(1, ins[0].c, 1, 1);
            for p in [gamma, beta, running_mean, running_var] {
                let ps = param_shape(g, p)?;
                expect("batch_norm", ps == want, ins[0], ps)?;
            }
            ins[0]
        }
        Op::Activation { .. } => ins[0],
        Op::Pool2d {
            kernel,
            stride,
            padding,
            ..
        } => {
            if *kernel == 0 || *padding > kernel / 2 {
                return Err(Error::invalid("pool2d", format!("kernel {kernel}, padding {padding}")));
            }
            let (h, w) = window_out("pool2d", ins[0], *kernel, *stride, *padding)?;
            ins[0].with_hw(h, w)
        }
        Op::GlobalAvgPool => ins[0].with_hw(1, 1),
        Op::Upsample { factor } => {
            if *factor == 0 {
                return Err(Error::invalid("upsample", "factor must be >= 1"));
            }
            ins[0].with_hw(ins[0].h * factor, ins[0].w * factor)
        }
        Op::Add | Op::FixedFusion { .. } => {
            for s in &ins[1..] {
                expect("add", *s == ins[0], ins[0], *s)?;
            }
            ins[0]
        }
        Op::FastFusion { weights, .. } | Op::SoftmaxFusion { weights } => {
            for s in &ins[1..] {
                expect("fusion", *s == ins[0], ins[0], *s)?;
            }
            let ws = param_shape(g, weights)?;
            expect("fusion", ws == Shape::new(ins.len(), 1, 1, 1), ins[0], ws)?;
            ins[0]
        }
        Op::ChannelGate => {
            let want = Shape::new(ins[0].n, ins[0].c, 1, 1);
            expect("channel_gate", ins[1] == want, ins[0], ins[1])?;
            ins[0]
        }
        Op::SumAll => Shape::new(1, 1, 1, 1),
    })
}
