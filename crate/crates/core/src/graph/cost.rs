use serde::{Deserialize, Serialize};

use super::{infer_shapes, Graph, Op, ParamRole};
use crate::error::{Error, Result};
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: usize,
    pub scope: String,
    pub op: String,
    pub params: u64,
    pub flops: u64,
}

/// Parameter and FLOP totals at one input shape.
///
/// FLOPs use the multiply-accumulate convention: one MAC counts as one FLOP.
/// Pooling, resizing and activations cost one op per output element, batch
/// norm two.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_shape: Shape,
    pub total_params: u64,
    pub total_flops: u64,
    pub peak_activation_elems: u64,
    pub per_node: Vec<NodeCost>,
}

impl CostReport {
    /// Sums over nodes whose scope starts with `prefix`.
    pub fn scope_totals(&self, prefix: &str) -> (u64, u64) {
        self.per_node
            .iter()
            .filter(|n| n.scope == prefix || n.scope.starts_with(&format!("{prefix}/")))
            .fold((0, 0), |(p, f), n| (p + n.params, f + n.flops))
    }
}

fn weight_numel(g: &Graph, names: &[&str]) -> Result<u64> {
    let mut total = 0u64;
    for name in names {
        let spec = g
            .param_spec(name)
            .ok_or_else(|| Error::UnboundParam(name.to_string()))?;
        if spec.role == ParamRole::Weight {
            total += spec.numel() as u64;
        }
    }
    Ok(total)
}

/// Trainable parameter count (buffers excluded).
pub fn count_params(g: &Graph) -> Result<u64> {
    let mut total = 0;
    for node in &g.nodes {
        total += weight_numel(g, &node.op.param_names())?;
    }
    Ok(total)
}

pub fn count_flops(g: &Graph, input: Shape) -> Result<u64> {
    Ok(cost_report(g, input)?.total_flops)
}

fn node_flops(op: &Op, ins: &[Shape], out: Shape) -> u64 {
    let out_n = out.numel() as u64;
    match op {
        Op::Input { .. } => 0,
        Op::Conv2d {
            in_channels, kernel, ..
        } => out_n * (*in_channels * kernel * kernel) as u64,
        Op::DepthwiseConv2d { kernel, .. } => out_n * (kernel * kernel) as u64,
        Op::BiasAdd { .. } | Op::Activation { .. } | Op::Pool2d { .. } | Op::Upsample { .. } => out_n,
        Op::ChannelGate => out_n,
        Op::BatchNorm { .. } => 2 * out_n,
        Op::GlobalAvgPool | Op::SumAll => ins[0].numel() as u64,
        Op::Add => out_n * (ins.len() as u64 - 1),
        Op::FastFusion { .. } | Op::SoftmaxFusion { .. } | Op::FixedFusion { .. } => out_n * ins.len() as u64,
    }
}

pub fn cost_report(g: &Graph, input: Shape) -> Result<CostReport> {
    let shapes = infer_shapes(g, input)?;
    let mut per_node = Vec::with_capacity(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        let ins: Vec<Shape> = node.inputs.iter().map(|x| shapes[x.0]).collect();
        per_node.push(NodeCost {
            node: i,
            scope: node.scope.clone(),
            op: node.op.kind_name().to_string(),
            params: weight_numel(g, &node.op.param_names())?,
            flops: node_flops(&node.op, &ins, shapes[i]),
        });
    }
    Ok(CostReport {
        input_shape: input,
        total_params: per_node.iter().map(|n| n.params).sum(),
        total_flops: per_node.iter().map(|n| n.flops).sum(),
        peak_activation_elems: peak_activation(g, &shapes),
        per_node,
    })
}

/// Max over the topological schedule of the elements held by live tensors.
/// A value is live from its producer until its last consumer; graph outputs
/// stay live to the end.
fn peak_activation(g: &Graph, shapes: &[Shape]) -> u64 {
    let n = g.nodes.len();
    let mut last_use: Vec<usize> = (0..n).collect();
    for (i, node) in g.nodes.iter().enumerate() {
        for inp in &node.inputs {
            last_use[inp.0] = last_use[inp.0].max(i);
        }
    }
    for (_, id) in &g.outputs {
        last_use[id.0] = n;
    }
    let mut release_at: Vec<u64> = vec![0; n + 1];
    let mut live = 0u64;
    let mut peak = 0u64;
    for i in 0..n {
        let size = shapes[i].numel() as u64;
        live += size;
        release_at[last_use[i]] += size;
        peak = peak.max(live);
        live -= release_at[i];
    }
    peak
}
