//! Computation-graph IR.
//!
//! A [`Graph`] is an immutable, topologically ordered list of typed operator
//! nodes plus a manifest of named parameters. The same structure drives shape
//! inference, cost accounting, receptive-field analysis, execution and the
//! rewrite passes in [`crate::deploy`]. Parameter *values* live outside the
//! graph in [`Params`], so costs of large models can be analysed without
//! allocating their weights.

mod builder;
mod cost;
mod exec;
mod params;
mod receptive;
mod shape;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blocks::Block;
use crate::error::{Error, Result};
use crate::tensor::{ActKind, PoolKind};

pub use builder::GraphBuilder;
pub use cost::{cost_report, count_flops, count_params, CostReport, NodeCost};
pub use exec::{backward, backward_from, forward, Gradients, Trace};
pub use params::{Init, ParamRole, ParamSpec, Params};
pub use receptive::{receptive_field, ReceptiveField};
pub use shape::{infer_shapes, infer_shapes_named};

/// Current version of the graph JSON document.
pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input {
        name: String,
        channels: usize,
    },
    Conv2d {
        weight: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        weight: String,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BiasAdd {
        bias: String,
    },
    BatchNorm {
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
        eps: f64,
        momentum: f64,
    },
    Activation {
        kind: ActKind,
    },
    Pool2d {
        kind: PoolKind,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    /// Bilinear upsample by an integer factor.
    Upsample {
        factor: usize,
    },
    Add,
    /// `inputs[0] * inputs[1]` with the second input a `(n, c, 1, 1)` gate.
    ChannelGate,
    /// `sum_i relu(w_i) / (sum_j relu(w_j) + eps) * x_i`.
    FastFusion {
        weights: String,
        eps: f64,
    },
    /// `sum_i softmax(w)_i * x_i`.
    SoftmaxFusion {
        weights: String,
    },
    /// `sum_i c_i * x_i` with constant coefficients.
    FixedFusion {
        coeffs: Vec<f64>,
    },
    SumAll,
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::BiasAdd { .. } => "bias_add",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Activation { .. } => "activation",
            Op::Pool2d { .. } => "pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::Add => "add",
            Op::ChannelGate => "channel_gate",
            Op::FastFusion { .. } => "fast_fusion",
            Op::SoftmaxFusion { .. } => "softmax_fusion",
            Op::FixedFusion { .. } => "fixed_fusion",
            Op::SumAll => "sum_all",
        }
    }

    /// Names of all parameters and buffers this node reads.
    pub fn param_names(&self) -> Vec<&str> {
        match self {
            Op::Conv2d { weight, .. } | Op::DepthwiseConv2d { weight, .. } => vec![weight],
            Op::BiasAdd { bias } => vec![bias],
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![gamma, beta, running_mean, running_var],
            Op::FastFusion { weights, .. } | Op::SoftmaxFusion { weights } => vec![weights],
            _ => Vec::new(),
        }
    }

    /// Output channel count given the input channel counts.
    pub fn out_channels(&self, inputs: &[usize]) -> usize {
        match self {
            Op::Input { channels, .. } => *channels,
            Op::Conv2d { out_channels, .. } => *out_channels,
            Op::SumAll => 1,
            _ => inputs.first().copied().unwrap_or(0),
        }
    }

    /// Window geometry `(kernel, stride)` for receptive-field composition.
    fn window(&self) -> Option<(usize, usize)> {
        match self {
            Op::Conv2d { kernel, stride, .. }
            | Op::DepthwiseConv2d { kernel, stride, .. }
            | Op::Pool2d { kernel, stride, .. } => Some((*kernel, *stride)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Hierarchical name such as `backbone/stage3/block1/expand`.
    pub scope: String,
    /// Index into [`Graph::blocks`] when the node belongs to an annotated block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
}

/// Annotation for a contiguous run of nodes emitted from one [`Block`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub scope: String,
    pub spec: Block,
    pub input: NodeId,
    pub output: NodeId,
    /// Half-open node index range `[start, end)`.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub schema_version: u32,
    pub nodes: Vec<Node>,
    pub outputs: Vec<(String, NodeId)>,
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub blocks: Vec<BlockMeta>,
    /// Named nodes of interest (pyramid levels, decoder outputs, head).
    #[serde(default)]
    pub marks: BTreeMap<String, NodeId>,
    /// Input height and width must be multiples of this.
    pub required_multiple: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Graph {
            schema_version: GRAPH_SCHEMA_VERSION,
            nodes: Vec::new(),
            outputs: Vec::new(),
            params: Vec::new(),
            blocks: Vec::new(),
            marks: BTreeMap::new(),
            required_multiple: 1,
        }
    }
}

impl Graph {
    pub fn empty() -> Self {
        Graph::default()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Graph(format!("node {id} does not exist")))
    }

    pub fn inputs(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Input { name, .. } => Some((name.as_str(), NodeId(i))),
            _ => None,
        })
    }

    pub fn output(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::Graph(format!("no output named `{name}`")))
    }

    pub fn mark(&self, name: &str) -> Result<NodeId> {
        self.marks
            .get(name)
            .copied()
            .ok_or_else(|| Error::Graph(format!("no node marked `{name}`")))
    }

    pub fn param_spec(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn count_kind(&self, pred: impl Fn(&Op) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.op)).count()
    }

    /// Structural validation: topological edges, arity, declared parameters,
    /// unique parameter names, and block ranges.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != GRAPH_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported graph schema version {}",
                self.schema_version
            )));
        }
        if self.required_multiple == 0 {
            return Err(Error::Graph("required_multiple must be >= 1".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for p in &self.params {
            if !names.insert(p.name.as_str()) {
                return Err(Error::Graph(format!("duplicate parameter `{}`", p.name)));
            }
        }
        let mut used = std::collections::BTreeSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                if inp.0 >= i {
                    return Err(Error::Graph(format!(
                        "node %{i} ({}) references later node {inp}",
                        node.op.kind_name()
                    )));
                }
            }
            let arity_ok = match &node.op {
                Op::Input { .. } => node.inputs.is_empty(),
                Op::ChannelGate => node.inputs.len() == 2,
                Op::Add | Op::FastFusion { .. } | Op::SoftmaxFusion { .. } => !node.inputs.is_empty(),
                Op::FixedFusion { coeffs } => !node.inputs.is_empty() && coeffs.len() == node.inputs.len(),
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Graph(format!(
                    "node %{i} ({}) has {} inputs",
                    node.op.kind_name(),
                    node.inputs.len()
                )));
            }
            for p in node.op.param_names() {
                if !names.contains(p) {
                    return Err(Error::UnboundParam(p.to_string()));
                }
                if !used.insert(p.to_string()) {
                    return Err(Error::Graph(format!("parameter `{p}` is shared by several nodes")));
                }
            }
            if let Some(b) = node.block {
                if b >= self.blocks.len() {
                    return Err(Error::Graph(format!("node %{i} refers to missing block {b}")));
                }
            }
        }
        for (name, id) in self.outputs.iter().map(|(n, id)| (n, id)).chain(self.marks.iter()) {
            if id.0 >= self.nodes.len() {
                return Err(Error::Graph(format!("`{name}` points at missing node {id}")));
            }
        }
        for (bi, b) in self.blocks.iter().enumerate() {
            if b.start > b.end || b.end > self.nodes.len() || b.input.0 >= b.start {
                return Err(Error::Graph(format!("block {bi} has an invalid node range")));
            }
            if !(b.start..b.end).contains(&b.output.0) {
                return Err(Error::Graph(format!("block {bi} output lies outside the block")));
            }
            for i in b.start..b.end {
                if self.nodes[i].block != Some(bi) {
                    return Err(Error::Graph(format!("node %{i} is not tagged with block {bi}")));
                }
            }
        }
        Ok(())
    }

    /// Canonical description of the node structure that ignores scopes and
    /// parameter names. Two graphs with equal signatures compute the same
    /// function family.
    pub fn topology_signature(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let attrs = match &n.op {
                Op::Input { channels, .. } => format!("c{channels}"),
                Op::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => format!("{in_channels}>{out_channels}k{kernel}s{stride}p{padding}"),
                Op::DepthwiseConv2d {
                    channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => format!("{channels}k{kernel}s{stride}p{padding}"),
                Op::BatchNorm { eps, momentum, .. } => format!("e{eps}m{momentum}"),
                Op::Activation { kind } => format!("{kind:?}"),
                Op::Pool2d {
                    kind,
                    kernel,
                    stride,
                    padding,
                } => format!("{kind:?}k{kernel}s{stride}p{padding}"),
                Op::Upsample { factor } => format!("x{factor}"),
                Op::FastFusion { eps, .. } => format!("e{eps}"),
                Op::FixedFusion { coeffs } => format!("{coeffs:?}"),
                _ => String::new(),
            };
            let ins: Vec<String> = n.inputs.iter().map(|x| x.0.to_string()).collect();
            out.push_str(&format!("{i}:{}[{attrs}]({});", n.op.kind_name(), ins.join(",")));
        }
        for (name, id) in &self.outputs {
            out.push_str(&format!("out:{name}={};", id.0));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Graph = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}
