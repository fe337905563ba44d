use super::{BlockMeta, Graph, Init, Node, NodeId, Op, ParamRole, ParamSpec};
use crate::blocks::Block;
use crate::error::{Error, Result};
use crate::tensor::{ActKind, PoolKind, Shape};

/// Incremental graph construction with hierarchical scopes.
///
/// Builder methods are infallible; the first structural error (duplicate
/// parameter name, bad node reference) is reported by [`GraphBuilder::finish`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
    channels: Vec<usize>,
    scope: Vec<String>,
    open_block: Option<(usize, NodeId, Block, String)>,
    error: Option<Error>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    pub fn set_required_multiple(&mut self, m: usize) {
        self.graph.required_multiple = m;
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let r = f(self);
        self.pop_scope();
        r
    }

    pub fn scope_path(&self) -> String {
        self.scope.join("/")
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.channels.get(id.0).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.nodes.is_empty()
    }

    fn fail(&mut self, e: Error) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    /// Appends a node with an explicit scope; used when copying nodes between graphs.
    pub fn push_raw(&mut self, op: Op, inputs: Vec<NodeId>, scope: String) -> NodeId {
        let id = NodeId(self.graph.nodes.len());
        for i in &inputs {
            if i.0 >= id.0 {
                self.fail(Error::Graph(format!("{} references unknown node {i}", op.kind_name())));
            }
        }
        let in_ch: Vec<usize> = inputs.iter().map(|i| self.channels(*i)).collect();
        self.channels.push(op.out_channels(&in_ch));
        let block = self.open_block.as_ref().map(|b| b.0);
        self.graph.nodes.push(Node {
            op,
            inputs,
            scope,
            block,
        });
        id
    }

    pub fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let scope = self.scope_path();
        self.push_raw(op, inputs, scope)
    }

    /// Declares a parameter under an explicit full name.
    pub fn declare_param(&mut self, spec: ParamSpec) -> String {
        if self.graph.params.iter().any(|p| p.name == spec.name) {
            self.fail(Error::Graph(format!("duplicate parameter `{}`", spec.name)));
        }
        let name = spec.name.clone();
        self.graph.params.push(spec);
        name
    }

    pub fn param(&mut self, local: &str, shape: Shape, role: ParamRole, init: Init, decay: bool) -> String {
        let scope = self.scope_path();
        let name = if scope.is_empty() {
            local.to_string()
        } else {
            format!("{scope}/{local}")
        };
        self.declare_param(ParamSpec {
            name,
            shape,
            role,
            init,
            decay,
        })
    }

    pub fn input(&mut self, name: &str, channels: usize) -> NodeId {
        self.push(
            Op::Input {
                name: name.to_string(),
                channels,
            },
            vec![],
        )
    }

    /// Bias-free convolution with `padding = k / 2`.
    pub fn conv(&mut self, x: NodeId, out_channels: usize, kernel: usize, stride: usize) -> NodeId {
        let ic = self.channels(x);
        let weight = self.param(
            "conv.weight",
            Shape::new(out_channels, ic, kernel, kernel),
            ParamRole::Weight,
            Init::HeNormal {
                fan_in: ic * kernel * kernel,
            },
            true,
        );
        self.push(
            Op::Conv2d {
                weight,
                in_channels: ic,
                out_channels,
                kernel,
                stride,
                padding: kernel / 2,
            },
            vec![x],
        )
    }

    /// Convolution whose weights start from a small normal (used for classifiers).
    pub fn conv_init(&mut self, x: NodeId, out_channels: usize, kernel: usize, stride: usize, init: Init) -> NodeId {
        let id = self.conv(x, out_channels, kernel, stride);
        if let Some(p) = self.graph.params.last_mut() {
            p.init = init;
        }
        id
    }

    pub fn dwconv(&mut self, x: NodeId, kernel: usize, stride: usize) -> NodeId {
        let c = self.channels(x);
        let weight = self.param(
            "dwconv.weight",
            Shape::new(c, 1, kernel, kernel),
            ParamRole::Weight,
            Init::HeNormal {
                fan_in: kernel * kernel,
            },
            true,
        );
        self.push(
            Op::DepthwiseConv2d {
                weight,
                channels: c,
                kernel,
                stride,
                padding: kernel / 2,
            },
            vec![x],
        )
    }

    pub fn bias(&mut self, x: NodeId) -> NodeId {
        let c = self.channels(x);
        let bias = self.param(
            "bias",
            Shape::new(1, c, 1, 1),
            ParamRole::Weight,
            Init::Const { value: 0.0 },
            false,
        );
        self.push(Op::BiasAdd { bias }, vec![x])
    }

    pub fn bn(&mut self, x: NodeId, eps: f64, momentum: f64) -> NodeId {
        let c = self.channels(x);
        let shape = Shape::new(1, c, 1, 1);
        let gamma = self.param("bn.gamma", shape, ParamRole::Weight, Init::Const { value: 1.0 }, true);
        let beta = self.param("bn.beta", shape, ParamRole::Weight, Init::Const { value: 0.0 }, true);
        let running_mean = self.param(
            "bn.running_mean",
            shape,
            ParamRole::Buffer,
            Init::Const { value: 0.0 },
            false,
        );
        let running_var = self.param(
            "bn.running_var",
            shape,
            ParamRole::Buffer,
            Init::Const { value: 1.0 },
            false,
        );
        self.push(
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            },
            vec![x],
        )
    }

    pub fn act(&mut self, x: NodeId, kind: ActKind) -> NodeId {
        self.push(Op::Activation { kind }, vec![x])
    }

    pub fn pool(&mut self, x: NodeId, kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> NodeId {
        self.push(
            Op::Pool2d {
                kind,
                kernel,
                stride,
                padding,
            },
            vec![x],
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool, vec![x])
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        if factor == 1 {
            return x;
        }
        self.push(Op::Upsample { factor }, vec![x])
    }

    pub fn add(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::Add, xs.to_vec())
    }

    pub fn gate(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        self.push(Op::ChannelGate, vec![x, gate])
    }

    pub fn fast_fusion(&mut self, xs: &[NodeId], eps: f64) -> NodeId {
        let weights = self.param(
            "fusion.weights",
            Shape::new(xs.len(), 1, 1, 1),
            ParamRole::Weight,
            Init::Const { value: 1.0 },
            false,
        );
        self.push(Op::FastFusion { weights, eps }, xs.to_vec())
    }

    pub fn softmax_fusion(&mut self, xs: &[NodeId]) -> NodeId {
        let weights = self.param(
            "level_weights",
            Shape::new(xs.len(), 1, 1, 1),
            ParamRole::Weight,
            Init::Const { value: 1.0 },
            false,
        );
        self.push(Op::SoftmaxFusion { weights }, xs.to_vec())
    }

    pub fn fixed_fusion(&mut self, xs: &[NodeId], coeffs: Vec<f64>) -> NodeId {
        self.push(Op::FixedFusion { coeffs }, xs.to_vec())
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll, vec![x])
    }

    /// Starts tagging subsequently pushed nodes as members of one block.
    pub fn begin_block(&mut self, spec: Block, input: NodeId) {
        if self.open_block.is_some() {
            self.fail(Error::Graph("nested blocks are not supported".into()));
            return;
        }
        let idx = self.graph.blocks.len();
        let scope = self.scope_path();
        self.open_block = Some((idx, input, spec, scope));
    }

    pub fn end_block(&mut self, output: NodeId, start: usize) {
        let Some((idx, input, spec, scope)) = self.open_block.take() else {
            self.fail(Error::Graph("end_block without begin_block".into()));
            return;
        };
        let end = self.graph.nodes.len();
        debug_assert_eq!(idx, self.graph.blocks.len());
        self.graph.blocks.push(BlockMeta {
            scope,
            spec,
            input,
            output,
            start,
            end,
        });
    }

    pub fn mark(&mut self, name: impl Into<String>, id: NodeId) {
        self.graph.marks.insert(name.into(), id);
    }

    pub fn output(&mut self, name: impl Into<String>, id: NodeId) {
        self.graph.outputs.push((name.into(), id));
    }

    pub fn finish(self) -> Result<Graph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if self.open_block.is_some() {
            return Err(Error::Graph("unterminated block".into()));
        }
        self.graph.validate()?;
        Ok(self.graph)
    }
}
