//! Deployment-oriented architecture rewrites.
//!
//! Passes operate on the block annotations recorded at build time: a changed
//! block is re-emitted from its edited spec, every other node is copied. New
//! parameters created by a pass are freshly initialized (see
//! [`Params::transfer`](crate::graph::Params::transfer)); the passes are
//! architecture transforms for retraining, not weight-preserving compilation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{emit_block, Block, ConvStyle};
use crate::error::{Error, Result};
use crate::graph::{count_flops, count_params, infer_shapes_named, Graph, GraphBuilder, NodeId, Op};
use crate::model::ModelConfig;
use crate::tensor::{ActKind, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteReport {
    pub pass: String,
    /// Blocks or nodes changed by the pass.
    pub matches: usize,
    pub params_before: u64,
    pub params_after: u64,
    /// Spatial size at which FLOPs and output shapes are compared.
    pub probe_hw: (usize, usize),
    pub flops_before: u64,
    pub flops_after: u64,
    pub output_shapes: Vec<(String, Shape)>,
    pub shapes_preserved: bool,
}

impl RewriteReport {
    pub fn param_delta(&self) -> i64 {
        self.params_after as i64 - self.params_before as i64
    }
}

fn probe_inputs(g: &Graph, hw: usize) -> BTreeMap<String, Shape> {
    g.nodes
        .iter()
        .filter_map(|n| match &n.op {
            Op::Input { name, channels } => Some((name.clone(), Shape::new(1, *channels, hw, hw))),
            _ => None,
        })
        .collect()
}

fn output_shapes(g: &Graph, inputs: &BTreeMap<String, Shape>) -> Result<Vec<(String, Shape)>> {
    let shapes = infer_shapes_named(g, inputs)?;
    Ok(g.outputs.iter().map(|(n, id)| (n.clone(), shapes[id.0])).collect())
}

fn report(pass: &str, matches: usize, before: &Graph, after: &Graph) -> Result<RewriteReport> {
    let hw = before.required_multiple.max(after.required_multiple).max(32);
    let inputs = probe_inputs(before, hw);
    // FLOPs are only reported for single-input graphs
    let flops = |g: &Graph| -> Result<u64> {
        match inputs.values().next() {
            Some(s) if inputs.len() == 1 => count_flops(g, *s),
            _ => Ok(0),
        }
    };
    let shapes_before = output_shapes(before, &inputs)?;
    // a pass that breaks shape inference yields a report with shapes_preserved = false
    let shapes_after = output_shapes(after, &inputs).unwrap_or_default();
    Ok(RewriteReport {
        pass: pass.to_string(),
        matches,
        params_before: count_params(before)?,
        params_after: count_params(after)?,
        probe_hw: (hw, hw),
        flops_before: flops(before)?,
        flops_after: flops(after).unwrap_or(0),
        shapes_preserved: shapes_after == shapes_before,
        output_shapes: shapes_after,
    })
}

/// Rebuilds `g`, re-emitting every block for which `edit` returns a new spec.
fn rebuild(g: &Graph, mut edit: impl FnMut(&Block) -> Option<Block>) -> Result<(Graph, usize)> {
    let edits: Vec<Option<Block>> = g
        .blocks
        .iter()
        .map(|b| edit(&b.spec).filter(|s| *s != b.spec))
        .collect();
    let matches = edits.iter().filter(|e| e.is_some()).count();
    if matches == 0 {
        return Ok((g.clone(), 0));
    }
    // nodes inside a replaced block other than its output must not escape it
    let mut replaced_owner = vec![None; g.nodes.len()];
    for (bi, b) in g.blocks.iter().enumerate() {
        if edits[bi].is_some() {
            for slot in &mut replaced_owner[b.start..b.end] {
                *slot = Some(bi);
            }
        }
    }
    let escapes = |id: NodeId, from: Option<usize>| -> bool {
        let owner = replaced_owner[id.0];
        owner.is_some() && owner != from && g.blocks[owner.unwrap()].output != id
    };
    for (i, n) in g.nodes.iter().enumerate() {
        if n.inputs.iter().any(|&x| escapes(x, replaced_owner[i])) {
            return Err(Error::Graph(format!("node {i} reads the inside of a rewritten block")));
        }
    }
    if g.outputs
        .iter()
        .map(|(_, id)| id)
        .chain(g.marks.values())
        .any(|&id| escapes(id, None))
    {
        return Err(Error::Graph("an output or mark points inside a rewritten block".into()));
    }

    let mut b = GraphBuilder::new();
    b.set_required_multiple(g.required_multiple);
    let mut remap: Vec<Option<NodeId>> = vec![None; g.nodes.len()];
    let map = |remap: &[Option<NodeId>], id: NodeId| -> Result<NodeId> {
        remap[id.0].ok_or_else(|| Error::Graph(format!("node {id} is not available after rewriting")))
    };
    let block_at: BTreeMap<usize, usize> = g.blocks.iter().enumerate().map(|(i, b)| (b.start, i)).collect();
    let mut i = 0;
    while i < g.nodes.len() {
        if let Some(&bi) = block_at.get(&i) {
            let meta = &g.blocks[bi];
            let input = map(&remap, meta.input)?;
            b.push_scope(meta.scope.clone());
            if let Some(spec) = &edits[bi] {
                let out = emit_block(&mut b, input, spec);
                remap[meta.output.0] = Some(out);
                b.pop_scope();
            } else {
                let start = b.len();
                b.begin_block(meta.spec.clone(), input);
                b.pop_scope();
                for j in meta.start..meta.end {
                    remap[j] = Some(copy_node(&mut b, g, j, &remap)?);
                }
                b.end_block(map(&remap, meta.output)?, start);
            }
            i = meta.end.max(i + 1);
            continue;
        }
        remap[i] = Some(copy_node(&mut b, g, i, &remap)?);
        i += 1;
    }
    for (name, id) in &g.marks {
        b.mark(name.clone(), map(&remap, *id)?);
    }
    for (name, id) in &g.outputs {
        b.output(name.clone(), map(&remap, *id)?);
    }
    Ok((b.finish()?, matches))
}

fn copy_node(b: &mut GraphBuilder, g: &Graph, i: usize, remap: &[Option<NodeId>]) -> Result<NodeId> {
    let n = &g.nodes[i];
    for p in n.op.param_names() {
        let spec = g.param_spec(p).ok_or_else(|| Error::UnboundParam(p.to_string()))?;
        b.declare_param(spec.clone());
    }
    let inputs = n
        .inputs
        .iter()
        .map(|x| remap[x.0].ok_or_else(|| Error::Graph(format!("node {i} input {x} missing"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(b.push_raw(n.op.clone(), inputs, n.scope.clone()))
}

/// Replaces expand 1×1 + depthwise k×k in every MBConv block by one regular
/// k×k conv, and turns separable conv blocks into regular ones.
///
/// Fails if depthwise convolutions exist outside annotated blocks, since those
/// could not be rewritten.
pub fn rewrite_fuse_mbconv(g: &Graph) -> Result<(Graph, RewriteReport)> {
    let inside: usize = g.blocks.iter().map(|b| b.end - b.start).sum();
    let loose_dw = g
        .nodes
        .iter()
        .filter(|n| n.block.is_none() && matches!(n.op, Op::DepthwiseConv2d { .. }))
        .count();
    if loose_dw > 0 {
        return Err(Error::Graph(format!(
            "{loose_dw} depthwise convolutions lie outside annotated blocks ({inside} annotated nodes)"
        )));
    }
    let (out, matches) = rebuild(g, |spec| match spec {
        Block::MbConv(m) if !m.fused => {
            let mut m = m.clone();
            m.fused = true;
            Some(Block::MbConv(m))
        }
        Block::Conv(c) if c.style == ConvStyle::Separable => {
            let mut c = c.clone();
            c.style = ConvStyle::Regular;
            Some(Block::Conv(c))
        }
        _ => None,
    })?;
    let r = report("fuse_mbconv", matches, g, &out)?;
    Ok((out, r))
}

/// Deletes squeeze-and-excitation gates from every MBConv block.
pub fn rewrite_remove_se(g: &Graph) -> Result<(Graph, RewriteReport)> {
    let (out, matches) = rebuild(g, |spec| match spec {
        Block::MbConv(m) if m.squeeze.is_some() => {
            let mut m = m.clone();
            m.squeeze = None;
            Some(Block::MbConv(m))
        }
        _ => None,
    })?;
    let r = report("remove_se", matches, g, &out)?;
    Ok((out, r))
}

/// Substitutes activation kind `from` by `to` everywhere, block specs included.
pub fn rewrite_swap_activation(g: &Graph, from: ActKind, to: ActKind) -> Result<(Graph, RewriteReport)> {
    let mut out = g.clone();
    let mut matches = 0;
    if from != to {
        for n in &mut out.nodes {
            if let Op::Activation { kind } = &mut n.op {
                if *kind == from {
                    *kind = to;
                    matches += 1;
                }
            }
        }
        for b in &mut out.blocks {
            b.spec.set_activation(from, to);
        }
    }
    out.validate()?;
    let r = report("swap_activation", matches, g, &out)?;
    Ok((out, r))
}

/// Moves the decoder's lowest level and the prediction head from P2 to P3.
pub fn rewrite_shift_base_level(cfg: &ModelConfig) -> Result<ModelConfig> {
    if cfg.min_level != 2 {
        return Err(Error::Config(format!(
            "base level shift expects min_level 2, model `{}` is at {}",
            cfg.name, cfg.min_level
        )));
    }
    let shifted = ModelConfig {
        min_level: 3,
        ..cfg.clone()
    };
    shifted.validate()?;
    Ok(shifted)
}

/// The three graph passes in deployment order: fuse, remove SE, SiLU → ReLU.
pub fn lite_pipeline(g: &Graph) -> Result<(Graph, Vec<RewriteReport>)> {
    let (g1, r1) = rewrite_fuse_mbconv(g)?;
    let (g2, r2) = rewrite_remove_se(&g1)?;
    let (g3, r3) = rewrite_swap_activation(&g2, ActKind::Silu, ActKind::Relu)?;
    Ok((g3, vec![r1, r2, r3]))
}

/// FLOPs of the prediction head's 3×3 block and classifier.
pub fn head_flops(g: &Graph, input: Shape) -> Result<u64> {
    let r = crate::graph::cost_report(g, input)?;
    Ok(r.scope_totals("head/conv").1 + r.scope_totals("head/classifier").1)
}
