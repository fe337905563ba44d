//! Block-level building units shared by the encoder and decoder.
//!
//! A [`Block`] is emitted as a contiguous, annotated node run so that rewrite
//! passes can replace whole blocks instead of pattern-matching node chains.

use serde::{Deserialize, Serialize};

use crate::graph::{GraphBuilder, NodeId};
use crate::tensor::{ActKind, BN_EPS, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnSettings {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnSettings {
    fn default() -> Self {
        BnSettings {
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvStyle {
    /// Depthwise k×k followed by pointwise 1×1.
    Separable,
    Regular,
}

/// Inverted bottleneck. `fused` replaces expand 1×1 + depthwise k×k with one
/// regular k×k convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbConvBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Squeeze width of the squeeze-and-excitation gate, if present.
    pub squeeze: Option<usize>,
    pub activation: ActKind,
    pub fused: bool,
    pub bn: BnSettings,
}

impl MbConvBlock {
    pub fn mid_ch(&self) -> usize {
        self.in_ch * self.expansion
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }
}

/// Convolution + batch norm + optional activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub style: ConvStyle,
    pub activation: Option<ActKind>,
    pub bn: BnSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    MbConv(MbConvBlock),
    Conv(ConvBlock),
}

impl Block {
    pub fn activation(&self) -> Option<ActKind> {
        match self {
            Block::MbConv(b) => Some(b.activation),
            Block::Conv(b) => b.activation,
        }
    }

    pub fn set_activation(&mut self, from: ActKind, to: ActKind) {
        match self {
            Block::MbConv(b) if b.activation == from => b.activation = to,
            Block::Conv(b) if b.activation == Some(from) => b.activation = Some(to),
            _ => {}
        }
    }
}

/// Squeeze width used by EfficientNet: a fraction of the block *input* width.
pub fn se_squeeze(in_ch: usize, se_ratio: f64) -> usize {
    ((in_ch as f64 * se_ratio) as usize).max(1)
}

/// Appends the nodes of `block` under the builder's current scope.
pub fn emit_block(b: &mut GraphBuilder, x: NodeId, block: &Block) -> NodeId {
    let start = b.len();
    b.begin_block(block.clone(), x);
    let out = match block {
        Block::MbConv(m) => emit_mbconv(b, x, m),
        Block::Conv(c) => emit_conv(b, x, c),
    };
    b.end_block(out, start);
    out
}

fn emit_mbconv(b: &mut GraphBuilder, x: NodeId, m: &MbConvBlock) -> NodeId {
    let mid = m.mid_ch();
    let (eps, mom) = (m.bn.eps, m.bn.momentum);
    let mut h = x;
    if m.fused {
        h = b.scoped("fused", |b| {
            let h = b.conv(h, mid, m.kernel, m.stride);
            let h = b.bn(h, eps, mom);
            b.act(h, m.activation)
        });
    } else {
        if m.expansion != 1 {
            h = b.scoped("expand", |b| {
                let h = b.conv(h, mid, 1, 1);
                let h = b.bn(h, eps, mom);
                b.act(h, m.activation)
            });
        }
        h = b.scoped("dw", |b| {
            let h = b.dwconv(h, m.kernel, m.stride);
            let h = b.bn(h, eps, mom);
            b.act(h, m.activation)
        });
    }
    if let Some(sq) = m.squeeze {
        h = b.scoped("se", |b| {
            let s = b.global_avg_pool(h);
            let s = b.scoped("reduce", |b| {
                let s = b.conv(s, sq, 1, 1);
                b.bias(s)
            });
            let s = b.act(s, m.activation);
            let s = b.scoped("expand", |b| {
                let s = b.conv(s, mid, 1, 1);
                b.bias(s)
            });
            let s = b.act(s, ActKind::Sigmoid);
            b.gate(h, s)
        });
    }
    let out = b.scoped("project", |b| {
        let h = b.conv(h, m.out_ch, 1, 1);
        b.bn(h, eps, mom)
    });
    if m.has_residual() {
        b.add(&[out, x])
    } else {
        out
    }
}

fn emit_conv(b: &mut GraphBuilder, x: NodeId, c: &ConvBlock) -> NodeId {
    let h = match c.style {
        ConvStyle::Separable => {
            let h = b.scoped("dw", |b| b.dwconv(x, c.kernel, c.stride));
            b.scoped("pw", |b| b.conv(h, c.out_ch, 1, 1))
        }
        ConvStyle::Regular => b.conv(x, c.out_ch, c.kernel, c.stride),
    };
    let h = b.bn(h, c.bn.eps, c.bn.momentum);
    match c.activation {
        Some(a) => b.act(h, a),
        None => h,
    }
}
