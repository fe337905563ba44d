//! Multi-scale decoders (BiFPN and plain FPN) and the softmax-weighted prediction head.

use serde::{Deserialize, Serialize};

use crate::backbone::Taps;
use crate::blocks::{emit_block, Block, BnSettings, ConvBlock, ConvStyle};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId, Op, Params};
use crate::scalar::Scalar;
use crate::tensor::{self as k, ActKind, PoolKind, Tensor};

/// Epsilon of the fast-normalized fusion used inside the decoder.
pub const FUSION_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Bifpn,
    Fpn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpnConfig {
    pub min_level: usize,
    pub max_level: usize,
    pub channels: usize,
    pub repeats: usize,
    pub topology: Topology,
    pub conv_style: ConvStyle,
    pub activation: ActKind,
    /// Pooling used on the bottom-up path.
    #[serde(default = "default_pool")]
    pub downsample: PoolKind,
    #[serde(default)]
    pub bn: BnSettings,
}

fn default_pool() -> PoolKind {
    PoolKind::Avg
}

impl FpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_level == 0 || self.min_level > self.max_level {
            return Err(Error::Config(format!(
                "decoder levels must satisfy 1 <= min_level <= max_level, got {}..={}",
                self.min_level, self.max_level
            )));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "decoder channels must be a positive multiple of 8, got {}",
                self.channels
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("decoder repeats must be at least 1".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> std::ops::RangeInclusive<usize> {
        self.min_level..=self.max_level
    }

    fn node_block(&self, ch: usize) -> Block {
        Block::Conv(ConvBlock {
            in_ch: ch,
            out_ch: ch,
            kernel: 3,
            stride: 1,
            style: self.conv_style,
            activation: Some(self.activation),
            bn: self.bn,
        })
    }
}

/// 1×1 conv + BN bringing every tapped level to the decoder width.
fn project(b: &mut GraphBuilder, taps: &Taps, cfg: &FpnConfig) -> Result<Taps> {
    let mut out = Taps::new();
    for l in cfg.levels() {
        let x = *taps
            .get(&l)
            .ok_or_else(|| Error::Config(format!("decoder needs level P{l}, which is not tapped")))?;
        let block = Block::Conv(ConvBlock {
            in_ch: b.channels(x),
            out_ch: cfg.channels,
            kernel: 1,
            stride: 1,
            style: ConvStyle::Regular,
            activation: None,
            bn: cfg.bn,
        });
        out.insert(l, b.scoped(format!("decoder/proj/P{l}"), |b| emit_block(b, x, &block)));
    }
    Ok(out)
}

pub fn build_decoder(b: &mut GraphBuilder, taps: &Taps, cfg: &FpnConfig) -> Result<Taps> {
    match cfg.topology {
        Topology::Bifpn => build_bifpn(b, taps, cfg),
        Topology::Fpn => build_fpn(b, taps, cfg),
    }
}

/// Stacked top-down + bottom-up layers with fast-normalized fusion at every node.
pub fn build_bifpn(b: &mut GraphBuilder, taps: &Taps, cfg: &FpnConfig) -> Result<Taps> {
    cfg.validate()?;
    let mut feats = project(b, taps, cfg)?;
    let (lo, hi) = (cfg.min_level, cfg.max_level);
    let block = cfg.node_block(cfg.channels);
    for r in 0..cfg.repeats {
        let mut td = Taps::new();
        td.insert(hi, feats[&hi]);
        for l in (lo..hi).rev() {
            let node = b.scoped(format!("decoder/layer{r}/td/P{l}"), |b| {
                let up = b.upsample(td[&(l + 1)], 2);
                let f = b.fast_fusion(&[feats[&l], up], FUSION_EPS);
                emit_block(b, f, &block)
            });
            td.insert(l, node);
        }
        let mut out = Taps::new();
        out.insert(lo, td[&lo]);
        for l in lo + 1..=hi {
            let node = b.scoped(format!("decoder/layer{r}/bu/P{l}"), |b| {
                let down = b.pool(out[&(l - 1)], cfg.downsample, 3, 2, 1);
                let mut ins = vec![feats[&l]];
                if l < hi {
                    ins.push(td[&l]);
                }
                ins.push(down);
                let f = b.fast_fusion(&ins, FUSION_EPS);
                emit_block(b, f, &block)
            });
            out.insert(l, node);
        }
        feats = out;
    }
    Ok(feats)
}

/// Single top-down pathway: lateral projections, upsample-and-add, 3×3 smoothing.
///
/// `repeats` is ignored; the pathway is applied once.
pub fn build_fpn(b: &mut GraphBuilder, taps: &Taps, cfg: &FpnConfig) -> Result<Taps> {
    cfg.validate()?;
    let lat = project(b, taps, cfg)?;
    let (lo, hi) = (cfg.min_level, cfg.max_level);
    if lo == hi {
        return Ok(lat);
    }
    let mut td = Taps::new();
    td.insert(hi, lat[&hi]);
    for l in (lo..hi).rev() {
        let node = b.scoped(format!("decoder/td/P{l}"), |b| {
            let up = b.upsample(td[&(l + 1)], 2);
            b.add(&[lat[&l], up])
        });
        td.insert(l, node);
    }
    let block = cfg.node_block(cfg.channels);
    let mut out = Taps::new();
    for l in cfg.levels() {
        out.insert(
            l,
            b.scoped(format!("decoder/smooth/P{l}"), |b| emit_block(b, td[&l], &block)),
        );
    }
    Ok(out)
}

/// Learnable per-level logits of the prediction-head fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub levels: Vec<usize>,
    pub w: Vec<f64>,
}

impl HeadWeights {
    /// Initial state: every logit 1.0.
    pub fn init(levels: impl IntoIterator<Item = usize>) -> Self {
        let levels: Vec<usize> = levels.into_iter().collect();
        let w = vec![1.0; levels.len()];
        HeadWeights { levels, w }
    }

    /// Softmax of the logits; the fixed coefficients used after folding.
    pub fn coefficients(&self) -> Result<Vec<f64>> {
        k::softmax_vec(&self.w)
    }
}

/// Upsamples every level to `target_level` and blends them with `softmax(w)`.
pub fn weighted_sum_head<T: Scalar>(
    levels: &[(usize, &Tensor<T>)],
    hw: &[T],
    target_level: usize,
) -> Result<Tensor<T>> {
    if levels.is_empty() || levels.len() != hw.len() {
        return Err(Error::invalid(
            "weighted_sum_head",
            format!("{} levels but {} weights", levels.len(), hw.len()),
        ));
    }
    let mut ups = Vec::with_capacity(levels.len());
    for &(l, t) in levels {
        if l < target_level {
            return Err(Error::invalid(
                "weighted_sum_head",
                format!("level {l} lies below target level {target_level}"),
            ));
        }
        let f = 1 << (l - target_level);
        let s = t.shape();
        ups.push(k::bilinear_resize(t, s.h * f, s.w * f)?);
    }
    let refs: Vec<&Tensor<T>> = ups.iter().collect();
    let c = k::softmax_coeffs(hw)?;
    k::weighted_sum(&refs, &c)
}

/// Graph form of [`weighted_sum_head`] under scope `head/fuse`.
pub fn build_weighted_sum_head(b: &mut GraphBuilder, levels: &Taps, target_level: usize) -> Result<NodeId> {
    let Some((&lo, _)) = levels.first_key_value() else {
        return Err(Error::Config("head needs at least one level".into()));
    };
    if lo < target_level {
        return Err(Error::Config(format!(
            "head target P{target_level} lies above level P{lo}"
        )));
    }
    let ch: Vec<usize> = levels.values().map(|&id| b.channels(id)).collect();
    if ch.iter().any(|&c| c != ch[0]) {
        return Err(Error::Config(format!(
            "head levels have mismatched channel counts {ch:?}"
        )));
    }
    Ok(b.scoped("head/fuse", |b| {
        let ups: Vec<NodeId> = levels
            .iter()
            .map(|(&l, &id)| b.upsample(id, 1 << (l - target_level)))
            .collect();
        b.softmax_fusion(&ups)
    }))
}

/// 3×3 block, 1×1 classifier with bias, then bilinear upsample by 2^`base_level`.
pub fn prediction_head(
    b: &mut GraphBuilder,
    o: NodeId,
    num_classes: usize,
    base_level: usize,
    conv_style: ConvStyle,
    activation: ActKind,
    bn: BnSettings,
) -> Result<NodeId> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "num_classes must be at least 2, got {num_classes}"
        )));
    }
    let ch = b.channels(o);
    let block = Block::Conv(ConvBlock {
        in_ch: ch,
        out_ch: ch,
        kernel: 3,
        stride: 1,
        style: conv_style,
        activation: Some(activation),
        bn,
    });
    let h = b.scoped("head/conv", |b| emit_block(b, o, &block));
    let logits = b.scoped("head/classifier", |b| {
        let h = b.conv(h, num_classes, 1, 1);
        b.bias(h)
    });
    b.mark("head/logits", logits);
    Ok(b.scoped("output_upsample", |b| b.upsample(logits, 1 << base_level)))
}

/// Replaces every softmax fusion by a fixed weighted sum with the current coefficients.
///
/// Coefficients are computed in `T` and stored losslessly, so the folded graph
/// reproduces the unfolded forward pass bit for bit in `T`.
pub fn fold_head_softmax<T: Scalar>(g: &Graph, params: &Params<T>) -> Result<Graph> {
    let mut out = g.clone();
    let mut dropped = Vec::new();
    for node in &mut out.nodes {
        if let Op::SoftmaxFusion { weights } = &node.op {
            let w: Vec<T> = params.get(weights)?.data().to_vec();
            let coeffs = k::softmax_coeffs(&w)?.iter().map(|c| c.as_f64()).collect();
            dropped.push(weights.clone());
            node.op = Op::FixedFusion { coeffs };
        }
    }
    out.params.retain(|p| !dropped.contains(&p.name));
    out.validate()?;
    Ok(out)
}
