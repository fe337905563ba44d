//! EfficientNet-style encoder and the pooled P6+ pyramid extension.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{emit_block, se_squeeze, Block, BnSettings, ConvBlock, ConvStyle, MbConvBlock};
use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, NodeId};
use crate::tensor::{ActKind, PoolKind};

/// Pyramid level → node producing that level.
pub type Taps = BTreeMap<usize, NodeId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Mbconv,
    FusedMbconv,
}

/// One stage row: `repeats` blocks, the first with `stride` and `in_ch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub se_ratio: Option<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub repeats: usize,
}

impl BlockSpec {
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }

    fn validate(&self, stage: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("stage {stage}: {msg}")));
        if self.stride != 1 && self.stride != 2 {
            return bad(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if let Some(r) = self.se_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("se_ratio must lie in (0, 1], got {r}"));
            }
        }
        if self.kernel.is_multiple_of(2) || self.expansion == 0 || self.in_ch == 0 || self.out_ch == 0 {
            return bad("kernel must be odd and widths/expansion positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_table: Vec<BlockSpec>,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub stem_ch: usize,
    pub activation: ActKind,
    #[serde(default)]
    pub bn: BnSettings,
}

/// Scales a channel count by `width_mult`, rounding to a multiple of 8.
pub fn round_filters(base: usize, width_mult: f64) -> usize {
    const DIVISOR: usize = 8;
    let f = base as f64 * width_mult;
    let mut n = ((f + DIVISOR as f64 / 2.0) as usize / DIVISOR * DIVISOR).max(DIVISOR);
    if (n as f64) < 0.9 * f {
        n += DIVISOR;
    }
    n
}

pub fn round_repeats(base: usize, depth_mult: f64) -> usize {
    (base as f64 * depth_mult).ceil() as usize
}

fn b0_table(kind: BlockKind, se_ratio: Option<f64>) -> Vec<BlockSpec> {
    // (expansion, kernel, stride, out, repeats)
    const ROWS: [(usize, usize, usize, usize, usize); 7] = [
        (1, 3, 1, 16, 1),
        (6, 3, 2, 24, 2),
        (6, 5, 2, 40, 2),
        (6, 3, 2, 80, 3),
        (6, 5, 1, 112, 3),
        (6, 5, 2, 192, 4),
        (6, 3, 1, 320, 1),
    ];
    let mut in_ch = 32;
    ROWS.iter()
        .map(|&(expansion, kernel, stride, out_ch, repeats)| {
            let spec = BlockSpec {
                kind,
                expansion,
                kernel,
                stride,
                se_ratio,
                in_ch,
                out_ch,
                repeats,
            };
            in_ch = out_ch;
            spec
        })
        .collect()
}

impl BackboneConfig {
    /// EfficientNet-B0 stage table with the given compound scaling.
    pub fn efficientnet(width_mult: f64, depth_mult: f64) -> Self {
        BackboneConfig {
            stage_table: b0_table(BlockKind::Mbconv, Some(0.25)),
            width_mult,
            depth_mult,
            stem_ch: 32,
            activation: ActKind::Silu,
            bn: BnSettings::default(),
        }
    }

    /// Same layout built from fused blocks without squeeze-and-excitation, using ReLU.
    pub fn lite(width_mult: f64, depth_mult: f64) -> Self {
        BackboneConfig {
            stage_table: b0_table(BlockKind::FusedMbconv, None),
            activation: ActKind::Relu,
            ..Self::efficientnet(width_mult, depth_mult)
        }
    }

    pub fn scaled_stem(&self) -> usize {
        round_filters(self.stem_ch, self.width_mult)
    }

    /// Stage table after width/depth scaling.
    pub fn scaled_stages(&self) -> Vec<BlockSpec> {
        self.stage_table
            .iter()
            .map(|s| BlockSpec {
                in_ch: round_filters(s.in_ch, self.width_mult),
                out_ch: round_filters(s.out_ch, self.width_mult),
                repeats: round_repeats(s.repeats, self.depth_mult),
                ..s.clone()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_table.is_empty() {
            return Err(Error::Config("empty stage table".into()));
        }
        if !(self.width_mult > 0.0 && self.depth_mult > 0.0) {
            return Err(Error::Config("width and depth multipliers must be positive".into()));
        }
        for (i, s) in self.stage_table.iter().enumerate() {
            s.validate(i + 1)?;
        }
        let total: usize = self.stage_table.iter().map(|s| s.stride).product::<usize>() * 2;
        if total != 32 {
            return Err(Error::Config(format!(
                "stage strides reach a total stride of {total}, expected 32"
            )));
        }
        Ok(())
    }
}

/// Emits stem and stages after `x`, returning taps for P1 through P5.
///
/// Each level is tapped at the last block before the next stride-2 stage.
pub fn build_backbone(b: &mut GraphBuilder, x: NodeId, cfg: &BackboneConfig) -> Result<Taps> {
    cfg.validate()?;
    let stages = cfg.scaled_stages();
    let act = cfg.activation;
    let stem = cfg.scaled_stem();
    let in_ch = b.channels(x);
    let mut h = b.scoped("backbone/stem", |b| {
        emit_block(
            b,
            x,
            &Block::Conv(ConvBlock {
                in_ch,
                out_ch: stem,
                kernel: 3,
                stride: 2,
                style: ConvStyle::Regular,
                activation: Some(act),
                bn: cfg.bn,
            }),
        )
    });
    let mut ch = stem;
    let mut level = 1;
    let mut taps = Taps::new();
    for (si, s) in stages.iter().enumerate() {
        for r in 0..s.repeats {
            let stride = if r == 0 { s.stride } else { 1 };
            let block = Block::MbConv(MbConvBlock {
                in_ch: ch,
                out_ch: s.out_ch,
                expansion: s.expansion,
                kernel: s.kernel,
                stride,
                squeeze: s.se_ratio.map(|ratio| se_squeeze(ch, ratio)),
                activation: act,
                fused: s.kind == BlockKind::FusedMbconv,
                bn: cfg.bn,
            });
            h = b.scoped(format!("backbone/stage{}/block{r}", si + 1), |b| {
                emit_block(b, h, &block)
            });
            ch = s.out_ch;
            if stride == 2 {
                level += 1;
            }
        }
        let next_downsamples = stages.get(si + 1).is_none_or(|n| n.stride == 2);
        if next_downsamples {
            taps.insert(level, h);
            b.mark(format!("backbone/P{level}"), h);
        }
    }
    if (1..=5).any(|l| !taps.contains_key(&l)) {
        return Err(Error::Config("stage table does not produce every level P1..P5".into()));
    }
    Ok(taps)
}

/// Appends levels 6..=`max_level` by repeated 3×3 stride-2 pooling of `p5`.
pub fn extend_pyramid(b: &mut GraphBuilder, p5: NodeId, max_level: usize, kind: PoolKind) -> Result<Taps> {
    if !(6..=9).contains(&max_level) {
        return Err(Error::Config(format!("max_level must lie in 6..=9, got {max_level}")));
    }
    let mut taps = Taps::new();
    let mut h = p5;
    for level in 6..=max_level {
        h = b.scoped(format!("pyramid/P{level}"), |b| b.pool(h, kind, 3, 2, 1));
        b.mark(format!("pyramid/P{level}"), h);
        taps.insert(level, h);
    }
    Ok(taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{count_params, forward, infer_shapes, Op, Params};
    use crate::tensor::{BnMode, Shape, Tensor};

    #[test]
    fn round_filters_examples() {
        assert_eq!(round_filters(32, 1.0), 32);
        assert_eq!(round_filters(32, 0.4), 16);
        assert_eq!(round_filters(8, 0.1), 8);
        // 1.4 · 40 = 56 exactly; 2.0 · 112 = 224
        assert_eq!(round_filters(40, 1.4), 56);
        assert_eq!(round_filters(112, 2.0), 224);
    }

    #[test]
    fn round_repeats_examples() {
        assert_eq!(round_repeats(3, 1.0), 3);
        assert_eq!(round_repeats(3, 1.1), 4);
        assert_eq!(round_repeats(4, 0.6), 3);
    }

    fn backbone(cfg: &BackboneConfig) -> (crate::graph::Graph, Taps) {
        let mut b = GraphBuilder::new();
        let x = b.input("image", 3);
        let taps = build_backbone(&mut b, x, cfg).unwrap();
        for (l, id) in &taps {
            b.output(format!("P{l}"), *id);
        }
        (b.finish().unwrap(), taps)
    }

    #[test]
    fn p5_tap_is_one_thirty_second() {
        let (g, taps) = backbone(&BackboneConfig::efficientnet(1.0, 1.0));
        let shapes = infer_shapes(&g, Shape::new(1, 3, 512, 512)).unwrap();
        for (l, id) in &taps {
            let s = shapes[id.0];
            assert_eq!((s.h, s.w), (512 >> l, 512 >> l), "level {l}");
        }
        assert_eq!(shapes[taps[&5].0].c, 320);
    }

    #[test]
    fn lite_has_no_depthwise_or_se() {
        let (g, _) = backbone(&BackboneConfig::lite(0.4, 0.6));
        assert_eq!(g.count_kind(|op| matches!(op, Op::DepthwiseConv2d { .. })), 0);
        assert_eq!(g.count_kind(|op| matches!(op, Op::ChannelGate)), 0);
        assert_eq!(
            g.count_kind(|op| matches!(
                op,
                Op::Activation {
                    kind: ActKind::Silu | ActKind::Sigmoid
                }
            )),
            0
        );
    }

    #[test]
    fn strides_must_reach_32() {
        let mut cfg = BackboneConfig::efficientnet(1.0, 1.0);
        cfg.stage_table[5].stride = 1;
        let mut b = GraphBuilder::new();
        let x = b.input("image", 3);
        assert!(matches!(build_backbone(&mut b, x, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn pyramid_halves_and_has_no_params() {
        let mut b = GraphBuilder::new();
        let x = b.input("p5", 8);
        let taps = extend_pyramid(&mut b, x, 9, PoolKind::Avg).unwrap();
        b.output("P9", taps[&9]);
        let g = b.finish().unwrap();
        assert_eq!(count_params(&g).unwrap(), 0);
        let shapes = infer_shapes(&g, Shape::new(1, 8, 32, 64)).unwrap();
        let hw: Vec<_> = (6..=9).map(|l| (shapes[taps[&l].0].h, shapes[taps[&l].0].w)).collect();
        assert_eq!(hw, vec![(16, 32), (8, 16), (4, 8), (2, 4)]);

        let t = Tensor::<f64>::full(Shape::new(1, 8, 32, 64), 2.5);
        let tr = forward(&g, &Params::new(), &BTreeMap::from([("p5".into(), t)]), BnMode::Infer).unwrap();
        for l in 6..=9 {
            assert!(tr.value(taps[&l]).data().iter().all(|&v| v == 2.5));
        }
        let mut b = GraphBuilder::new();
        let x = b.input("p5", 8);
        assert!(extend_pyramid(&mut b, x, 10, PoolKind::Avg).is_err());
        assert!(extend_pyramid(&mut b, x, 5, PoolKind::Avg).is_err());
    }
}
