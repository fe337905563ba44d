//! Whole-model configuration, the shipped model zoo, and graph assembly.

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, extend_pyramid, BackboneConfig, BlockSpec, Taps};
use crate::blocks::{BnSettings, ConvStyle};
use crate::error::{Error, Result};
use crate::fusion::{build_decoder, build_weighted_sum_head, prediction_head, FpnConfig, Topology};
use crate::graph::{count_flops, Graph, GraphBuilder};
use crate::tensor::{ActKind, PoolKind, Shape};

/// Name of the image input of every built model.
pub const INPUT: &str = "image";
/// Name of the logits output of every built model.
pub const LOGITS: &str = "logits";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// MBConv blocks with squeeze-and-excitation.
    Eseg,
    /// Fused blocks without squeeze-and-excitation.
    Lite,
}

fn default_classes() -> usize {
    19
}

fn default_in_channels() -> usize {
    3
}

fn default_topology() -> Topology {
    Topology::Bifpn
}

fn default_pool() -> PoolKind {
    PoolKind::Avg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub family: Family,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub fpn_channels: usize,
    pub fpn_repeats: usize,
    pub min_level: usize,
    pub max_level: usize,
    pub conv_style: ConvStyle,
    pub activation: ActKind,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_topology")]
    pub topology: Topology,
    /// Pooling for levels above P5 and for the decoder's bottom-up path.
    #[serde(default = "default_pool")]
    pub extra_pool: PoolKind,
    #[serde(default)]
    pub bn: BnSettings,
    /// Overrides the family's default stage table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_table: Option<Vec<BlockSpec>>,
}

const ZOO: [(&str, &str); 6] = [
    ("eseg-lite-s", include_str!("../zoo/eseg-lite-s.json")),
    ("eseg-lite-m", include_str!("../zoo/eseg-lite-m.json")),
    ("eseg-lite-l", include_str!("../zoo/eseg-lite-l.json")),
    ("eseg-s", include_str!("../zoo/eseg-s.json")),
    ("eseg-m", include_str!("../zoo/eseg-m.json")),
    ("eseg-l", include_str!("../zoo/eseg-l.json")),
];

pub fn zoo_names() -> Vec<&'static str> {
    ZOO.iter().map(|(n, _)| *n).collect()
}

impl ModelConfig {
    /// Loads a shipped zoo entry by name.
    pub fn zoo(name: &str) -> Result<Self> {
        let (_, text) = ZOO.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            Error::Config(format!(
                "unknown model `{name}`; valid models: {}",
                zoo_names().join(", ")
            ))
        })?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Width-0.25 Lite model at P3–P6 for 64×64 inputs.
    pub fn desk_toy(num_classes: usize) -> Self {
        ModelConfig {
            name: "eseg-lite-toy".into(),
            family: Family::Lite,
            width_mult: 0.25,
            depth_mult: 0.4,
            fpn_channels: 32,
            fpn_repeats: 1,
            min_level: 3,
            max_level: 6,
            conv_style: ConvStyle::Regular,
            activation: ActKind::Relu,
            num_classes,
            in_channels: 3,
            topology: Topology::Bifpn,
            extra_pool: PoolKind::Avg,
            bn: BnSettings {
                eps: crate::tensor::BN_EPS,
                momentum: 0.1,
            },
            stage_table: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_level < 2 {
            return Err(Error::Config(format!(
                "min_level must be at least 2, got {}",
                self.min_level
            )));
        }
        if self.max_level > 9 || self.max_level < self.min_level {
            return Err(Error::Config(format!(
                "max_level must lie in {}..=9, got {}",
                self.min_level, self.max_level
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        self.backbone().validate()?;
        self.decoder().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut bb = match self.family {
            Family::Eseg => BackboneConfig::efficientnet(self.width_mult, self.depth_mult),
            Family::Lite => BackboneConfig::lite(self.width_mult, self.depth_mult),
        };
        bb.activation = self.activation;
        bb.bn = self.bn;
        if let Some(t) = &self.stage_table {
            bb.stage_table = t.clone();
        }
        bb
    }

    pub fn decoder(&self) -> FpnConfig {
        FpnConfig {
            min_level: self.min_level,
            max_level: self.max_level,
            channels: self.fpn_channels,
            repeats: self.fpn_repeats,
            topology: self.topology,
            conv_style: self.conv_style,
            activation: self.activation,
            downsample: self.extra_pool,
            bn: self.bn,
        }
    }

    /// Spatial divisibility required of the input.
    pub fn required_multiple(&self) -> usize {
        1 << self.max_level.max(5)
    }

    pub fn input_shape(&self, n: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, self.in_channels, h, w)
    }
}

/// Builds the full graph with input [`INPUT`] and output [`LOGITS`].
///
/// Marks: `backbone/P{i}`, `pyramid/P{i}`, `decoder/P{i}`, `head/fused`, `head/logits`.
pub fn build_model(cfg: &ModelConfig) -> Result<Graph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    b.set_required_multiple(cfg.required_multiple());
    let x = b.input(INPUT, cfg.in_channels);
    let mut taps: Taps = build_backbone(&mut b, x, &cfg.backbone())?;
    if cfg.max_level > 5 {
        taps.extend(extend_pyramid(&mut b, taps[&5], cfg.max_level, cfg.extra_pool)?);
    }
    let levels = build_decoder(&mut b, &taps, &cfg.decoder())?;
    for (l, id) in &levels {
        b.mark(format!("decoder/P{l}"), *id);
    }
    let fused = build_weighted_sum_head(&mut b, &levels, cfg.min_level)?;
    b.mark("head/fused", fused);
    let logits = prediction_head(
        &mut b,
        fused,
        cfg.num_classes,
        cfg.min_level,
        cfg.conv_style,
        cfg.activation,
        cfg.bn,
    )?;
    b.output(LOGITS, logits);
    b.finish()
}

/// FPN width (a multiple of 8) whose model FLOPs best match the BiFPN variant of `cfg`.
pub fn match_fpn_channels(cfg: &ModelConfig, h: usize, w: usize) -> Result<usize> {
    let shape = cfg.input_shape(1, h, w);
    let target = count_flops(
        &build_model(&ModelConfig {
            topology: Topology::Bifpn,
            ..cfg.clone()
        })?,
        shape,
    )? as f64;
    let mut best = (f64::INFINITY, 8);
    for ch in (8..=1024).step_by(8) {
        let fpn = ModelConfig {
            topology: Topology::Fpn,
            fpn_channels: ch,
            ..cfg.clone()
        };
        let f = count_flops(&build_model(&fpn)?, shape)? as f64;
        let gap = (f - target).abs();
        if gap < best.0 {
            best = (gap, ch);
        }
        if f > target {
            break;
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::round_filters;
    use crate::graph::{count_params, infer_shapes, Op};

    #[test]
    fn zoo_matches_scaling_table() {
        let rows = [
            ("eseg-lite-s", 0.4, 0.6, 64, 1),
            ("eseg-lite-m", 0.6, 1.0, 80, 2),
            ("eseg-lite-l", 1.0, 1.0, 96, 3),
            ("eseg-s", 1.0, 1.1, 96, 4),
            ("eseg-m", 1.4, 1.8, 192, 5),
            ("eseg-l", 2.0, 3.1, 288, 6),
        ];
        assert_eq!(zoo_names().len(), rows.len());
        for (name, w, d, ch, r) in rows {
            let c = ModelConfig::zoo(name).unwrap();
            assert_eq!(
                (c.width_mult, c.depth_mult, c.fpn_channels, c.fpn_repeats),
                (w, d, ch, r),
                "{name}"
            );
            assert_eq!(c.min_level, if name.contains("lite") { 3 } else { 2 });
            assert_eq!(c.max_level, 9);
        }
        let err = ModelConfig::zoo("eseg-xl").unwrap_err().to_string();
        assert!(err.contains("eseg-s") && err.contains("eseg-lite-l"), "{err}");
    }

    #[test]
    fn stage_widths_follow_round_filters() {
        for name in zoo_names() {
            let cfg = ModelConfig::zoo(name).unwrap();
            let g = build_model(&cfg).unwrap();
            let bb = cfg.backbone();
            for (stage, spec) in bb.stage_table.iter().enumerate() {
                let want = round_filters(spec.out_ch, cfg.width_mult);
                let blocks: Vec<_> = g
                    .blocks
                    .iter()
                    .filter(|b| b.scope.starts_with(&format!("backbone/stage{}/", stage + 1)))
                    .collect();
                assert!(!blocks.is_empty());
                for b in blocks {
                    match &b.spec {
                        crate::blocks::Block::MbConv(m) => assert_eq!(m.out_ch, want, "{name} stage {stage}"),
                        other => panic!("unexpected block {other:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn eseg_s_shapes() {
        let cfg = ModelConfig::zoo("eseg-s").unwrap();
        let g = build_model(&cfg).unwrap();
        let shapes = infer_shapes(&g, cfg.input_shape(1, 1024, 2048)).unwrap();
        let p9 = shapes[g.mark("pyramid/P9").unwrap().0];
        assert_eq!(p9, Shape::new(1, 320, 2, 4));
        assert_eq!(shapes[g.output(LOGITS).unwrap().0], Shape::new(1, 19, 1024, 2048));
        let shapes = infer_shapes(&g, cfg.input_shape(1, 512, 1024)).unwrap();
        assert_eq!(shapes[g.mark("decoder/P2").unwrap().0], Shape::new(1, 96, 128, 256));
        let err = infer_shapes(&g, cfg.input_shape(1, 1000, 2048)).unwrap_err();
        assert!(err.to_string().contains("512"));
    }

    #[test]
    fn lite_builds_without_mbconv_ops() {
        let g = build_model(&ModelConfig::zoo("eseg-lite-s").unwrap()).unwrap();
        assert_eq!(g.count_kind(|op| matches!(op, Op::DepthwiseConv2d { .. })), 0);
        assert_eq!(g.count_kind(|op| matches!(op, Op::ChannelGate)), 0);
        assert_eq!(
            g.count_kind(|op| matches!(op, Op::Activation { kind: ActKind::Silu })),
            0
        );
    }

    #[test]
    fn toy_model_fits_64() {
        let cfg = ModelConfig::desk_toy(4);
        let g = build_model(&cfg).unwrap();
        let shapes = infer_shapes(&g, cfg.input_shape(2, 64, 64)).unwrap();
        assert_eq!(shapes[g.output(LOGITS).unwrap().0], Shape::new(2, 4, 64, 64));
        assert!(count_params(&g).unwrap() < 2_000_000);
    }

    #[test]
    fn config_json_roundtrip_and_validation() {
        let cfg = ModelConfig::zoo("eseg-m").unwrap();
        assert_eq!(ModelConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        let bad = ModelConfig {
            min_level: 1,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { num_classes: 1, ..cfg };
        assert!(bad.validate().is_err());
    }
}
