//! Architecture hyperparameters and their canonical text form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heatmap::HeatmapNorm;
use crate::landmarks::LayoutName;
use crate::nn::{Activation, ConvSpec, InvertedResidualSpec, LayerCost};

/// One backbone block before width scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockBase {
    pub channels: usize,
    pub expansion: usize,
    pub stride: usize,
}

impl fmt::Display for BlockBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}s{}", self.channels, self.expansion, self.stride)
    }
}

impl FromStr for BlockBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("block `{s}` is not <channels>x<expansion>s<stride>"));
        let (c, rest) = s.split_once('x').ok_or_else(bad)?;
        let (t, st) = rest.split_once('s').ok_or_else(bad)?;
        Ok(BlockBase {
            channels: c.trim().parse().map_err(|_| bad())?,
            expansion: t.trim().parse().map_err(|_| bad())?,
            stride: st.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub width_multiplier: f64,
    pub layout: LayoutName,
    pub heatmap_size: usize,
    pub feature_stride: usize,
    pub roi_out_size: usize,
    pub roi_box_extent: f64,
    pub two_stage: bool,
    pub heatmap_norm: HeatmapNorm,
    pub stem_channels: usize,
    pub blocks: Vec<BlockBase>,
    /// Shared features are the output of this many backbone blocks.
    pub branch_after: usize,
    pub branch_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = |channels, stride| BlockBase {
            channels,
            expansion: 6,
            stride,
        };
        ModelConfig {
            input_size: 128,
            in_channels: 3,
            width_multiplier: 1.0,
            layout: LayoutName::Synthetic65,
            heatmap_size: 32,
            feature_stride: 4,
            roi_out_size: 8,
            roi_box_extent: 0.25,
            two_stage: true,
            heatmap_norm: HeatmapNorm::Sigmoid,
            stem_channels: 16,
            blocks: vec![b(16, 1), b(24, 2), b(24, 1), b(48, 1), b(48, 1), b(64, 1)],
            branch_after: 4,
            branch_channels: 32,
        }
    }
}

/// Scale by `alpha` and round up to a multiple of 8.
pub fn scale_channels(base: usize, alpha: f64) -> usize {
    let scaled = (base as f64 * alpha).ceil() as usize;
    scaled.div_ceil(8).max(1) * 8
}

/// A convolution in the network together with whether it is batch-normalized
/// during training and the spatial size it produces.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub spec: ConvSpec,
    pub batch_norm: bool,
    pub out_size: usize,
}

impl ModelConfig {
    pub fn num_landmarks(&self) -> usize {
        self.layout.num_points()
    }

    pub fn channels(&self, base: usize) -> usize {
        scale_channels(base, self.width_multiplier)
    }

    pub fn block_specs(&self) -> Vec<InvertedResidualSpec> {
        let mut cin = self.channels(self.stem_channels);
        self.blocks
            .iter()
            .map(|b| {
                let cout = self.channels(b.channels);
                let s = InvertedResidualSpec::new(cin, cout, b.expansion, b.stride);
                cin = cout;
                s
            })
            .collect()
    }

    pub fn shared_channels(&self) -> usize {
        self.block_specs()[self.branch_after - 1].out_channels
    }

    pub fn stage2_channels(&self) -> usize {
        self.channels(self.branch_channels)
    }

    /// Every convolution in execution order, in deployed form (all biased).
    pub fn conv_units(&self) -> Vec<ConvUnit> {
        let mut units = Vec::new();
        let mut size = self.input_size;
        let stem = ConvSpec::new(self.in_channels, self.channels(self.stem_channels), 3)
            .with_stride(2)
            .with_activation(Activation::Relu6);
        size = size.div_ceil(2);
        units.push(ConvUnit {
            name: "stem".into(),
            spec: stem,
            batch_norm: true,
            out_size: size,
        });
        let mut branch_size = size;
        for (i, block) in self.block_specs().iter().enumerate() {
            for (role, spec) in block.convs() {
                if role == "dw" {
                    size = size.div_ceil(block.stride);
                }
                units.push(ConvUnit {
                    name: format!("block{i}.{role}"),
                    spec,
                    batch_norm: true,
                    out_size: size,
                });
            }
            if i + 1 == self.branch_after {
                branch_size = size;
            }
        }
        let last = self.block_specs().last().map_or(0, |b| b.out_channels);
        units.push(ConvUnit {
            name: "head".into(),
            spec: ConvSpec::new(last, self.num_landmarks(), 1),
            batch_norm: false,
            out_size: size,
        });
        if self.two_stage {
            let c2 = self.stage2_channels();
            let relu = Activation::Relu6;
            units.push(ConvUnit {
                name: "branch0".into(),
                spec: ConvSpec::new(self.shared_channels(), c2, 3).with_activation(relu),
                batch_norm: true,
                out_size: branch_size,
            });
            units.push(ConvUnit {
                name: "branch1".into(),
                spec: ConvSpec::new(c2, c2, 3).with_activation(relu),
                batch_norm: true,
                out_size: branch_size,
            });
            let l = self.num_landmarks();
            units.push(ConvUnit {
                name: "predict".into(),
                spec: ConvSpec::new(l * c2, l, 3).with_groups(l),
                batch_norm: false,
                out_size: self.roi_out_size,
            });
        }
        units
    }

    /// Per-layer costs for the deployed network.
    pub fn layer_costs(&self) -> Vec<LayerCost> {
        self.conv_units()
            .into_iter()
            .map(|u| LayerCost::new(u.name, u.spec, u.out_size, u.out_size))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(0.25..=2.0).contains(&self.width_multiplier) {
            return err(format!("width multiplier {} outside [0.25, 2]", self.width_multiplier));
        }
        if self.in_channels == 0 || self.num_landmarks() == 0 {
            return err("empty input channels or landmark set".into());
        }
        if self.heatmap_size < 2 || self.input_size % self.heatmap_size != 0 {
            return err(format!(
                "heatmap size {} must divide input size {}",
                self.heatmap_size, self.input_size
            ));
        }
        if self.input_size / self.heatmap_size != self.feature_stride {
            return err(format!(
                "input {} / heatmap {} != feature stride {}",
                self.input_size, self.heatmap_size, self.feature_stride
            ));
        }
        if self.blocks.is_empty() || !(1..=self.blocks.len()).contains(&self.branch_after) {
            return err(format!("branch point {} outside the block list", self.branch_after));
        }
        for b in self.block_specs() {
            b.validate()?;
        }
        let total_stride: usize = 2 * self.blocks.iter().map(|b| b.stride).product::<usize>();
        let branch_stride: usize = 2 * self.blocks[..self.branch_after].iter().map(|b| b.stride).product::<usize>();
        if total_stride != self.feature_stride || branch_stride != self.feature_stride {
            return err(format!(
                "backbone stride {total_stride} (shared features {branch_stride}) != feature stride {}",
                self.feature_stride
            ));
        }
        if self.roi_out_size < 2 {
            return err("RoI output size must be at least 2".into());
        }
        if !(self.roi_box_extent > 0.0 && self.roi_box_extent <= 1.0) {
            return err(format!("RoI box extent {} outside (0, 1]", self.roi_box_extent));
        }
        if self.roi_box_extent * (self.input_size as f64) < self.roi_out_size as f64 {
            return err(format!(
                "RoI box covers {} px, fewer than {} samples",
                self.roi_box_extent * self.input_size as f64,
                self.roi_out_size
            ));
        }
        self.layout.layout().validate()
    }

    fn to_map(&self) -> BTreeMap<&'static str, String> {
        let blocks: Vec<String> = self.blocks.iter().map(ToString::to_string).collect();
        BTreeMap::from([
            ("blocks", blocks.join(",")),
            ("branch_after", self.branch_after.to_string()),
            ("branch_channels", self.branch_channels.to_string()),
            ("feature_stride", self.feature_stride.to_string()),
            (
                "heatmap_norm",
                match self.heatmap_norm {
                    HeatmapNorm::Sigmoid => "sigmoid",
                    HeatmapNorm::Softmax => "softmax",
                }
                .into(),
            ),
            ("heatmap_size", self.heatmap_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("input_size", self.input_size.to_string()),
            ("layout", self.layout.to_string()),
            ("roi_box_extent", self.roi_box_extent.to_string()),
            ("roi_out_size", self.roi_out_size.to_string()),
            ("stem_channels", self.stem_channels.to_string()),
            ("two_stage", self.two_stage.to_string()),
            ("width_multiplier", self.width_multiplier.to_string()),
        ])
    }

    /// `key=value` lines sorted by key. Floats use the shortest text that
    /// round-trips, so parsing the output gives back an equal config.
    pub fn to_canonical(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        match key {
            "blocks" => {
                self.blocks = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?
            }
            "branch_after" => self.branch_after = num(key, value)?,
            "branch_channels" => self.branch_channels = num(key, value)?,
            "feature_stride" => self.feature_stride = num(key, value)?,
            "heatmap_norm" => {
                self.heatmap_norm = match value.trim() {
                    "sigmoid" => HeatmapNorm::Sigmoid,
                    "softmax" => HeatmapNorm::Softmax,
                    v => return Err(Error::Config(format!("bad value `{v}` for heatmap_norm"))),
                }
            }
            "heatmap_size" => self.heatmap_size = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "input_size" => self.input_size = num(key, value)?,
            "layout" => self.layout = value.trim().parse()?,
            "roi_box_extent" => self.roi_box_extent = num(key, value)?,
            "roi_out_size" => self.roi_out_size = num(key, value)?,
            "stem_channels" => self.stem_channels = num(key, value)?,
            "two_stage" => self.two_stage = num(key, value)?,
            "width_multiplier" => self.width_multiplier = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Parse canonical text; keys not present keep their defaults.
    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
