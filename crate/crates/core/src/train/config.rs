//! Training configuration and its `key=value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{AugmentConfig, BoxJitter};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TRACK_MARGIN};

/// Which losses and stages take part in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Preset {
    #[default]
    Full,
    /// Coordinates only, through soft-argmax.
    NoHeatmapLoss,
    NoL2,
    /// Final coordinates are the coarse ones.
    SingleStage,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Full, Preset::NoHeatmapLoss, Preset::NoL2, Preset::SingleStage];

    pub fn heatmap_loss(self) -> bool {
        self != Preset::NoHeatmapLoss
    }

    pub fn l2_loss(self) -> bool {
        self != Preset::NoL2
    }

    pub fn two_stage(self) -> bool {
        self != Preset::SingleStage
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::NoHeatmapLoss => "no_heatmap_loss",
            Preset::NoL2 => "no_l2",
            Preset::SingleStage => "single_stage",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epoch fraction after which the learning rate drops tenfold.
    pub lr_drop_at: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Weight of the coordinate loss on normalized coordinates.
    pub lambda: f64,
    /// Ground-truth Gaussian width for the coarse heatmaps, heatmap pixels.
    pub sigma: f64,
    /// Ground-truth Gaussian width inside the refinement crops, crop pixels.
    pub sigma_offset: f64,
    pub preset: Preset,
    pub seed: u64,
    pub augment: bool,
    /// Face box growth around the landmarks, per side, as a fraction of the
    /// landmark box diagonal.
    pub box_margin: f64,
    pub box_jitter: BoxJitter,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    /// Synthetic faces to generate when no training manifest is given.
    pub synthetic_count: usize,
    /// Share held out for validation when no validation manifest is given.
    pub val_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 0.02,
            momentum: 0.9,
            lr_drop_at: 0.75,
            clip_norm: 10.0,
            lambda: 10000.0,
            sigma: 1.5,
            sigma_offset: 1.0,
            preset: Preset::Full,
            seed: 0,
            augment: true,
            box_margin: TRACK_MARGIN,
            box_jitter: BoxJitter::default(),
            train_manifest: None,
            val_manifest: None,
            synthetic_count: 512,
            val_fraction: 0.2,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The model as trained under the preset.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            two_stage: self.model.two_stage && self.preset.two_stage(),
            ..self.model.clone()
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.preset.l2_loss() {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if self.augment {
            AugmentConfig::default()
        } else {
            AugmentConfig::none()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if (epoch as f64) >= self.lr_drop_at * self.epochs as f64 {
            self.lr / 10.0
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.lambda >= 0.0 && self.clip_norm >= 0.0) {
            return bad("lambda and clip_norm must be non-negative".into());
        }
        if !(self.sigma > 0.0 && self.sigma_offset > 0.0) {
            return bad("sigmas must be positive".into());
        }
        if !(self.box_margin >= 0.0) {
            return bad(format!("box_margin {} must be non-negative", self.box_margin));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.preset == Preset::NoHeatmapLoss && self.lambda == 0.0 {
            return bad("no_heatmap_loss needs a positive lambda".into());
        }
        self.effective_model().validate()
    }

    fn to_map(&self) -> BTreeMap<String, String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("lr_drop_at", self.lr_drop_at.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("lambda", self.lambda.to_string());
        put("sigma", self.sigma.to_string());
        put("sigma_offset", self.sigma_offset.to_string());
        put("preset", self.preset.to_string());
        put("seed", self.seed.to_string());
        put("augment", self.augment.to_string());
        put("box_margin", self.box_margin.to_string());
        put("box_jitter_shift", self.box_jitter.shift.to_string());
        put("box_jitter_scale_min", self.box_jitter.scale.0.to_string());
        put("box_jitter_scale_max", self.box_jitter.scale.1.to_string());
        put("train_manifest", path(&self.train_manifest));
        put("val_manifest", path(&self.val_manifest));
        put("synthetic_count", self.synthetic_count.to_string());
        put("val_fraction", self.val_fraction.to_string());
        for line in self.model.to_canonical().lines() {
            if let Some((k, v)) = line.split_once('=') {
                put(&format!("model.{k}"), v.to_string());
            }
        }
        m
    }

    /// Sorted `key=value` lines; model keys carry a `model.` prefix.
    pub fn to_canonical(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        let path = |v: &str| {
            let v = v.trim();
            (!v.is_empty()).then(|| PathBuf::from(v))
        };
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.set(k, value);
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "lr_drop_at" => self.lr_drop_at = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "sigma_offset" => self.sigma_offset = num(key, value)?,
            "preset" => self.preset = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "augment" => self.augment = num(key, value)?,
            "box_margin" => self.box_margin = num(key, value)?,
            "box_jitter_shift" => self.box_jitter.shift = num(key, value)?,
            "box_jitter_scale_min" => self.box_jitter.scale.0 = num(key, value)?,
            "box_jitter_scale_max" => self.box_jitter.scale.1 = num(key, value)?,
            "train_manifest" => self.train_manifest = path(value),
            "val_manifest" => self.val_manifest = path(value),
            "synthetic_count" => self.synthetic_count = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of the defaults; `#` starts a comment
    /// line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("preset", "no_l2").unwrap();
        cfg.set("model.width_multiplier", "0.5").unwrap();
        cfg.set("train_manifest", "data/train.jsonl").unwrap();
        cfg.set("box_jitter_shift", "0.02").unwrap();
        let back = TrainConfig::from_canonical(&cfg.to_canonical()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_canonical(), cfg.to_canonical());
    }

    #[test]
    fn preset_semantics() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.effective_model().two_stage);
        cfg.preset = Preset::NoL2;
        assert_eq!(cfg.effective_lambda(), 0.0);
        cfg.preset = Preset::SingleStage;
        assert!(!cfg.effective_model().two_stage);
        assert!(cfg.effective_lambda() > 0.0);
        for p in Preset::ALL {
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn lr_drops_tenfold_at_three_quarters() {
        let cfg = TrainConfig {
            epochs: 8,
            lr: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(5), 0.1);
        assert!((cfg.lr_at(6) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("epochs", "-3").is_err());
        assert!(cfg.set("preset", "half").is_err());
        assert!(TrainConfig::from_canonical("batch_size=0").is_err());
        assert!(TrainConfig::from_canonical("preset=no_heatmap_loss\nlambda=0").is_err());
    }
}
