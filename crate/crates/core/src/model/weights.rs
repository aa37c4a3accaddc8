//! Parameter manifests, initialization, running statistics and export.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::fold_batch_norm;
use crate::tensor::{BnStats, ParamSet, Real, Tensor};

use super::config::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn entry(name: String, shape: impl Into<Vec<usize>>) -> ManifestEntry {
    ManifestEntry {
        name,
        shape: shape.into(),
    }
}

/// Parameters of the deployed network: every convolution has a bias and no
/// normalization.
pub fn manifest(config: &ModelConfig) -> Vec<ManifestEntry> {
    config
        .conv_units()
        .into_iter()
        .flat_map(|u| {
            [
                entry(format!("{}.weight", u.name), u.spec.weight_shape()),
                entry(format!("{}.bias", u.name), [u.spec.out_channels]),
            ]
        })
        .collect()
}

/// Parameters optimized during training: normalized convolutions carry
/// `bn.gamma`/`bn.beta` instead of a bias.
pub fn training_manifest(config: &ModelConfig) -> Vec<ManifestEntry> {
    let mut out = Vec::new();
    for u in config.conv_units() {
        out.push(entry(format!("{}.weight", u.name), u.spec.weight_shape()));
        if u.batch_norm {
            out.push(entry(format!("{}.bn.gamma", u.name), [u.spec.out_channels]));
            out.push(entry(format!("{}.bn.beta", u.name), [u.spec.out_channels]));
        } else {
            out.push(entry(format!("{}.bias", u.name), [u.spec.out_channels]));
        }
    }
    out
}

fn check_against(params: &ParamSet<f32>, manifest: &[ManifestEntry]) -> Result<()> {
    if params.len() != manifest.len() {
        return Err(Error::Format(format!(
            "{} tensors, manifest lists {}",
            params.len(),
            manifest.len()
        )));
    }
    for (p, m) in params.iter().zip(manifest) {
        if p.name != m.name || p.value.shape() != m.shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match manifest entry {} {:?}",
                p.name,
                p.value.shape(),
                m.name,
                m.shape
            )));
        }
    }
    Ok(())
}

/// A deployable model: configuration plus inference-form parameters.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl ModelWeights {
    pub fn new(config: ModelConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        check_against(&params, &manifest(&config))?;
        Ok(ModelWeights { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut params = ParamSet::new();
        for m in manifest(&config) {
            params.insert(m.name, Tensor::zeros(m.shape))?;
        }
        ModelWeights::new(config, params)
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }
}

/// Exponential moving averages of batch statistics per normalized unit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub momentum: f64,
    pub stats: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl RunningStats {
    pub fn update<T: Real>(&mut self, unit: &str, batch: &BnStats<T>) {
        let m = self.momentum as f32;
        let n = batch.count as f32;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let entry = self.stats.entry(unit.to_string()).or_insert_with(|| {
            (vec![0.0; batch.mean.len()], vec![1.0; batch.var.len()])
        });
        for (r, b) in entry.0.iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b.as_f64() as f32;
        }
        for (r, b) in entry.1.iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b.as_f64() as f32 * unbias;
        }
    }
}

/// Training-form model: parameters plus normalization running statistics.
#[derive(Clone, Debug)]
pub struct TrainableModel {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub running: RunningStats,
}

impl TrainableModel {
    /// He-normal convolution weights, unit gamma, zero beta and bias. The
    /// heatmap and predict heads start near zero so initial heatmaps are
    /// nearly flat.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let units = config.conv_units();
        let mut params = ParamSet::new();
        for m in training_manifest(&config) {
            let len: usize = m.shape.iter().product();
            let data: Vec<f32> = if let Some(unit) = m.name.strip_suffix(".weight") {
                let u = units.iter().find(|u| u.name == unit).expect("manifest unit");
                let fan_in = (u.spec.in_per_group() * u.spec.kernel * u.spec.kernel) as f64;
                let std = if u.batch_norm { (2.0 / fan_in).sqrt() } else { 0.01 };
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..len).map(|_| dist.sample(&mut rng) as f32).collect()
            } else if m.name.ends_with(".bn.gamma") {
                vec![1.0; len]
            } else {
                vec![0.0; len]
            };
            params.insert(m.name, Tensor::new(m.shape, data)?)?;
        }
        let mut running = RunningStats {
            momentum: 0.1,
            ..RunningStats::default()
        };
        for u in units.iter().filter(|u| u.batch_norm) {
            let c = u.spec.out_channels;
            running.stats.insert(u.name.clone(), (vec![0.0; c], vec![1.0; c]));
        }
        Ok(TrainableModel { config, params, running })
    }

    /// Fold normalization into the convolutions, producing the deployed form.
    pub fn export(&self) -> Result<ModelWeights> {
        let mut params = ParamSet::new();
        for u in self.config.conv_units() {
            let w = self.params.value(&format!("{}.weight", u.name))?;
            if u.batch_norm {
                let gamma = self.params.value(&format!("{}.bn.gamma", u.name))?;
                let beta = self.params.value(&format!("{}.bn.beta", u.name))?;
                let (mean, var) = self
                    .running
                    .stats
                    .get(&u.name)
                    .ok_or_else(|| Error::Format(format!("no running statistics for {}", u.name)))?;
                let (fw, fb) = fold_batch_norm(w, None, gamma.data(), beta.data(), mean, var)?;
                params.insert(format!("{}.weight", u.name), fw)?;
                params.insert(format!("{}.bias", u.name), Tensor::new([fb.len()], fb)?)?;
            } else {
                params.insert(format!("{}.weight", u.name), w.clone())?;
                params.insert(
                    format!("{}.bias", u.name),
                    self.params.value(&format!("{}.bias", u.name))?.clone(),
                )?;
            }
        }
        ModelWeights::new(self.config.clone(), params)
    }
}
