//! The training loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, crop_sample, load_samples, split, synthetic_dataset, AnnotatedSample, SynthConfig};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::model::{save, ModelWeights, TrainableModel};
use crate::nn::Graph;
use crate::tensor::{BnStats, Sgd, Tensor};

use super::config::TrainConfig;
use super::eval::evaluate;
use super::loss::build_loss;

/// Inputs and normalized targets for one step.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N, C, S, S]`
    pub images: Tensor<f32>,
    pub targets: Vec<LandmarkSet>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub heatmap: f64,
    pub offset: f64,
    pub coord: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One JSON line of the metrics log. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub heatmap_loss: Option<f64>,
    pub offset_loss: Option<f64>,
    pub coord_loss: Option<f64>,
    pub val_nme: Option<f64>,
    pub val_inner: Option<f64>,
    pub val_contour: Option<f64>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: TrainableModel,
    /// Weights with the lowest validation error, or the last ones without
    /// a validation set.
    pub best: ModelWeights,
    pub best_val_nme: Option<f64>,
    pub log: Vec<EpochMetrics>,
}

/// Seed of the random draws for one sample in one epoch.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 finalizer over the packed triple
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Augment, crop around the jittered landmark box and normalize targets.
/// Pure in `(sample, config, epoch, index)`.
pub fn prepare_sample(
    sample: &AnnotatedSample,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<(Tensor<f32>, LandmarkSet)> {
    let seed = sample_seed(cfg.seed, epoch, index);
    let layout = cfg.model.layout.layout();
    let aug = augment::augment(sample, seed, &cfg.augment_config(), &layout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_F42D_4C95_7F2D);
    let b = cfg.box_jitter.apply(&aug.face_box(cfg.box_margin)?, &mut rng);
    crop_sample(&aug, &b, cfg.model.input_size)
}

pub fn prepare_batch(samples: &[AnnotatedSample], indices: &[usize], cfg: &TrainConfig, epoch: usize) -> Result<Batch> {
    let s = cfg.model.input_size;
    let mut data = Vec::with_capacity(indices.len() * cfg.model.in_channels * s * s);
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        let (x, t) = prepare_sample(&samples[i], cfg, epoch, i)?;
        data.extend_from_slice(x.data());
        targets.push(t);
    }
    Ok(Batch {
        images: Tensor::new([indices.len(), cfg.model.in_channels, s, s], data)?,
        targets,
    })
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: TrainableModel,
    pub optimizer: Sgd<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub log: Vec<EpochMetrics>,
    pub best: Option<(f64, ModelWeights)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = TrainableModel::init(config.effective_model(), config.seed)?;
        Ok(Trainer {
            optimizer: Sgd::new(config.lr, config.momentum),
            config,
            model,
            epoch: 0,
            step: 0,
            log: Vec::new(),
            best: None,
        })
    }

    /// Sample order for `epoch`, cut into batches.
    pub fn epoch_batches(&self, count: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(self.config.seed, epoch, usize::MAX)));
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            step: self.step,
            detail,
        }
    }

    /// Loss of the current parameters on `batch` without updating them.
    pub fn loss(&self, batch: &Batch) -> Result<StepLoss> {
        let mut g = Graph::new(&self.model.params, true);
        let x = g.input(batch.images.clone());
        let lv = build_loss(&mut g, &self.config, &self.model.config, x, &batch.targets)?;
        let v = |o: Option<crate::tensor::Var>| o.map_or(0.0, |v| g.tape.value(v).data()[0] as f64);
        Ok(StepLoss {
            total: v(Some(lv.total)),
            heatmap: v(lv.heatmap),
            offset: v(lv.offset),
            coord: v(lv.coord),
            grad_norm: 0.0,
        })
    }

    /// One optimizer step; updates normalization statistics as well.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLoss> {
        let (mut out, grads, stats) = {
            let mut g = Graph::new(&self.model.params, true);
            let x = g.input(batch.images.clone());
            let built = build_loss(&mut g, &self.config, &self.model.config, x, &batch.targets);
            let lv = match built {
                Ok(lv) => lv,
                Err(Error::NonFinite(op)) => return Err(self.diverged(format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
            let v = |o: Option<crate::tensor::Var>| o.map_or(0.0, |v| g.tape.value(v).data()[0] as f64);
            let out = StepLoss {
                total: v(Some(lv.total)),
                heatmap: v(lv.heatmap),
                offset: v(lv.offset),
                coord: v(lv.coord),
                grad_norm: 0.0,
            };
            if !out.total.is_finite() {
                return Err(self.diverged(format!("loss is {}", out.total)));
            }
            let grads = g.param_grads(lv.total)?;
            let stats: Vec<(String, BnStats<f32>)> = g.bn_stats().to_vec();
            (out, grads, stats)
        };
        for (name, grad) in grads {
            let p = self.model.params.get_mut(&name).expect("gradient for a known parameter");
            p.grad = Some(grad);
        }
        out.grad_norm = if self.config.clip_norm > 0.0 {
            self.model.params.clip_grad_norm(self.config.clip_norm)
        } else {
            self.model.params.grad_norm()
        };
        if !out.grad_norm.is_finite() {
            self.model.params.zero_grad();
            return Err(self.diverged(format!("gradient norm is {}", out.grad_norm)));
        }
        self.optimizer.lr = self.config.lr_at(self.epoch);
        self.optimizer.step(&mut self.model.params)?;
        for (unit, s) in &stats {
            self.model.running.update(unit, s);
        }
        self.step += 1;
        Ok(out)
    }

    fn validate_model(&self, val: &[AnnotatedSample]) -> Result<(ModelWeights, Option<crate::train::EvalReport>)> {
        let weights = self.model.export()?;
        let report = if val.is_empty() {
            None
        } else {
            Some(evaluate(&weights, val, self.config.box_margin)?)
        };
        Ok((weights, report))
    }

    fn record(&mut self, metrics: EpochMetrics, weights: ModelWeights, out_dir: Option<&Path>) -> Result<()> {
        let improved = match (metrics.val_nme, &self.best) {
            (Some(v), Some((b, _))) => v < *b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            if let Some(dir) = out_dir {
                save(&weights, dir.join("best.taln"))?;
            }
            self.best = Some((metrics.val_nme.unwrap_or(f64::NAN), weights));
        }
        if let Some(dir) = out_dir {
            let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&metrics)?)?;
        }
        self.log.push(metrics);
        Ok(())
    }

    /// Evaluate the untrained model as epoch 0 when nothing is logged yet.
    fn log_initial(&mut self, val: &[AnnotatedSample], out_dir: Option<&Path>) -> Result<()> {
        if !self.log.is_empty() {
            return Ok(());
        }
        let t = Instant::now();
        let (weights, report) = self.validate_model(val)?;
        let metrics = EpochMetrics {
            epoch: 0,
            lr: self.config.lr_at(0),
            train_loss: None,
            heatmap_loss: None,
            offset_loss: None,
            coord_loss: None,
            val_nme: report.as_ref().map(|r| r.overall),
            val_inner: report.as_ref().map(|r| r.inner),
            val_contour: report.as_ref().map(|r| r.contour),
            seconds: t.elapsed().as_secs_f64(),
        };
        self.record(metrics, weights, out_dir)
    }

    pub fn run_epoch(
        &mut self,
        train: &[AnnotatedSample],
        val: &[AnnotatedSample],
        out_dir: Option<&Path>,
    ) -> Result<EpochMetrics> {
        let t = Instant::now();
        let mut sum = StepLoss::default();
        let batches = self.epoch_batches(train.len(), self.epoch);
        for idx in &batches {
            let batch = prepare_batch(train, idx, &self.config, self.epoch)?;
            let s = self.train_step(&batch)?;
            let w = idx.len() as f64;
            sum.total += s.total * w;
            sum.heatmap += s.heatmap * w;
            sum.offset += s.offset * w;
            sum.coord += s.coord * w;
        }
        let lr = self.config.lr_at(self.epoch);
        self.epoch += 1;
        let (weights, report) = self.validate_model(val)?;
        let n = train.len() as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss: Some(sum.total / n),
            heatmap_loss: Some(sum.heatmap / n),
            offset_loss: Some(sum.offset / n),
            coord_loss: Some(sum.coord / n),
            val_nme: report.as_ref().map(|r| r.overall),
            val_inner: report.as_ref().map(|r| r.inner),
            val_contour: report.as_ref().map(|r| r.contour),
            seconds: t.elapsed().as_secs_f64(),
        };
        self.record(metrics.clone(), weights, out_dir)?;
        if let Some(dir) = out_dir {
            super::checkpoint::save_checkpoint(self, dir.join("checkpoint.tckp"))?;
        }
        Ok(metrics)
    }

    /// Train the remaining epochs. `on_epoch` sees every logged entry.
    pub fn fit(
        mut self,
        train: &[AnnotatedSample],
        val: &[AnnotatedSample],
        out_dir: Option<&Path>,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        if self.log.is_empty() {
            self.log_initial(val, out_dir)?;
            on_epoch(self.log.last().expect("initial entry"));
        }
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(train, val, out_dir)?;
            on_epoch(&m);
        }
        let (best_val_nme, best) = self.best.take().expect("initial entry sets a best model");
        Ok(TrainOutcome {
            model: self.model,
            best,
            best_val_nme: (!best_val_nme.is_nan()).then_some(best_val_nme),
            log: self.log,
        })
    }
}

/// Training and validation samples named by the config: manifests when
/// given, otherwise synthetic faces. A missing validation manifest holds out
/// `val_fraction` of the training data.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Vec<AnnotatedSample>, Vec<AnnotatedSample>)> {
    let layout = cfg.model.layout.layout();
    let data = match &cfg.train_manifest {
        Some(path) => load_samples(path, &layout)?,
        None => {
            let synth = SynthConfig {
                layout: cfg.model.layout.clone(),
                ..SynthConfig::default()
            };
            synthetic_dataset(cfg.synthetic_count, cfg.seed, &synth)?
        }
    };
    match &cfg.val_manifest {
        Some(path) => Ok((data, load_samples(path, &layout)?)),
        None => {
            let mut parts = split(data, &[1.0 - cfg.val_fraction, cfg.val_fraction], cfg.seed)?.into_iter();
            let train = parts.next().unwrap_or_default();
            Ok((train, parts.next().unwrap_or_default()))
        }
    }
}

/// Train from scratch on explicit splits.
pub fn train(config: TrainConfig, train: &[AnnotatedSample], val: &[AnnotatedSample]) -> Result<TrainOutcome> {
    Trainer::new(config)?.fit(train, val, None, &mut |_| {})
}
