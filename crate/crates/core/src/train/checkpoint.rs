//! Resumable training state.
//!
//! ```text
//! "TCKP" | u32 version | u32 len, training config text
//! u64 epoch | u64 step | u32 len, metrics log (JSON lines)
//! u8 has_best | f64 best validation error
//! tensor table | u64 payload bytes | f32 payload | u32 CRC-32
//! ```
//! Tensors are the parameters, then `velocity/<name>` for every parameter
//! once the optimizer has stepped, `running_mean/<unit>` and
//! `running_var/<unit>`, then `best/<name>` for the best deployed weights.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::io::{put_payload, put_str, put_tensor_table, put_u32, read_payload, read_tensor_table, Reader};
use crate::model::{training_manifest, ModelWeights, RunningStats, TrainableModel};
use crate::tensor::{ParamSet, Sgd, Tensor};

use super::config::TrainConfig;
use super::trainer::{EpochMetrics, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCKP";
const CHECKPOINT_VERSION: u32 = 1;

fn tensors(trainer: &Trainer) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = trainer
        .model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for (p, v) in trainer.model.params.iter().zip(trainer.optimizer.velocity()) {
        out.push((
            format!("velocity/{}", p.name),
            Tensor::new(p.value.shape().to_vec(), v.clone()).expect("velocity matches its parameter"),
        ));
    }
    for (unit, (mean, var)) in &trainer.model.running.stats {
        out.push((format!("running_mean/{unit}"), Tensor::new([mean.len()], mean.clone()).expect("1-d")));
        out.push((format!("running_var/{unit}"), Tensor::new([var.len()], var.clone()).expect("1-d")));
    }
    if let Some((_, best)) = &trainer.best {
        for p in best.params.iter() {
            out.push((format!("best/{}", p.name), p.value.clone()));
        }
    }
    out
}

pub fn checkpoint_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &trainer.config.to_canonical());
    out.extend_from_slice(&(trainer.epoch as u64).to_le_bytes());
    out.extend_from_slice(&(trainer.step as u64).to_le_bytes());
    let mut log = String::new();
    for m in &trainer.log {
        log.push_str(&serde_json::to_string(m)?);
        log.push('\n');
    }
    put_str(&mut out, &log);
    match &trainer.best {
        Some((v, _)) => {
            out.push(1);
            out.extend_from_slice(&v.to_le_bytes());
        }
        None => {
            out.push(0);
            out.extend_from_slice(&f64::NAN.to_le_bytes());
        }
    }
    let ts = tensors(trainer);
    put_tensor_table(&mut out, ts.iter().map(|(n, t)| (n.as_str(), t.shape())));
    put_payload(&mut out, ts.iter().flat_map(|(_, t)| t.data().iter().copied()));
    Ok(out)
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    // write then rename so an interrupted save keeps the previous file
    let path = path.as_ref();
    let tmp = path.with_extension("tckp.partial");
    fs::write(&tmp, checkpoint_bytes(trainer)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader::new(bytes);
    if r.bytes(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("missing TCKP magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = TrainConfig::from_canonical(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;
    let epoch = r.u64()? as usize;
    let step = r.u64()? as usize;
    let log = r
        .string()?
        .lines()
        .map(serde_json::from_str::<EpochMetrics>)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let has_best = r.bytes(1)?[0] == 1;
    let best_val = f64::from_le_bytes(r.bytes(8)?.try_into().expect("8 bytes"));
    let table = read_tensor_table(&mut r)?;
    let total: usize = table.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = read_payload(&mut r, total)?;

    let mut all = Vec::with_capacity(table.len());
    let mut at = 0;
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        all.push((name, Tensor::new(shape, payload[at..at + n].to_vec())?));
        at += n;
    }
    let take = |name: &str| -> Option<Tensor<f32>> { all.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone()) };

    let model_cfg = config.effective_model();
    let mut params = ParamSet::new();
    let mut velocity = Vec::new();
    for m in training_manifest(&model_cfg) {
        let t = take(&m.name).ok_or_else(|| Error::Format(format!("checkpoint lacks {}", m.name)))?;
        if t.shape() != m.shape.as_slice() {
            return Err(Error::Format(format!("{} has shape {:?}", m.name, t.shape())));
        }
        if let Some(v) = take(&format!("velocity/{}", m.name)) {
            velocity.push(v.into_data());
        }
        params.insert(m.name, t)?;
    }
    if !velocity.is_empty() && velocity.len() != params.len() {
        return Err(Error::Format("partial optimizer state".into()));
    }
    let mut running = RunningStats {
        momentum: 0.1,
        ..RunningStats::default()
    };
    for u in model_cfg.conv_units().into_iter().filter(|u| u.batch_norm) {
        let mean = take(&format!("running_mean/{}", u.name));
        let var = take(&format!("running_var/{}", u.name));
        let (Some(mean), Some(var)) = (mean, var) else {
            return Err(Error::Format(format!("checkpoint lacks statistics for {}", u.name)));
        };
        running.stats.insert(u.name, (mean.into_data(), var.into_data()));
    }
    let best = if has_best {
        let mut bp = ParamSet::new();
        for (name, t) in &all {
            if let Some(n) = name.strip_prefix("best/") {
                bp.insert(n, t.clone())?;
            }
        }
        Some((best_val, ModelWeights::new(model_cfg.clone(), bp)?))
    } else {
        None
    };
    let mut optimizer = Sgd::new(config.lr_at(epoch), config.momentum);
    optimizer.set_velocity(velocity);
    Ok(Trainer {
        model: TrainableModel {
            config: model_cfg,
            params,
            running,
        },
        config,
        optimizer,
        epoch,
        step,
        log,
        best,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    checkpoint_from_bytes(&fs::read(path)?)
}
