//! Compute budget and wall-clock latency of a model.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::model::{budget, ModelWeights};
use crate::nn::ComputeBudget;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub params: u64,
    pub madd: u64,
    pub flops: u64,
    pub model_bytes: u64,
    pub runs: usize,
    /// Median single-image inference latency in milliseconds.
    pub median_ms: f64,
}

impl BenchReport {
    pub fn budget(&self) -> ComputeBudget {
        ComputeBudget {
            total_params: self.params,
            total_madd: self.madd,
            total_flops: self.flops,
            model_bytes: self.model_bytes,
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Time `runs` single-image predictions on a fixed mid-gray input after one
/// warm-up run.
pub fn bench(weights: &ModelWeights, runs: usize) -> Result<BenchReport> {
    let b = budget(&weights.config);
    let s = weights.config.input_size;
    let input = Tensor::full([weights.config.in_channels, s, s], 0.5f32);
    weights.predict(&input)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        weights.predict(&input)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchReport {
        params: b.total_params,
        madd: b.total_madd,
        flops: b.total_flops,
        model_bytes: b.model_bytes,
        runs,
        median_ms: median(&mut times),
    })
}
