//! Exact parameter and compute counts.
//!
//! FLOPs here are multiply-accumulates; MAdd counts the multiply and the add
//! separately, so `madd == 2 * flops`. Bias adds are not counted as compute.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::conv::ConvSpec;

/// One convolution at a known output resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub spec: ConvSpec,
    pub out_height: usize,
    pub out_width: usize,
}

impl LayerCost {
    pub fn new(name: impl Into<String>, spec: ConvSpec, out_height: usize, out_width: usize) -> Self {
        LayerCost {
            name: name.into(),
            spec,
            out_height,
            out_width,
        }
    }

    pub fn weight_params(&self) -> u64 {
        self.spec.weight_len() as u64
    }

    pub fn params(&self) -> u64 {
        self.weight_params() + if self.spec.bias { self.spec.out_channels as u64 } else { 0 }
    }

    pub fn flops(&self) -> u64 {
        self.weight_params() * (self.out_height * self.out_width) as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeBudget {
    pub total_params: u64,
    pub total_madd: u64,
    pub total_flops: u64,
    /// Serialized model size; zero until a file layout is attached.
    pub model_bytes: u64,
}

pub fn account(layers: &[LayerCost]) -> ComputeBudget {
    let total_params = layers.iter().map(LayerCost::params).sum();
    let total_flops: u64 = layers.iter().map(LayerCost::flops).sum();
    ComputeBudget {
        total_params,
        total_madd: 2 * total_flops,
        total_flops,
        model_bytes: 0,
    }
}

fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl fmt::Display for ComputeBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Total params  {}", grouped(self.total_params))?;
        writeln!(f, "Total MAdd    {:.2}M ({})", self.total_madd as f64 / 1e6, self.total_madd)?;
        writeln!(f, "Total Flops   {:.2}M ({})", self.total_flops as f64 / 1e6, self.total_flops)?;
        write!(f, "Model Size    {}KB ({} bytes)", self.model_bytes.div_ceil(1024), self.model_bytes)
    }
}
