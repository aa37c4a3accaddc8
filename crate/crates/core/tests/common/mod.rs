#![allow(dead_code)]

pub mod grad_suite;
pub mod oracle_suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tinyalign::model::ModelConfig;
use tinyalign::tensor::{ParamSet, Tape, Var};
use tinyalign::{Result, Tensor};

pub const SEEDS: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape.to_vec(), |_| d.sample(rng))
}

/// Contract a non-scalar output with fixed random weights so every element
/// contributes to the checked loss.
pub fn project(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = randn(tape.value(y).shape(), 1.0, rng);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum_all(p)
}

/// Worst norm-wise relative error between backprop and central differences
/// over `inputs`. `build` gets one leaf per input and returns the loss; it is
/// rebuilt for every perturbation, so it must be deterministic. At most
/// `coords` entries of each input are probed.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    coords: usize,
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let center = tape.value(loss).data()[0];
    let grads = tape.backward(loss).unwrap();

    let mut pick = rng(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let idx: Vec<usize> = if input.len() <= coords {
            (0..input.len()).collect()
        } else {
            sample(&mut pick, input.len(), coords).into_vec()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        let probed = idx.len();
        let mut used = 0;
        for j in idx {
            let mut values = inputs.to_vec();
            values[i].data_mut()[j] += EPS;
            let up = eval(&values);
            values[i].data_mut()[j] -= 2.0 * EPS;
            let down = eval(&values);
            if straddles_kink(up, center, down) {
                continue;
            }
            let numeric = (up - down) / (2.0 * EPS);
            used += 1;
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        assert!(2 * used >= probed, "{used} of {probed} probes were smooth");
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

/// One-sided slopes that disagree mean the probe crossed a clamp or relu
/// corner, where the central difference says nothing about either side.
fn straddles_kink(up: f64, center: f64, down: f64) -> bool {
    let fwd = (up - center) / EPS;
    let bwd = (center - down) / EPS;
    (fwd - bwd).abs() > 1e-4 * fwd.abs().max(bwd.abs()) + 1e-6
}

/// Same check over named parameters of a [`ParamSet`].
pub fn param_grad_check(
    params: &ParamSet<f64>,
    names: &[&str],
    coords: usize,
    seed: u64,
    loss: impl Fn(&ParamSet<f64>) -> (f64, Vec<(String, Tensor<f64>)>),
) -> f64 {
    let (center, grads) = loss(params);
    let mut pick = rng(seed ^ 0x9a7a);
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = &grads.iter().find(|(n, _)| n == name).unwrap().1;
        let len = params.value(name).unwrap().len();
        let idx: Vec<usize> = if len <= coords {
            (0..len).collect()
        } else {
            sample(&mut pick, len, coords).into_vec()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        let probed = idx.len();
        let mut used = 0;
        for j in idx {
            let mut p = params.clone();
            p.get_mut(name).unwrap().value.data_mut()[j] += EPS;
            let up = loss(&p).0;
            p.get_mut(name).unwrap().value.data_mut()[j] -= 2.0 * EPS;
            let down = loss(&p).0;
            if straddles_kink(up, center, down) {
                continue;
            }
            let numeric = (up - down) / (2.0 * EPS);
            used += 1;
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        assert!(2 * used >= probed, "{used} of {probed} probes were smooth");
        let scale = na.sqrt().max(nn.sqrt());
        assert!(scale > 1e-12, "{name} has no gradient");
        worst = worst.max(diff.sqrt() / scale);
    }
    worst
}

/// A two-stage network small enough for finite differences.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    for (k, v) in [
        ("input_size", "32"),
        ("heatmap_size", "8"),
        ("roi_out_size", "4"),
        ("width_multiplier", "0.25"),
        ("layout", "generic5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}
