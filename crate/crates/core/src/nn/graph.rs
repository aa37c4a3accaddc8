//! Builds layers onto a [`Tape`] from named parameters.
//!
//! A convolution unit named `p` reads `p.weight` and, depending on which
//! names exist, either `p.bn.gamma`/`p.bn.beta` (training form, batch
//! statistics) or `p.bias` (deployed form, normalization already folded).

use crate::error::Result;
use crate::tensor::{BnStats, ParamSet, Real, Tape, Tensor, Var};

use super::block::InvertedResidualSpec;
use super::conv::{Activation, ConvSpec};

pub struct Graph<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParamSet<T>,
    trainable: bool,
    vars: Vec<(String, Var)>,
    bn_stats: Vec<(String, BnStats<T>)>,
}

impl<'p, T: Real> Graph<'p, T> {
    /// `trainable` registers parameters as gradient leaves; otherwise they
    /// enter the tape as constants.
    pub fn new(params: &'p ParamSet<T>, trainable: bool) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            trainable,
            vars: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.get(name).is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.vars.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = self.params.value(name)?.clone();
        let v = if self.trainable {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.push((name.to_string(), v));
        Ok(v)
    }

    /// Convolution, then normalization or bias, then the spec's activation.
    pub fn conv_unit(&mut self, prefix: &str, x: Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let gamma_name = format!("{prefix}.bn.gamma");
        if self.has(&gamma_name) {
            let y = self.tape.conv2d(x, w, None, spec)?;
            let gamma = self.param(&gamma_name)?;
            let beta = self.param(&format!("{prefix}.bn.beta"))?;
            let (y, stats) = self.tape.batch_norm_act(y, gamma, beta, spec.activation)?;
            self.bn_stats.push((prefix.to_string(), stats));
            return Ok(y);
        }
        let bias_name = format!("{prefix}.bias");
        let b = if self.has(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        let y = self.tape.conv2d(x, w, b, spec)?;
        match spec.activation {
            Activation::None => Ok(y),
            Activation::Relu6 => self.tape.relu6(y),
        }
    }

    pub fn inverted_residual(&mut self, prefix: &str, x: Var, spec: &InvertedResidualSpec) -> Result<Var> {
        let mut h = x;
        for (role, conv) in spec.convs() {
            h = self.conv_unit(&format!("{prefix}.{role}"), h, &conv)?;
        }
        if spec.has_skip() {
            h = self.tape.add(h, x)?;
        }
        Ok(h)
    }

    pub fn bn_stats(&self) -> &[(String, BnStats<T>)] {
        &self.bn_stats
    }

    /// Registered parameters in first-use order.
    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Backpropagate `loss` and return one gradient per parameter in the
    /// set; parameters the loss does not reach get zeros.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(String, Tensor<T>)>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .params
            .iter()
            .map(|p| {
                let g = match self.vars.iter().find(|(n, _)| *n == p.name) {
                    Some((_, v)) => grads.wrt(*v),
                    None => Tensor::zeros(p.value.shape().to_vec()),
                };
                (p.name.clone(), g)
            })
            .collect())
    }
}

/// Run one inverted residual block in inference form outside any training
/// graph. Parameters are looked up under `prefix`.
pub fn inverted_residual<T: Real>(
    x: &Tensor<T>,
    spec: &InvertedResidualSpec,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(params, false);
    let xv = g.input(x.clone());
    let y = g.inverted_residual(prefix, xv, spec)?;
    Ok(g.tape.value(y).clone())
}
