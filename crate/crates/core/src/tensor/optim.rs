//! Named parameters and momentum SGD.

use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered collection of named parameters. Order is insertion order and is
/// what serialization and the optimizer state follow.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.push(Param { name, value, grad: None });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
        }
    }
}

/// SGD with classical momentum: `v = mu * v + g; w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Default for Sgd<T> {
    fn default() -> Self {
        Sgd::new(1e-2, 0.9)
    }
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<T>>) {
        self.velocity = velocity;
    }

    /// Apply one update and clear the gradients. Every parameter must carry
    /// a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        }
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad.take().expect("checked above");
            if v.len() != g.len() || g.len() != p.value.len() {
                return Err(Error::shape(format!("gradient shape for {}", p.name)));
            }
            for ((w, vel), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = mu * *vel + gi;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}
