//! Named parameter storage, initialization and the AdamW optimizer.

use std::collections::HashMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.values.push(value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Places every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape) -> BoundParams<'t, 'p> {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        BoundParams { store: self, vars }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen<'t, 'p>(&'p self, tape: &'t Tape) -> BoundParams<'t, 'p> {
        let vars = self.values.iter().map(|v| tape.constant(v.clone())).collect();
        BoundParams { store: self, vars }
    }
}

pub struct BoundParams<'t, 'p> {
    store: &'p ParamStore,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t, '_> {
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter '{name}'"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.store.index.get(name).map(|&i| self.vars[i])
    }

    /// Gradients aligned with the store's parameter order.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Tensor {
    Tensor::ones(IxDyn(shape))
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Glorot-uniform init for a `[fan_in, fan_out]` matrix.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_shape_simple_fn(IxDyn(&[fan_in, fan_out]), || rng.random_range(-a..a))
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay_mask: Vec<bool>,
}

impl AdamW {
    /// Weight decay applies to parameters whose name ends in `.weight`.
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.values().iter().map(|v| Tensor::zeros(v.raw_dim())).collect(),
            v: params.values().iter().map(|v| Tensor::zeros(v.raw_dim())).collect(),
            decay_mask: params.names().iter().map(|n| n.ends_with(".weight")).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            if self.decay_mask[i] && self.weight_decay > 0.0 {
                p.mapv_inplace(|x| x * (1.0 - lr * self.weight_decay));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// Cosine annealing from `base` to `base * floor_frac` over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, floor_frac: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    let floor = base * floor_frac;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}
