use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ParamGrads;
use crate::model::ParameterStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// Adam with bias correction and constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: BTreeMap<usize, Array2<T>>,
    v: BTreeMap<usize, Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for non-trainable parameters are ignored.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        let mut sq = 0.0f64;
        for (&i, g) in grads {
            if !params.is_trainable(i) {
                continue;
            }
            for &x in g.iter() {
                let x = x.to_f64_lossy();
                sq += x * x;
            }
        }
        if !sq.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let norm = sq.sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let lr = c.learning_rate * (1.0 - c.beta2.powf(t)).sqrt() / (1.0 - c.beta1.powf(t));
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps, clip) = (T::from_f64_lossy(lr), T::from_f64_lossy(c.eps), T::from_f64_lossy(clip));
        for (&i, g) in grads {
            if !params.is_trainable(i) {
                continue;
            }
            let m = self.m.entry(i).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(i).or_insert_with(|| Array2::zeros(g.dim()));
            let p = params.value_mut(i);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            });
        }
        Ok(())
    }

    /// Moment arrays named after their parameters, for checkpointing.
    pub fn export(&self, params: &ParameterStore<T>) -> (u64, Vec<(String, String, Array2<f32>)>) {
        let mut out = Vec::new();
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (&i, a) in map {
                out.push((
                    format!("{kind}.{}", params.get(i).name),
                    "optimizer".to_string(),
                    a.mapv(|x| x.to_f64_lossy() as f32),
                ));
            }
        }
        (self.step, out)
    }

    pub fn import(
        config: AdamConfig,
        params: &ParameterStore<T>,
        step: u64,
        tensors: &[(String, Array2<f32>)],
    ) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.step = step;
        for (name, a) in tensors {
            let (kind, pname) = name
                .split_once('.')
                .ok_or_else(|| Error::Checkpoint(format!("bad optimizer tensor name {name:?}")))?;
            let i = params
                .index_of(pname)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {pname}")))?;
            let a = a.mapv(|x| T::from_f64_lossy(x as f64));
            match kind {
                "m" => adam.m.insert(i, a),
                "v" => adam.v.insert(i, a),
                _ => return Err(Error::Checkpoint(format!("bad optimizer tensor name {name:?}"))),
            };
        }
        Ok(adam)
    }
}

/// `acc += g` for every entry.
pub fn accumulate<T: Scalar>(acc: &mut ParamGrads<T>, g: ParamGrads<T>) {
    for (i, a) in g {
        match acc.get_mut(&i) {
            Some(e) => *e += &a,
            None => {
                acc.insert(i, a);
            }
        }
    }
}

pub fn scale<T: Scalar>(grads: &mut ParamGrads<T>, factor: T) {
    for a in grads.values_mut() {
        a.mapv_inplace(|x| x * factor);
    }
}
