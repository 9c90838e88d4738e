//! Named parameter tensors with per-parameter Adam state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Draws every entry from `uniform(−√(1/fan_in), √(1/fan_in))`.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    adam: Vec<AdamState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Schema(format!("parameter {name:?} registered twice")));
        }
        let n = value.len();
        self.names.push(name);
        self.tensors.push(value);
        self.adam.push(AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adam step count of one parameter.
    pub fn step_count(&self, id: ParamId) -> u64 {
        self.adam[id.0].step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// One Adam update with decoupled weight decay.
///
/// Each parameter is first shrunk by `lr·weight_decay·θ`, then moved by the
/// bias-corrected Adam step.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != store.tensors[i].shape() {
            return Err(Error::Dimension(format!(
                "gradient of {:?} has shape {:?}, parameter {:?}",
                store.names[i],
                g.shape(),
                store.tensors[i].shape()
            )));
        }
    }
    for ((theta, state), g) in store.tensors.iter_mut().zip(&mut store.adam).zip(grads) {
        state.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
        for (((p, m), v), &gi) in theta
            .data_mut()
            .iter_mut()
            .zip(&mut state.m)
            .zip(&mut state.v)
            .zip(g.data())
        {
            *p -= cfg.lr * cfg.weight_decay * *p;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = single(0.5);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut s, &[Tensor::scalar(1.0)], &cfg).unwrap();
        let delta = s.get(id).item() - 0.5;
        assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "delta {delta}");
        assert_eq!(s.step_count(id), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (mut s, id) = single(0.75);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            adam_step(&mut s, &[Tensor::scalar(0.0)], &cfg).unwrap();
        }
        assert_eq!(s.get(id).item(), 0.75);
    }

    #[test]
    fn decay_only_step() {
        let (mut s, id) = single(1.0);
        adam_step(&mut s, &[Tensor::scalar(0.0)], &AdamConfig::default()).unwrap();
        assert!((s.get(id).item() - (1.0 - 1e-8)).abs() < 1e-16);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut s, _) = single(1.0);
        let bad = Tensor::zeros(&[2]);
        assert!(adam_step(&mut s, &[bad], &AdamConfig::default()).is_err());
        assert!(s.add("w", Tensor::scalar(0.0)).is_err());
    }
}
