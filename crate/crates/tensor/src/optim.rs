use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};

/// SGD with heavy-ball momentum over a fixed parameter subset.
///
/// `v <- momentum * v + grad; p <- p - lr * v`, then gradients are cleared.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    params: Vec<ParamId>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, store: &ParamStore, params: Vec<ParamId>) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        let velocity = params.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        Ok(Sgd {
            learning_rate,
            momentum,
            params,
            velocity,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        self.learning_rate = learning_rate;
        Ok(())
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn velocity(&self, slot: usize) -> &[f64] {
        &self.velocity[slot]
    }

    /// Applies one update. Fails without touching anything if any managed
    /// parameter lacks a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(&id) = self.params.iter().find(|&&id| store.get(id).grad().is_none()) {
            return Err(TensorError::MissingGradient(store.name(id).to_string()));
        }
        for (&id, v) in self.params.iter().zip(self.velocity.iter_mut()) {
            let t = store.get_mut(id);
            let g = t.grad().expect("checked above").to_vec();
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = self.momentum * *vi + gi;
            }
            for (p, vi) in t.data_mut().iter_mut().zip(v.iter()) {
                *p -= self.learning_rate * vi;
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// Adam with bias correction over a fixed parameter subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: i32,
    params: Vec<ParamId>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, store: &ParamStore, params: Vec<ParamId>) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        let zeros: Vec<Vec<f64>> = params.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        Ok(Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            params,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        self.learning_rate = learning_rate;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(&id) = self.params.iter().find(|&&id| store.get(id).grad().is_none()) {
            return Err(TensorError::MissingGradient(store.name(id).to_string()));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for ((&id, m), v) in self.params.iter().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
            let t = store.get_mut(id);
            let g = t.grad().expect("checked above").to_vec();
            for (((p, gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= self.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
