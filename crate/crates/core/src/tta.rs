//! Entropy-based test-time adaptation of the source classifier.

use gues_tensor::{Graph, ParamId, Sgd, Tensor, Var};

use crate::classifier::{NormMode, SourceClassifier};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};

pub const DEFAULT_TTA_LR: f64 = 1e-3;
pub const DEFAULT_TTA_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtaMethod {
    /// Entropy minimization over normalization affine parameters.
    Tent,
    /// Entropy minimization plus prediction diversity over the feature
    /// extractor, head frozen.
    ShotIm,
}

impl TtaMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TtaMethod::Tent => "tent",
            TtaMethod::ShotIm => "shot_im",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tent" => Some(TtaMethod::Tent),
            "shot_im" => Some(TtaMethod::ShotIm),
            _ => None,
        }
    }

    pub fn min_batch(self) -> usize {
        match self {
            TtaMethod::Tent => 1,
            TtaMethod::ShotIm => 2,
        }
    }
}

pub struct TtaState {
    method: TtaMethod,
    params: Vec<ParamId>,
    optimizer: Sgd,
}

/// Result of one adaptation step.
#[derive(Clone, Debug)]
pub struct TtaStep {
    /// Logits of the forward pass that produced the loss.
    pub logits: Tensor,
    pub loss: f64,
}

impl TtaState {
    pub fn new(method: TtaMethod, model: &SourceClassifier, learning_rate: f64, momentum: f64) -> Result<Self> {
        let params = match method {
            TtaMethod::Tent => model.norm_affine_ids(),
            TtaMethod::ShotIm => model.feature_ids(),
        };
        let optimizer = Sgd::new(learning_rate, momentum, model.params(), params.clone())?;
        Ok(TtaState {
            method,
            params,
            optimizer,
        })
    }

    pub fn with_defaults(method: TtaMethod, model: &SourceClassifier) -> Result<Self> {
        Self::new(method, model, DEFAULT_TTA_LR, DEFAULT_TTA_MOMENTUM)
    }

    pub fn method(&self) -> TtaMethod {
        self.method
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.params
    }

    /// One forward with current-batch statistics and one SGD step on the
    /// method's objective.
    pub fn step(&mut self, model: &mut SourceClassifier, images: &[Image]) -> Result<TtaStep> {
        self.step_tensor(model, images_to_tensor(images)?)
    }

    pub fn step_tensor(&mut self, model: &mut SourceClassifier, x: Tensor) -> Result<TtaStep> {
        let n = x.shape()[0];
        if n < self.method.min_batch() {
            return Err(Error::BatchTooSmall {
                got: n,
                need: self.method.min_batch(),
            });
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = model.forward(&mut g, xv, NormMode::Batch, Some(&self.params))?;
        let loss = match self.method {
            TtaMethod::Tent => mean_entropy(&mut g, out.logits)?,
            TtaMethod::ShotIm => information_maximization(&mut g, out.logits)?,
        };
        let value = g.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "adaptation loss",
                batch: 0,
            });
        }
        let logits = g.value(out.logits).clone();
        let params = model.params_mut();
        params.zero_grad();
        g.backward_into(loss, params)?;
        self.optimizer.step(params)?;
        Ok(TtaStep { logits, loss: value })
    }
}

pub fn tent_step(model: &mut SourceClassifier, images: &[Image], state: &mut TtaState) -> Result<TtaStep> {
    if state.method != TtaMethod::Tent {
        return Err(Error::Config("state was built for shot_im".into()));
    }
    state.step(model, images)
}

pub fn shot_im_step(model: &mut SourceClassifier, images: &[Image], state: &mut TtaState) -> Result<TtaStep> {
    if state.method != TtaMethod::ShotIm {
        return Err(Error::Config("state was built for tent".into()));
    }
    state.step(model, images)
}

/// Mean over rows of `-sum_c p log p`.
pub fn mean_entropy(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.shape(logits)[0] as f64;
    let p = g.softmax(logits)?;
    let logp = g.log_softmax(logits)?;
    let plogp = g.mul(p, logp)?;
    let total = g.sum(plogp)?;
    Ok(g.scale(total, -1.0 / n)?)
}

/// Mean per-row entropy minus the entropy of the mean prediction.
pub fn information_maximization(g: &mut Graph, logits: Var) -> Result<Var> {
    let cond = mean_entropy(g, logits)?;
    let p = g.softmax(logits)?;
    let mean = g.mean_axes(p, &[0])?;
    let log_mean = g.log(mean)?;
    let plogp = g.mul(mean, log_mean)?;
    // sum p log p = -H(mean), so adding it subtracts the diversity term
    let neg_div = g.sum(plogp)?;
    Ok(g.add(cond, neg_div)?)
}
