//! Online adaptation of the generator over a stream of unlabeled batches.

use gues_tensor::{Graph, Sgd, Tensor};

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_images, Image};
use crate::layers::Binding;
use crate::saliency::saliency_target;
use crate::vae::{batch_noise_seed, split_examples, gues_loss, kl_loss, recon_loss, GuesModel, Noise, UnadversarialExample};

/// Which model state produces the examples handed downstream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Emission {
    /// The forward pass that also computes the batch's loss, i.e. the
    /// state before that batch's update.
    #[default]
    PreUpdate,
    /// A second forward with the same noise after the update.
    PostUpdate,
}

impl Emission {
    pub fn as_str(self) -> &'static str {
        match self {
            Emission::PreUpdate => "pre-update",
            Emission::PostUpdate => "post-update",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pre-update" => Some(Emission::PreUpdate),
            "post-update" => Some(Emission::PostUpdate),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuesConfig {
    /// KL weight.
    pub alpha: f64,
    /// Reconstruction weight.
    pub beta: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub steps_per_batch: usize,
    pub emission: Emission,
}

impl Default for GuesConfig {
    fn default() -> Self {
        GuesConfig {
            alpha: 1.0,
            beta: 1.0,
            learning_rate: 1e-5,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            steps_per_batch: 1,
            emission: Emission::PreUpdate,
        }
    }
}

impl GuesConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.alpha) || !positive(self.beta) || !positive(self.learning_rate) {
            return Err(Error::Config(format!(
                "alpha, beta and learning rate must be positive (got {}, {}, {})",
                self.alpha, self.beta, self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.steps_per_batch == 0 {
            return Err(Error::Config("batch size and steps per batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss components of one batch, measured before its update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub batch_index: usize,
    pub batch_size: usize,
    pub kl: f64,
    pub mse: f64,
    pub total: f64,
    pub mean_abs_delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptReport {
    pub losses: Vec<BatchLoss>,
}

impl AdaptReport {
    pub fn batches(&self) -> usize {
        self.losses.len()
    }

    /// CSV with header `batch_index,batch_size,kl,mse,total,mean_abs_delta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch_index,batch_size,kl,mse,total,mean_abs_delta\n");
        for l in &self.losses {
            out.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                l.batch_index, l.batch_size, l.kl, l.mse, l.total, l.mean_abs_delta
            ));
        }
        out
    }
}

/// A generator together with its optimizer state.
pub struct GuesAdapter {
    model: GuesModel,
    config: GuesConfig,
    optimizer: Sgd,
    batches_seen: usize,
}

impl GuesAdapter {
    pub fn new(model: GuesModel, config: GuesConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.learning_rate, config.momentum, model.params(), model.param_ids())?;
        Ok(GuesAdapter {
            model,
            config,
            optimizer,
            batches_seen: 0,
        })
    }

    pub fn model(&self) -> &GuesModel {
        &self.model
    }

    pub fn into_model(self) -> GuesModel {
        self.model
    }

    pub fn config(&self) -> &GuesConfig {
        &self.config
    }

    /// One online step: saliency targets, forward, loss, update.
    ///
    /// Returns the examples chosen by the emission setting together with
    /// the loss measured on this batch before the update.
    pub fn step(&mut self, images: &[Image]) -> Result<(Vec<UnadversarialExample>, BatchLoss)> {
        let batch_index = self.batches_seen;
        self.batches_seen += 1;
        let targets: Vec<Image> = images.iter().map(saliency_target).collect();
        let x = images_to_tensor(images)?;
        let target = images_to_tensor(&targets)?;
        let noise = Noise::Seeded(batch_noise_seed(self.config.seed, batch_index));

        let mut emitted = None;
        let mut first_loss = None;
        for _ in 0..self.config.steps_per_batch {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let tv = g.constant(target.clone());
            let out = self.model.forward(&mut g, &Binding::all(self.model.params()), xv, &noise)?;
            let kl = kl_loss(&mut g, out.q)?;
            let mse = recon_loss(&mut g, out.x_hat, tv)?;
            let total = gues_loss(&mut g, kl, mse, self.config.alpha, self.config.beta)?;
            let value = |v| g.value(v).item().unwrap_or(f64::NAN);
            let (kl_v, mse_v, total_v) = (value(kl), value(mse), value(total));
            if !total_v.is_finite() {
                return Err(Error::NonFinite {
                    what: "generator loss",
                    batch: batch_index,
                });
            }
            if first_loss.is_none() {
                let delta = g.value(out.delta).data();
                first_loss = Some(BatchLoss {
                    batch_index,
                    batch_size: images.len(),
                    kl: kl_v,
                    mse: mse_v,
                    total: total_v,
                    mean_abs_delta: delta.iter().map(|d| d.abs()).sum::<f64>() / delta.len() as f64,
                });
                if self.config.emission == Emission::PreUpdate {
                    emitted = Some(split_examples(&g, xv, out.delta, out.x_hat));
                }
            }
            let params = self.model.params_mut();
            params.zero_grad();
            g.backward_into(total, params)?;
            self.optimizer.step(params)?;
        }
        let emitted = match emitted {
            Some(e) => e,
            None => self.model.generate(images, &noise)?,
        };
        Ok((emitted, first_loss.expect("at least one step")))
    }
}

/// Clamped `x_hat` of a batch of examples as classifier-ready images.
pub fn examples_to_images(examples: &[UnadversarialExample]) -> Result<Vec<Image>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = (examples[0].height, examples[0].width);
    let data = examples.iter().flat_map(|e| e.x_hat.iter().copied()).collect();
    tensor_to_images(&Tensor::new(&[examples.len(), 3, h, w], data)?)
}

/// Adapts over every batch of `stream` in arrival order, handing each
/// batch's examples to `sink` as soon as they are produced.
pub fn adapt_stream<I, F>(model: GuesModel, stream: I, config: GuesConfig, mut sink: F) -> Result<(GuesModel, AdaptReport)>
where
    I: IntoIterator<Item = Vec<Image>>,
    F: FnMut(usize, Vec<UnadversarialExample>) -> Result<()>,
{
    let mut adapter = GuesAdapter::new(model, config)?;
    let mut report = AdaptReport::default();
    for batch in stream {
        let (examples, loss) = adapter.step(&batch)?;
        sink(loss.batch_index, examples)?;
        report.losses.push(loss);
    }
    Ok((adapter.into_model(), report))
}
