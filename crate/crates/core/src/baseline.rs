//! Per-image iterative unadversarial perturbations: signed-gradient steps
//! on the frozen classifier's cross-entropy with respect to its input.

use gues_tensor::{derive_seed, Graph, SeededRng, Tensor};

use crate::classifier::{argmax_rows, smoothed_cross_entropy, NormMode, SourceClassifier};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_images, Image};
use crate::metrics::{accuracy, confusion};
use crate::vae::{GuesModel, Noise};

pub const INIT_RANGE: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Orientation {
    /// Subtract the signed gradient, lowering the loss.
    #[default]
    Descent,
    /// Add the signed gradient, as the update is literally written.
    Ascent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterativeConfig {
    pub step_alpha: f64,
    pub iterations: usize,
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub orientation: Orientation,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        IterativeConfig {
            step_alpha: 0.005,
            iterations: 20,
            epsilon: None,
            seed: 0,
            orientation: Orientation::Descent,
        }
    }
}

impl IterativeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_alpha.is_finite() && self.step_alpha > 0.0) {
            return Err(Error::Config(format!("step size {} must be positive", self.step_alpha)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        if let Some(e) = self.epsilon {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Config(format!("epsilon {e} must be positive")));
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `delta -/+ alpha * sign(grad)`, then the optional `[-eps, eps]` clamp.
pub fn sign_step(delta: &[f64], grad: &[f64], alpha: f64, orientation: Orientation, epsilon: Option<f64>) -> Vec<f64> {
    let dir = match orientation {
        Orientation::Descent => -1.0,
        Orientation::Ascent => 1.0,
    };
    delta
        .iter()
        .zip(grad)
        .map(|(&d, &g)| {
            let v = d + dir * alpha * sign(g);
            match epsilon {
                Some(e) => v.clamp(-e, e),
                None => v,
            }
        })
        .collect()
}

/// Per-sample cross-entropy of the frozen classifier and its gradient with
/// respect to the (pre-clamp) input batch.
pub fn loss_and_input_grad(classifier: &SourceClassifier, x: Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.shape()[0];
    let mut model = classifier.clone();
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = model.forward(&mut g, xv, NormMode::Frozen, Some(&[]))?;
    // summing per-sample losses keeps each sample's gradient its own
    let loss = smoothed_cross_entropy(&mut g, out.logits, labels, 0.0)?;
    let total = g.scale(loss, n as f64)?;
    let grads = g.backward(total)?;
    let grad = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(xv).numel()]);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "input gradient",
            batch: 0,
        });
    }
    Ok((per_sample_loss(g.value(out.logits), labels), grad))
}

/// Plain cross-entropy of each row of `(N, C)` logits.
pub fn per_sample_loss(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}

/// One update of every perturbation in a batch. `deltas` is in the
/// `(N, 3, H, W)` layout of `images_to_tensor`.
pub fn unadv_step(
    images: &[Image],
    deltas: &[f64],
    classifier: &SourceClassifier,
    labels: &[usize],
    cfg: &IterativeConfig,
) -> Result<Vec<f64>> {
    let x = images_to_tensor(images)?;
    if deltas.len() != x.numel() {
        return Err(Error::LengthMismatch(deltas.len(), x.numel()));
    }
    let shifted: Vec<f64> = x.data().iter().zip(deltas).map(|(a, d)| a + d).collect();
    let (_, grad) = loss_and_input_grad(classifier, Tensor::new(x.shape(), shifted)?, labels)?;
    Ok(sign_step(deltas, &grad, cfg.step_alpha, cfg.orientation, cfg.epsilon))
}

/// Seeded `U(-0.01, 0.01)` start; sample `i` of a batch uses its own
/// derived stream so results do not depend on batch composition.
pub fn initial_delta(cfg: &IterativeConfig, index: usize, len: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(derive_seed(cfg.seed, index as u64));
    (0..len).map(|_| rng.uniform_range(-INIT_RANGE, INIT_RANGE)).collect()
}

/// Runs `iterations` steps from the seeded start. Returns `(delta_0,
/// delta_K)` for the whole batch.
pub fn optimize_unadversarial(
    images: &[Image],
    labels: &[usize],
    classifier: &SourceClassifier,
    cfg: &IterativeConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per = 3 * images[0].height() * images[0].width();
    let start: Vec<f64> = (0..images.len()).flat_map(|i| initial_delta(cfg, i, per)).collect();
    let start = match cfg.epsilon {
        Some(e) => start.into_iter().map(|v| v.clamp(-e, e)).collect(),
        None => start,
    };
    let mut delta = start.clone();
    for _ in 0..cfg.iterations {
        delta = unadv_step(images, &delta, classifier, labels, cfg)?;
    }
    Ok((start, delta))
}

/// `images + delta`, clamped into valid images.
pub fn perturb(images: &[Image], delta: &[f64]) -> Result<Vec<Image>> {
    let x = images_to_tensor(images)?;
    let data = x.data().iter().zip(delta).map(|(a, d)| a + d).collect();
    tensor_to_images(&Tensor::new(x.shape(), data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub condition: &'static str,
    pub seed: u64,
    pub accuracy: f64,
}

fn frozen_accuracy(classifier: &SourceClassifier, images: &[Image], labels: &[usize]) -> Result<f64> {
    let mut pred = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        pred.extend(argmax_rows(&classifier.predict(chunk)?));
    }
    accuracy(&confusion(labels, &pred, crate::classifier::NUM_CLASSES)?)
}

/// Accuracy of the frozen classifier on the plain images, on iteratively
/// perturbed images, and on generator outputs, once per seed. Labels are
/// used only here, as a verification oracle.
pub fn compare_generative_vs_iterative(
    classifier: &SourceClassifier,
    generator: &GuesModel,
    images: &[Image],
    labels: &[usize],
    cfg: &IterativeConfig,
    seeds: &[u64],
) -> Result<Vec<ComparisonRow>> {
    let plain = frozen_accuracy(classifier, images, labels)?;
    let mut rows = Vec::with_capacity(3 * seeds.len());
    for &seed in seeds {
        rows.push(ComparisonRow {
            condition: "plain",
            seed,
            accuracy: plain,
        });
        let (_, delta) = optimize_unadversarial(images, labels, classifier, &IterativeConfig { seed, ..*cfg })?;
        rows.push(ComparisonRow {
            condition: "iterative",
            seed,
            accuracy: frozen_accuracy(classifier, &perturb(images, &delta)?, labels)?,
        });
        let mut generated = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            generated.extend(generator.generate(chunk, &Noise::Seeded(seed))?.iter().map(|e| e.to_image()));
        }
        rows.push(ComparisonRow {
            condition: "gues",
            seed,
            accuracy: frozen_accuracy(classifier, &generated, labels)?,
        });
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("condition,seed,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6}\n", r.condition, r.seed, r.accuracy));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_arithmetic() {
        let d = sign_step(&[0.0; 3], &[0.3, -0.2, 0.0], 0.01, Orientation::Descent, None);
        assert_eq!(d, vec![-0.01, 0.01, 0.0]);
        let a = sign_step(&[0.0; 3], &[0.3, -0.2, 0.0], 0.01, Orientation::Ascent, None);
        assert_eq!(a, vec![0.01, -0.01, 0.0]);
        let c = sign_step(&[-0.025], &[1.0], 0.005, Orientation::Descent, Some(0.01));
        assert_eq!(c, vec![-0.01]);
    }

    #[test]
    fn config_validation() {
        assert!(IterativeConfig::default().validate().is_ok());
        for bad in [
            IterativeConfig {
                iterations: 0,
                ..Default::default()
            },
            IterativeConfig {
                step_alpha: 0.0,
                ..Default::default()
            },
            IterativeConfig {
                epsilon: Some(-1.0),
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn per_sample_loss_matches_log_softmax() {
        let logits = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let l = per_sample_loss(&logits, &[2, 1]);
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((l[0] - (z.ln() - 3.0)).abs() < 1e-12);
        assert!((l[1] - 3f64.ln()).abs() < 1e-12);
    }
}
