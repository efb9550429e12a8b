//! Desk-scale source classifier: three conv/batch-norm/relu blocks, global
//! average pooling and a linear head.

use gues_tensor::{derive_seed, Adam, Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::layers::{Binding, Conv, Linear};

pub const NUM_CLASSES: usize = 5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

const CHANNELS: [usize; 4] = [3, 16, 32, 64];

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Running statistics; output of a sample is independent of its batch.
    Frozen,
    /// Statistics of the current batch; running statistics untouched.
    Batch,
    /// Statistics of the current batch, folded into the running ones.
    Train,
}

#[derive(Clone, Copy, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let shape = [1, c, 1, 1];
        BatchNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones(&shape)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&shape)),
            running_mean: store.register_buffer(format!("{name}.running_mean"), Tensor::zeros(&shape)),
            running_var: store.register_buffer(format!("{name}.running_var"), Tensor::ones(&shape)),
        }
    }

    /// Returns the output and, in batch modes, the batch mean and biased
    /// variance per channel.
    fn forward(&self, g: &mut Graph, p: &Binding, x: Var, mode: NormMode) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        let (normed, stats) = match mode {
            NormMode::Frozen => {
                let mean = g.constant(p.tensor(self.running_mean).clone());
                let inv = p.tensor(self.running_var).data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let inv = g.constant(Tensor::new(p.tensor(self.running_var).shape(), inv)?);
                let centred = g.sub(x, mean)?;
                (g.mul(centred, inv)?, None)
            }
            NormMode::Batch | NormMode::Train => {
                let mean = g.mean_axes(x, &[0, 2, 3])?;
                let centred = g.sub(x, mean)?;
                let sq = g.mul(centred, centred)?;
                let var = g.mean_axes(sq, &[0, 2, 3])?;
                let stats = (g.value(mean).data().to_vec(), g.value(var).data().to_vec());
                let shifted = g.offset(var, BN_EPS)?;
                let log = g.log(shifted)?;
                let half = g.scale(log, -0.5)?;
                let inv = g.exp(half)?;
                (g.mul(centred, inv)?, Some(stats))
            }
        };
        let scaled = g.mul(normed, gamma)?;
        Ok((g.add(scaled, beta)?, stats))
    }
}

#[derive(Clone, Debug)]
pub struct SourceClassifier {
    store: ParamStore,
    convs: [Conv; 3],
    norms: [BatchNorm; 3],
    head: Linear,
}

/// Output of one classifier forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierForward {
    pub input: Var,
    pub logits: Var,
}

impl SourceClassifier {
    pub fn new(seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..3 {
            convs.push(Conv::new(&mut store, &mut rng, &format!("conv{i}"), CHANNELS[i], CHANNELS[i + 1], false));
            norms.push(BatchNorm::new(&mut store, &format!("bn{i}"), CHANNELS[i + 1]));
        }
        let head = Linear::new(&mut store, &mut rng, "head", CHANNELS[3], NUM_CLASSES);
        SourceClassifier {
            store,
            convs: convs.try_into().expect("three blocks"),
            norms: norms.try_into().expect("three blocks"),
            head,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn load_params(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        crate::vae::load_into(&mut self.store, entries)
    }

    /// Scale and shift of every normalization layer.
    pub fn norm_affine_ids(&self) -> Vec<ParamId> {
        self.norms.iter().flat_map(|n| [n.gamma, n.beta]).collect()
    }

    /// Convolution kernels plus normalization affine parameters.
    pub fn feature_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().map(|c| c.weight).collect();
        ids.extend(self.norm_affine_ids());
        ids.sort();
        ids
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        vec![self.head.weight, self.head.bias]
    }

    /// Every parameter that training updates.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.get(id).requires_grad()).collect()
    }

    /// Records a forward pass. Inputs are clamped to `[0, 1]` first.
    ///
    /// In [`NormMode::Train`] the running statistics are updated in place
    /// after the pass.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: NormMode, trainable: Option<&[ParamId]>) -> Result<ClassifierForward> {
        let (logits, stats) = {
            let p = match trainable {
                Some(ids) => Binding::only(&self.store, ids),
                None => Binding::all(&self.store),
            };
            self.forward_with(g, &p, x, mode)?
        };
        if mode == NormMode::Train {
            let n = g.shape(x)[0];
            self.fold_running_stats(&stats, n, g.shape(x)[2], g.shape(x)[3]);
        }
        Ok(ClassifierForward { input: x, logits })
    }

    fn forward_with(&self, g: &mut Graph, p: &Binding, x: Var, mode: NormMode) -> Result<(Var, Vec<(Vec<f64>, Vec<f64>)>)> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("classifier expects (N, 3, H, W), got {s:?}")));
        }
        let n = s[0];
        let mut h = g.clamp(x, 0.0, 1.0)?;
        let mut stats = Vec::new();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, p, h)?;
            let (y, st) = norm.forward(g, p, h, mode)?;
            stats.extend(st);
            h = g.relu(y)?;
        }
        let pooled = g.mean_axes(h, &[2, 3])?;
        let flat = g.reshape(pooled, &[n, CHANNELS[3]])?;
        Ok((self.head.forward(g, p, flat)?, stats))
    }

    fn fold_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)], n: usize, h: usize, w: usize) {
        // spatial extent of each block's output: the input halves per block
        let (mut hh, mut ww) = (h, w);
        for (norm, (mean, var)) in self.norms.iter().zip(stats) {
            hh = hh.div_ceil(2);
            ww = ww.div_ceil(2);
            let count = (n * hh * ww) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let rm = self.store.get_mut(norm.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.store.get_mut(norm.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    /// Pre-normalization activations of block `layer`, with every earlier
    /// block run in frozen mode.
    fn pre_norm(&self, x: Tensor, layer: usize) -> Result<Tensor> {
        let p = Binding::frozen(&self.store);
        let mut g = Graph::new();
        let mut h = g.constant(x);
        h = g.clamp(h, 0.0, 1.0)?;
        for (conv, norm) in self.convs.iter().zip(&self.norms).take(layer) {
            h = conv.forward(&mut g, &p, h)?;
            let (y, _) = norm.forward(&mut g, &p, h, NormMode::Frozen)?;
            h = g.relu(y)?;
        }
        h = self.convs[layer].forward(&mut g, &p, h)?;
        Ok(g.value(h).clone())
    }

    /// Replaces the running statistics with exact population statistics of
    /// `images` under the current weights, one block at a time.
    ///
    /// The moving averages kept during training trail the weights; for
    /// nearly constant channels that lag dominates the normalized value.
    pub fn recalibrate_norm_stats(&mut self, images: &[Image], chunk: usize) -> Result<()> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for layer in 0..self.norms.len() {
            let c = CHANNELS[layer + 1];
            let (mut count, mut mean, mut m2) = (0.0f64, vec![0.0; c], vec![0.0; c]);
            for batch in images.chunks(chunk.max(1)) {
                let a = self.pre_norm(images_to_tensor(batch)?, layer)?;
                let (n, hw) = (a.shape()[0], a.shape()[2] * a.shape()[3]);
                let nb = (n * hw) as f64;
                for ch in 0..c {
                    let vals = (0..n).flat_map(|i| a.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter());
                    let bm = vals.clone().sum::<f64>() / nb;
                    let sq: f64 = vals.map(|v| (v - bm) * (v - bm)).sum();
                    // Chan et al. pairwise merge of (count, mean, M2)
                    let total = count + nb;
                    let d = bm - mean[ch];
                    mean[ch] += d * nb / total;
                    m2[ch] += sq + d * d * count * nb / total;
                }
                count += nb;
            }
            let norm = self.norms[layer];
            self.store.get_mut(norm.running_mean).data_mut().copy_from_slice(&mean);
            let var: Vec<f64> = m2.iter().map(|v| v / (count - 1.0).max(1.0)).collect();
            self.store.get_mut(norm.running_var).data_mut().copy_from_slice(&var);
        }
        Ok(())
    }

    /// Frozen-mode logits `(N, 5)` of a batch.
    pub fn predict(&self, images: &[Image]) -> Result<Tensor> {
        self.logits(images_to_tensor(images)?, NormMode::Frozen)
    }

    /// Logits without recording gradient; `mode` must not be `Train`.
    pub fn logits(&self, x: Tensor, mode: NormMode) -> Result<Tensor> {
        if mode == NormMode::Train {
            return Err(Error::Config("inference cannot run in train mode".into()));
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (logits, _) = self.forward_with(&mut g, &Binding::frozen(&self.store), xv, mode)?;
        Ok(g.value(logits).clone())
    }
}

/// Row-wise arg max of an `(N, C)` logit tensor (first maximum wins).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax of an `(N, C)` logit tensor.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Config(format!("invalid probability {v}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("probabilities sum to {total}")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// Cross-entropy against `(1 - s) * onehot + s / C`, averaged over the batch.
pub fn smoothed_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::LengthMismatch(s.first().copied().unwrap_or(0), labels.len()));
    }
    let (n, c) = (s[0], s[1]);
    let mut target = vec![smoothing / c as f64; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        target[i * c + y] += 1.0 - smoothing;
    }
    let t = g.constant(Tensor::new(&[n, c], target)?);
    let logp = g.log_softmax(logits)?;
    let prod = g.mul(t, logp)?;
    let total = g.sum(prod)?;
    Ok(g.scale(total, -1.0 / n as f64)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.01,
            smoothing: DEFAULT_SMOOTHING,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        Ok(())
    }
}

/// Mean training loss of each epoch.
pub type TrainHistory = Vec<f64>;

/// Supervised training with label-smoothed cross-entropy, followed by a
/// recalibration of the normalization statistics on the training images.
/// Returns the per-epoch mean loss.
pub fn train_source(model: &mut SourceClassifier, images: &[Image], labels: &[usize], config: &TrainConfig) -> Result<TrainHistory> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != labels.len() {
        return Err(Error::LengthMismatch(images.len(), labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: NUM_CLASSES,
        });
    }
    config.validate()?;
    let ids = model.trainable_ids();
    let mut opt = Adam::new(config.learning_rate, model.params(), ids)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let total_steps = config.epochs * images.len().div_ceil(config.batch_size);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = SeededRng::new(derive_seed(config.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.int_inclusive(0, i));
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            // cosine decay to a tenth of the base rate over the whole run
            let progress = step as f64 / total_steps as f64;
            let factor = 0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.set_learning_rate(config.learning_rate * factor)?;
            step += 1;
            let batch: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(images_to_tensor(&batch)?);
            let out = model.forward(&mut g, x, NormMode::Train, None)?;
            let loss = smoothed_cross_entropy(&mut g, out.logits, &ys, config.smoothing)?;
            let value = g.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss",
                    batch: batches,
                });
            }
            total += value;
            batches += 1;
            let params = model.params_mut();
            params.zero_grad();
            g.backward_into(loss, params)?;
            opt.step(params)?;
        }
        history.push(total / batches as f64);
    }
    if config.epochs > 0 {
        model.recalibrate_norm_stats(images, 64)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.2; 5]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(entropy(&[1.5, -0.5]).is_err());
        assert!(entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn smoothing_floor() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::new(&[1, 5], vec![60.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let plain = smoothed_cross_entropy(&mut g, logits, &[0], 0.0).unwrap();
        assert!(g.value(plain).item().unwrap() < 1e-20);
        let smooth = smoothed_cross_entropy(&mut g, logits, &[0], 0.1).unwrap();
        let p = softmax_rows(g.value(logits));
        let expect = -(0.9 + 0.02) * p[0][0].ln() - 4.0 * 0.02 * p[0][1].ln();
        let got = g.value(smooth).item().unwrap();
        assert!(got > 0.0);
        assert!((got - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn frozen_predict_is_batch_invariant() {
        let mut model = SourceClassifier::new(3);
        let imgs: Vec<Image> = (0..4)
            .map(|k| Image::new(16, 16, (0..768).map(|i| ((i * 7 + k * 13) % 17) as f64 / 16.0).collect()).unwrap())
            .collect();
        // move the running statistics away from their initial values
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&imgs).unwrap());
        model.forward(&mut g, x, NormMode::Train, None).unwrap();
        let both = model.predict(&imgs[..2]).unwrap();
        let one = model.predict(&imgs[..1]).unwrap();
        assert_eq!(&both.data()[..5], one.data());
        assert_eq!(model.predict(&imgs[..1]).unwrap(), one);
    }

    #[test]
    fn batch_mode_loss_gradient_matches_finite_differences() {
        let model = SourceClassifier::new(4);
        let x = Tensor::from_fn(&[3, 3, 8, 8], |i| ((i * 37) % 101) as f64 / 100.0);
        let ids: Vec<ParamId> = model.params().ids().filter(|&id| model.params().get(id).requires_grad()).collect();
        let targets: Vec<(ParamId, Vec<usize>)> = ids
            .iter()
            .map(|&id| {
                let n = model.params().get(id).numel();
                (id, (0..n).step_by(n / 7 + 1).collect())
            })
            .collect();
        let reports = gues_tensor::grad_check_params(
            model.params(),
            &targets,
            |g, store| {
                let mut m = model.clone();
                *m.params_mut() = store.clone();
                let xv = g.constant(x.clone());
                let out = m.forward(g, xv, NormMode::Batch, None).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let loss = smoothed_cross_entropy(g, out.logits, &[0, 3, 4], 0.1).unwrap();
                Ok(loss)
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        for r in reports {
            assert!(r.passed(), "{} max rel error {}", r.label, r.max_rel_error());
        }
    }

    #[test]
    fn training_fits_a_tiny_set() {
        let mut model = SourceClassifier::new(1);
        let imgs = vec![
            Image::filled(16, 16, [0.9, 0.9, 0.9]).unwrap(),
            Image::filled(16, 16, [0.1, 0.1, 0.1]).unwrap(),
        ];
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let hist = train_source(&mut model, &imgs, &[4, 0], &cfg).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        assert_eq!(argmax_rows(&model.predict(&imgs).unwrap()), vec![4, 0]);
        assert!(matches!(train_source(&mut model, &[], &[], &cfg), Err(Error::EmptyDataset)));
    }
}
