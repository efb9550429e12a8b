//! The generator: a convolutional VAE whose decoder output is added to
//! the input image through a bypass path.

use gues_tensor::{derive_seed, Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_images, Image};
use crate::layers::{Binding, Conv, Linear};

pub const DEFAULT_LATENT_DIM: usize = 10;

const CHANNELS: [usize; 5] = [3, 16, 32, 64, 64];
const STAGES: usize = 4;
const DOWNSAMPLE: usize = 1 << STAGES;

/// Architecture knobs fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeShape {
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
}

impl VaeShape {
    pub fn new(height: usize, width: usize) -> Self {
        VaeShape {
            height,
            width,
            latent_dim: DEFAULT_LATENT_DIM,
        }
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        (CHANNELS[STAGES], self.height / DOWNSAMPLE, self.width / DOWNSAMPLE)
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % DOWNSAMPLE != 0 || self.width % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "image extent {}x{} must be positive multiples of {DOWNSAMPLE}",
                self.height, self.width
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior for a batch, each of shape `(N, latent)`.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: Var,
    pub log_var: Var,
}

/// Standard-normal draw used by the reparameterization.
#[derive(Clone, Debug)]
pub enum Noise {
    Zero,
    /// `(N, latent)` values.
    Explicit(Tensor),
    Seeded(u64),
}

/// Encoder/decoder parameters and their layout.
#[derive(Clone, Debug)]
pub struct GuesModel {
    shape: VaeShape,
    store: ParamStore,
    encoder: [Conv; STAGES],
    mu_head: Linear,
    log_var_head: Linear,
    expand: Linear,
    decoder: [Conv; STAGES],
}

/// Forward results for one batch.
#[derive(Clone, Copy, Debug)]
pub struct GuesForward {
    pub q: LatentGaussian,
    pub z: Var,
    pub delta: Var,
    pub x_hat: Var,
}

/// Per-image result of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct UnadversarialExample {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl GuesModel {
    /// Fan-in uniform initialization with the last decoder layer set to
    /// zero, so the untrained generator is the identity map.
    pub fn new(shape: VaeShape, seed: u64) -> Result<Self> {
        Self::build(shape, seed, true)
    }

    /// Like [`GuesModel::new`] but with every layer randomly initialized.
    pub fn new_random(shape: VaeShape, seed: u64) -> Result<Self> {
        Self::build(shape, seed, false)
    }

    fn build(shape: VaeShape, seed: u64, zero_final: bool) -> Result<Self> {
        shape.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let encoder = std::array::from_fn(|i| {
            Conv::new(&mut store, &mut rng, &format!("enc{i}"), CHANNELS[i], CHANNELS[i + 1], true)
        });
        let (c, h, w) = shape.bottleneck();
        let flat = c * h * w;
        let mu_head = Linear::new(&mut store, &mut rng, "mu", flat, shape.latent_dim);
        let log_var_head = Linear::new(&mut store, &mut rng, "log_var", flat, shape.latent_dim);
        let expand = Linear::new(&mut store, &mut rng, "dec_in", shape.latent_dim, flat);
        let decoder = std::array::from_fn(|i| {
            let cin = CHANNELS[STAGES - i];
            let cout = CHANNELS[STAGES - i - 1];
            let last = i == STAGES - 1;
            Conv::new_transpose(&mut store, &mut rng, &format!("dec{i}"), cin, cout, last && zero_final)
        });
        Ok(GuesModel {
            shape,
            store,
            encoder,
            mu_head,
            log_var_head,
            expand,
            decoder,
        })
    }

    pub fn shape(&self) -> VaeShape {
        self.shape
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Number of convolutional layers (encoder plus decoder).
    pub fn conv_layers(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    /// Parameters of the last decoder layer.
    pub fn final_layer(&self) -> (ParamId, ParamId) {
        let last = self.decoder[STAGES - 1];
        (last.weight, last.bias.expect("decoder layers carry a bias"))
    }

    /// Replaces the parameter tensors, checking names and shapes.
    pub fn load_params(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        load_into(&mut self.store, entries)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.shape.height || s[3] != self.shape.width {
            return Err(Error::Shape(format!(
                "generator expects (N, 3, {}, {}), got {s:?}",
                self.shape.height, self.shape.width
            )));
        }
        Ok(s[0])
    }

    pub fn encode(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<LatentGaussian> {
        let n = self.check_input(g, x)?;
        let mut h = x;
        for layer in &self.encoder {
            h = layer.forward(g, p, h)?;
            h = g.leaky_relu(h)?;
        }
        let (c, bh, bw) = self.shape.bottleneck();
        let flat = g.reshape(h, &[n, c * bh * bw])?;
        let mu = self.mu_head.forward(g, p, flat)?;
        let log_var = self.log_var_head.forward(g, p, flat)?;
        Ok(LatentGaussian { mu, log_var })
    }

    pub fn decode(&self, g: &mut Graph, p: &Binding, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.shape.latent_dim {
            return Err(Error::Shape(format!(
                "latent batch must be (N, {}), got {s:?}",
                self.shape.latent_dim
            )));
        }
        let (c, bh, bw) = self.shape.bottleneck();
        let h = self.expand.forward(g, p, z)?;
        let mut h = g.reshape(h, &[s[0], c, bh, bw])?;
        for (i, layer) in self.decoder.iter().enumerate() {
            h = g.leaky_relu(h)?;
            h = layer.forward(g, p, h)?;
            if i == STAGES - 1 {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Full forward: `x_hat = x + decode(mu + exp(log_var / 2) * eps)`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var, noise: &Noise) -> Result<GuesForward> {
        let q = self.encode(g, p, x)?;
        let z = reparameterize(g, q, noise)?;
        let delta = self.decode(g, p, z)?;
        let x_hat = g.add(x, delta)?;
        Ok(GuesForward { q, z, delta, x_hat })
    }

    /// Runs the generator without recording gradients on parameters.
    pub fn generate(&self, images: &[Image], noise: &Noise) -> Result<Vec<UnadversarialExample>> {
        let x = images_to_tensor(images)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, &Binding::frozen(&self.store), xv, noise)?;
        Ok(split_examples(&g, xv, out.delta, out.x_hat))
    }
}

pub(crate) fn split_examples(g: &Graph, x: Var, delta: Var, x_hat: Var) -> Vec<UnadversarialExample> {
    let s = g.shape(x);
    let (n, h, w) = (s[0], s[2], s[3]);
    let per = 3 * h * w;
    (0..n)
        .map(|i| {
            let slice = |v: Var| g.value(v).data()[i * per..(i + 1) * per].to_vec();
            UnadversarialExample {
                x: slice(x),
                delta: slice(delta),
                x_hat: slice(x_hat),
                height: h,
                width: w,
            }
        })
        .collect()
}

impl UnadversarialExample {
    /// `x_hat` clamped to `[0, 1]`, as handed to a classifier.
    pub fn to_image(&self) -> Image {
        let t = Tensor::new(&[1, 3, self.height, self.width], self.x_hat.clone()).expect("consistent extents");
        tensor_to_images(&t).expect("rank-4 tensor").remove(0)
    }

    pub fn mean_abs_delta(&self) -> f64 {
        self.delta.iter().map(|d| d.abs()).sum::<f64>() / self.delta.len() as f64
    }
}

/// `z = mu + exp(0.5 * log_var) * eps`; the noise enters as a constant.
pub fn reparameterize(g: &mut Graph, q: LatentGaussian, noise: &Noise) -> Result<Var> {
    let shape = g.shape(q.mu).to_vec();
    let eps = match noise {
        Noise::Zero => return Ok(q.mu),
        Noise::Explicit(t) => {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("noise shape {:?} does not match latent {shape:?}", t.shape())));
            }
            g.constant(t.clone())
        }
        Noise::Seeded(seed) => g.gaussian_noise_like(q.mu, *seed)?,
    };
    let half = g.scale(q.log_var, 0.5)?;
    let sigma = g.exp(half)?;
    let spread = g.mul(sigma, eps)?;
    Ok(g.add(q.mu, spread)?)
}

/// `0.5 * sum_d (mu^2 + exp(log_var) - log_var - 1)`, averaged over the batch.
pub fn kl_loss(g: &mut Graph, q: LatentGaussian) -> Result<Var> {
    let n = g.shape(q.mu)[0] as f64;
    let mu2 = g.mul(q.mu, q.mu)?;
    let var = g.exp(q.log_var)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, q.log_var)?;
    let c = g.offset(b, -1.0)?;
    let total = g.sum(c)?;
    Ok(g.scale(total, 0.5 / n)?)
}

/// Mean squared difference over every element.
pub fn recon_loss(g: &mut Graph, x_hat: Var, target: Var) -> Result<Var> {
    if g.shape(x_hat) != g.shape(target) {
        return Err(Error::Shape(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            g.shape(x_hat),
            g.shape(target)
        )));
    }
    let d = g.sub(x_hat, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq)?)
}

/// `alpha * kl + beta * recon`.
pub fn gues_loss(g: &mut Graph, kl: Var, recon: Var, alpha: f64, beta: f64) -> Result<Var> {
    let a = g.scale(kl, alpha)?;
    let b = g.scale(recon, beta)?;
    Ok(g.add(a, b)?)
}

/// Noise seed for the `index`-th batch of a run.
pub fn batch_noise_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed ^ 0x6e6f_6973_6500_0000, index as u64)
}

pub(crate) fn load_into(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Format {
            format: "checkpoint",
            detail: format!("expected {} tensors, found {}", store.len(), entries.len()),
        });
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, (name, tensor)) in ids.iter().zip(&entries) {
        let have = store.get(*id);
        if store.name(*id) != name || have.shape() != tensor.shape() {
            return Err(Error::Format {
                format: "checkpoint",
                detail: format!(
                    "tensor '{name}' {:?} does not match '{}' {:?}",
                    tensor.shape(),
                    store.name(*id),
                    have.shape()
                ),
            });
        }
    }
    for (id, (_, tensor)) in ids.into_iter().zip(entries) {
        store.get_mut(id).data_mut().copy_from_slice(tensor.data());
    }
    Ok(())
}
