//! Small layer helpers shared by the generator and the classifier.

use gues_tensor::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

use crate::error::Result;

/// Read access to a parameter store that decides, per parameter, whether
/// gradient reaches it in the graph being built.
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub store: &'a ParamStore,
    trainable: Option<&'a [ParamId]>,
}

impl<'a> Binding<'a> {
    /// Every parameter that requires grad is tracked.
    pub fn all(store: &'a ParamStore) -> Self {
        Binding { store, trainable: None }
    }

    /// Only the listed parameters are tracked.
    pub fn only(store: &'a ParamStore, trainable: &'a [ParamId]) -> Self {
        Binding {
            store,
            trainable: Some(trainable),
        }
    }

    /// Nothing is tracked.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Binding {
            store,
            trainable: Some(&[]),
        }
    }

    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        match self.trainable {
            Some(list) if !list.contains(&id) => g.frozen_param(self.store, id),
            _ => g.param(self.store, id),
        }
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn fan_in_uniform(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub transpose: bool,
}

impl Conv {
    /// 3x3 convolution, kernel `(out, in, 3, 3)`.
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let weight = store.register(format!("{name}.weight"), fan_in_uniform(rng, &[cout, cin, 3, 3], cin * 9));
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[1, cout, 1, 1])));
        Conv {
            weight,
            bias,
            transpose: false,
        }
    }

    /// 3x3 transposed convolution, kernel `(in, out, 3, 3)`; `zero`
    /// gives an all-zero kernel.
    pub fn new_transpose(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        cin: usize,
        cout: usize,
        zero: bool,
    ) -> Self {
        let kernel = if zero {
            Tensor::zeros(&[cin, cout, 3, 3])
        } else {
            fan_in_uniform(rng, &[cin, cout, 3, 3], cin * 9)
        };
        let weight = store.register(format!("{name}.weight"), kernel);
        let bias = Some(store.register(format!("{name}.bias"), Tensor::zeros(&[1, cout, 1, 1])));
        Conv {
            weight,
            bias,
            transpose: true,
        }
    }

    /// Stride 2, padding 1; the transpose uses output padding 1 so every
    /// stage exactly halves or doubles the spatial extent.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let mut y = if self.transpose {
            g.conv2d_transpose(x, w, 2, 1, 1)?
        } else {
            g.conv2d(x, w, 2, 1)?
        };
        if let Some(b) = self.bias {
            let b = p.var(g, b);
            y = g.add(y, b)?;
        }
        Ok(y)
    }
}

/// Dense layer with weight `(in, out)` and bias `(out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.register(format!("{name}.weight"), fan_in_uniform(rng, &[fan_in, fan_out], fan_in));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}
