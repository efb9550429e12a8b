//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Every primitive application
//! appends a node whose inputs were created earlier, so creation order is
//! a topological order and [`Graph::backward`] is a single reverse sweep.
//! Graphs are meant to be dropped after their backward pass.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{numel, Tensor};

/// Default negative slope of `leaky_relu`.
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Reference to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d,
    Conv2dTranspose,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sum,
    Mean,
    Reshape,
    Concat,
    Clamp,
    Softmax,
    GaussianNoiseLike,
}

impl Primitive {
    pub const ALL: [Primitive; 19] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::MatMul,
        Primitive::Conv2d,
        Primitive::Conv2dTranspose,
        Primitive::Relu,
        Primitive::LeakyRelu,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Reshape,
        Primitive::Concat,
        Primitive::Clamp,
        Primitive::Softmax,
        Primitive::GaussianNoiseLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d => "conv2d",
            Primitive::Conv2dTranspose => "conv2d_transpose",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Reshape => "reshape",
            Primitive::Concat => "concat",
            Primitive::Clamp => "clamp",
            Primitive::Softmax => "softmax",
            Primitive::GaussianNoiseLike => "gaussian_noise_like",
        }
    }
}

impl FromStr for Primitive {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| TensorError::UnknownPrimitive(s.to_string()))
    }
}

/// Attribute map for [`Graph::apply`]. Unused fields are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Attrs {
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub output_padding: Option<usize>,
    /// Reduction axes for `sum`/`mean`; reduced axes are kept with extent 1.
    /// `None` reduces everything to a scalar.
    pub axes: Option<Vec<usize>>,
    pub axis: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub slope: Option<f64>,
    pub seed: Option<u64>,
}

impl Attrs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stride(mut self, v: usize) -> Self {
        self.stride = Some(v);
        self
    }

    pub fn padding(mut self, v: usize) -> Self {
        self.padding = Some(v);
        self
    }

    pub fn output_padding(mut self, v: usize) -> Self {
        self.output_padding = Some(v);
        self
    }

    pub fn axes(mut self, v: &[usize]) -> Self {
        self.axes = Some(v.to_vec());
        self
    }

    pub fn axis(mut self, v: usize) -> Self {
        self.axis = Some(v);
        self
    }

    pub fn shape(mut self, v: &[usize]) -> Self {
        self.shape = Some(v.to_vec());
        self
    }

    pub fn range(mut self, min: f64, max: f64) -> Self {
        self.min = Some(min);
        self.max = Some(max);
        self
    }

    pub fn slope(mut self, v: f64) -> Self {
        self.slope = Some(v);
        self
    }

    pub fn seed(mut self, v: u64) -> Self {
        self.seed = Some(v);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d { stride: usize, padding: usize },
    Conv2dTranspose { stride: usize, padding: usize, output_padding: usize },
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sum { axes: Option<Vec<usize>> },
    Mean { axes: Option<Vec<usize>> },
    Reshape,
    Concat { axis: usize },
    Clamp { min: f64, max: f64 },
    Softmax,
    Noise,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dTranspose { .. } => "conv2d_transpose",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Clamp { .. } => "clamp",
            Op::Softmax => "softmax",
            Op::Noise => "gaussian_noise_like",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], one slot per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter-leaf gradient into the store's grad buffers.
    ///
    /// Parameters the loss does not depend on receive zeros so that an
    /// optimizer step treats them as present-but-flat.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, node) in &self.params {
            let tensor = store.get_mut(id);
            match &self.grads[node] {
                Some(g) => tensor.accumulate_grad(g)?,
                None => tensor.accumulate_grad(&vec![0.0; tensor.numel()])?,
            }
        }
        Ok(())
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn reduce_shape(shape: &[usize], axes: &Option<Vec<usize>>, op: &'static str) -> Result<Vec<usize>> {
    match axes {
        None => Ok(Vec::new()),
        Some(axes) => {
            let mut out = shape.to_vec();
            for &a in axes {
                if a >= shape.len() {
                    return Err(mismatch(op, format!("axis {a} out of range for shape {shape:?}")));
                }
                out[a] = 1;
            }
            Ok(out)
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(Op::Leaf, Vec::new(), t, false)
    }

    /// Leaf that honours the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(Op::Leaf, Vec::new(), t, rg)
    }

    /// Leaf that always receives gradient, e.g. an input image.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Snapshot of a stored parameter as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().to_vec());
        let rg = src.requires_grad();
        let v = self.push(Op::Leaf, Vec::new(), value, rg);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Snapshot of a stored parameter that gradient does not reach.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        self.constant(Tensor::from_parts(src.shape().to_vec(), src.data().to_vec()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies a primitive by name.
    pub fn apply_named(&mut self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let p: Primitive = name.parse()?;
        self.apply(p, inputs, attrs)
    }

    /// Applies `op` to `inputs`, recording the node.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = match op {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => 2,
            Primitive::Conv2d | Primitive::Conv2dTranspose => 2,
            Primitive::Concat => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(TensorError::Arity {
                op: op.name(),
                expected: arity,
                got: inputs.len(),
            });
        }
        let (node_op, value) = match op {
            Primitive::Add => (Op::Add, self.fwd_binary(inputs, "add", |a, b| a + b)?),
            Primitive::Sub => (Op::Sub, self.fwd_binary(inputs, "sub", |a, b| a - b)?),
            Primitive::Mul => (Op::Mul, self.fwd_binary(inputs, "mul", |a, b| a * b)?),
            Primitive::MatMul => (Op::MatMul, self.fwd_matmul(inputs[0], inputs[1])?),
            Primitive::Conv2d => {
                let stride = attrs.stride.unwrap_or(1);
                let padding = attrs.padding.unwrap_or(0);
                let v = self.fwd_conv2d(inputs[0], inputs[1], stride, padding)?;
                (Op::Conv2d { stride, padding }, v)
            }
            Primitive::Conv2dTranspose => {
                let stride = attrs.stride.unwrap_or(1);
                let padding = attrs.padding.unwrap_or(0);
                let output_padding = attrs.output_padding.unwrap_or(0);
                let v = self.fwd_conv2d_transpose(inputs[0], inputs[1], stride, padding, output_padding)?;
                (Op::Conv2dTranspose { stride, padding, output_padding }, v)
            }
            Primitive::Relu => (Op::Relu, self.fwd_map(inputs[0], |x| x.max(0.0))),
            Primitive::LeakyRelu => {
                let slope = attrs.slope.unwrap_or(LEAKY_RELU_SLOPE);
                let v = self.fwd_map(inputs[0], |x| if x > 0.0 { x } else { slope * x });
                (Op::LeakyRelu { slope }, v)
            }
            Primitive::Tanh => (Op::Tanh, self.fwd_map(inputs[0], f64::tanh)),
            Primitive::Sigmoid => (Op::Sigmoid, self.fwd_map(inputs[0], sigmoid)),
            Primitive::Exp => (Op::Exp, self.fwd_map(inputs[0], f64::exp)),
            Primitive::Log => {
                let x = self.value(inputs[0]);
                if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                (Op::Log, self.fwd_map(inputs[0], f64::ln))
            }
            Primitive::Sum => {
                let v = self.fwd_reduce(inputs[0], &attrs.axes, "sum", false)?;
                (Op::Sum { axes: attrs.axes.clone() }, v)
            }
            Primitive::Mean => {
                let v = self.fwd_reduce(inputs[0], &attrs.axes, "mean", true)?;
                (Op::Mean { axes: attrs.axes.clone() }, v)
            }
            Primitive::Reshape => {
                let shape = attrs.shape.as_ref().ok_or(TensorError::MissingAttr {
                    op: "reshape",
                    attr: "shape",
                })?;
                let v = self.value(inputs[0]).clone().with_requires_grad(false).reshape(shape)?;
                (Op::Reshape, v)
            }
            Primitive::Concat => {
                let axis = attrs.axis.unwrap_or(0);
                (Op::Concat { axis }, self.fwd_concat(inputs, axis)?)
            }
            Primitive::Clamp => {
                let min = attrs.min.unwrap_or(f64::NEG_INFINITY);
                let max = attrs.max.unwrap_or(f64::INFINITY);
                if !(min <= max) {
                    return Err(TensorError::Domain {
                        op: "clamp",
                        detail: format!("min {min} > max {max}"),
                    });
                }
                (Op::Clamp { min, max }, self.fwd_map(inputs[0], |x| x.clamp(min, max)))
            }
            Primitive::Softmax => (Op::Softmax, self.fwd_softmax(inputs[0])?),
            Primitive::GaussianNoiseLike => {
                let seed = attrs.seed.ok_or(TensorError::MissingAttr {
                    op: "gaussian_noise_like",
                    attr: "seed",
                })?;
                let shape = self.shape(inputs[0]).to_vec();
                let mut data = vec![0.0; numel(&shape)];
                SeededRng::new(seed).fill_normal(&mut data);
                (Op::Noise, Tensor::from_parts(shape, data))
            }
        };
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: node_op.name() });
        }
        let requires_grad = !matches!(node_op, Op::Noise) && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(node_op, inputs.to_vec(), value, requires_grad))
    }

    // ---- forward kernels -------------------------------------------------

    fn fwd_map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(x);
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    }

    fn fwd_binary(&self, inputs: &[Var], op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
        let shape = kernels::broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| mismatch(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
        let mut out = vec![0.0; numel(&shape)];
        let (ad, bd) = (a.data(), b.data());
        kernels::broadcast_for_each(&shape, a.shape(), b.shape(), |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        Ok(Tensor::from_parts(shape, out))
    }

    fn fwd_matmul(&self, a: Var, b: Var) -> Result<Tensor> {
        let (a, b) = (self.value(a), self.value(b));
        let (m, k) = match a.shape() {
            [m, k] => (*m, *k),
            s => return Err(mismatch("matmul", format!("lhs must be rank 2, got {s:?}"))),
        };
        let (k2, n, out_shape) = match b.shape() {
            [k2] => (*k2, 1, vec![m]),
            [k2, n] => (*k2, *n, vec![m, *n]),
            s => return Err(mismatch("matmul", format!("rhs must be rank 1 or 2, got {s:?}"))),
        };
        if k != k2 {
            return Err(mismatch("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(false, false, m, n, k, a.data(), b.data(), 0.0, &mut out);
        Ok(Tensor::from_parts(out_shape, out))
    }

    fn conv_geometry(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<(usize, usize, ConvGeometry)> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let [n, c, h, wd] = *xs else {
            return Err(mismatch("conv2d", format!("input must be NCHW, got {xs:?}")));
        };
        let [k, kc, kh, kw] = *ws else {
            return Err(mismatch("conv2d", format!("kernel must be KCkhkw, got {ws:?}")));
        };
        if kc != c {
            return Err(mismatch("conv2d", format!("input has {c} channels, kernel expects {kc}")));
        }
        if stride == 0 {
            return Err(mismatch("conv2d", "stride must be positive".into()));
        }
        let (oh, ow) = match (
            kernels::conv_out_size(h, kh, stride, padding),
            kernels::conv_out_size(wd, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(mismatch(
                    "conv2d",
                    format!("kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}"),
                ))
            }
        };
        let g = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: oh,
            out_w: ow,
        };
        Ok((n, k, g))
    }

    fn fwd_conv2d(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Tensor> {
        let (n, k, g) = self.conv_geometry(x, w, stride, padding)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let in_len = g.channels * g.height * g.width;
        let out_len = k * g.col_cols();
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        let mut out = vec![0.0; n * out_len];
        for s in 0..n {
            kernels::im2col(&xd[s * in_len..(s + 1) * in_len], &g, &mut cols);
            kernels::gemm(
                false,
                false,
                k,
                g.col_cols(),
                g.col_rows(),
                wd,
                &cols,
                0.0,
                &mut out[s * out_len..(s + 1) * out_len],
            );
        }
        Ok(Tensor::from_parts(vec![n, k, g.out_h, g.out_w], out))
    }

    /// Geometry of a transposed convolution, expressed as the forward
    /// convolution whose adjoint it is: `channels/height/width` describe
    /// the transposed conv's output and `out_h/out_w` its input.
    fn conv_t_geometry(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<(usize, usize, ConvGeometry)> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let [n, c_in, h, wd] = *xs else {
            return Err(mismatch("conv2d_transpose", format!("input must be NCHW, got {xs:?}")));
        };
        let [kc, c_out, kh, kw] = *ws else {
            return Err(mismatch(
                "conv2d_transpose",
                format!("kernel must be (Cin, Cout, kh, kw), got {ws:?}"),
            ));
        };
        if kc != c_in {
            return Err(mismatch(
                "conv2d_transpose",
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        if stride == 0 || output_padding >= stride {
            return Err(mismatch(
                "conv2d_transpose",
                format!("need stride > 0 and output_padding < stride (stride {stride}, output_padding {output_padding})"),
            ));
        }
        let (oh, ow) = match (
            kernels::conv_transpose_out_size(h, kh, stride, padding, output_padding),
            kernels::conv_transpose_out_size(wd, kw, stride, padding, output_padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(mismatch(
                    "conv2d_transpose",
                    format!("padding {padding} too large for input {h}x{wd}"),
                ))
            }
        };
        let g = ConvGeometry {
            channels: c_out,
            height: oh,
            width: ow,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: h,
            out_w: wd,
        };
        Ok((n, c_in, g))
    }

    fn fwd_conv2d_transpose(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Tensor> {
        let (n, c_in, g) = self.conv_t_geometry(x, w, stride, padding, output_padding)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let in_len = c_in * g.col_cols();
        let out_len = g.channels * g.height * g.width;
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        let mut out = vec![0.0; n * out_len];
        for s in 0..n {
            // cols (Cout*kh*kw, H*W) = W^T (Cout*kh*kw, Cin) x X (Cin, H*W)
            kernels::gemm(
                true,
                false,
                g.col_rows(),
                g.col_cols(),
                c_in,
                wd,
                &xd[s * in_len..(s + 1) * in_len],
                0.0,
                &mut cols,
            );
            kernels::col2im(&cols, &g, &mut out[s * out_len..(s + 1) * out_len]);
        }
        Ok(Tensor::from_parts(vec![n, g.channels, g.height, g.width], out))
    }

    fn fwd_reduce(&self, x: Var, axes: &Option<Vec<usize>>, op: &'static str, mean: bool) -> Result<Tensor> {
        let x = self.value(x);
        let out_shape = reduce_shape(x.shape(), axes, op)?;
        let mut out = vec![0.0; numel(&out_shape)];
        let xd = x.data();
        if axes.is_none() {
            out[0] = xd.iter().sum();
        } else {
            kernels::broadcast_for_each(x.shape(), x.shape(), &out_shape, |o, _, r| out[r] += xd[o]);
        }
        if mean {
            let count = (x.numel() / out.len().max(1)).max(1) as f64;
            out.iter_mut().for_each(|v| *v /= count);
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    fn fwd_concat(&self, inputs: &[Var], axis: usize) -> Result<Tensor> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", format!("{s:?} incompatible with {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(Tensor::from_parts(shape, out))
    }

    fn fwd_softmax(&self, x: Var) -> Result<Tensor> {
        let x = self.value(x);
        let len = *x.shape().last().ok_or_else(|| mismatch("softmax", "input must have rank >= 1".into()))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(len.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    // ---- convenience wrappers -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b], &Attrs::new())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b], &Attrs::new())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b], &Attrs::new())
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = self.constant(Tensor::scalar(c));
        self.mul(a, c)
    }

    /// Adds a constant scalar.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = self.constant(Tensor::scalar(c));
        self.add(a, c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b], &Attrs::new())
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d, &[x, kernel], &Attrs::new().stride(stride).padding(padding))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        self.apply(
            Primitive::Conv2dTranspose,
            &[x, kernel],
            &Attrs::new().stride(stride).padding(padding).output_padding(output_padding),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x], &Attrs::new())
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LeakyRelu, &[x], &Attrs::new())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x], &Attrs::new())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x], &Attrs::new())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x], &Attrs::new())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x], &Attrs::new())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x], &Attrs::new())
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Sum, &[x], &Attrs::new().axes(axes))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x], &Attrs::new())
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Mean, &[x], &Attrs::new().axes(axes))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape, &[x], &Attrs::new().shape(shape))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat, xs, &Attrs::new().axis(axis))
    }

    pub fn clamp(&mut self, x: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(Primitive::Clamp, &[x], &Attrs::new().range(min, max))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x], &Attrs::new())
    }

    pub fn gaussian_noise_like(&mut self, x: Var, seed: u64) -> Result<Var> {
        self.apply(Primitive::GaussianNoiseLike, &[x], &Attrs::new().seed(seed))
    }

    /// Row-wise log-softmax over the last axis of a rank-2 tensor,
    /// composed from primitives. The row maximum enters as a constant,
    /// which leaves the derivative unchanged because log-sum-exp is
    /// shift invariant.
    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(mismatch("log_softmax", format!("expected rank 2, got {shape:?}")));
        };
        let data = self.value(logits).data();
        let maxes: Vec<f64> = (0..rows)
            .map(|r| data[r * cols..(r + 1) * cols].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let m = self.constant(Tensor::from_parts(vec![rows, 1], maxes));
        let shifted = self.sub(logits, m)?;
        let e = self.exp(shifted)?;
        let z = self.sum_axes(e, &[1])?;
        let lz = self.log(z)?;
        self.sub(shifted, lz)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Each node is visited once, in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.filter(|_| n.requires_grad).map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store)?;
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        let unary = |grads: &mut [Option<Vec<f64>>], f: &dyn Fn(usize) -> f64| {
            let x = node.inputs[0];
            if self.wants(x) {
                let d = (0..g.len()).map(|i| g[i] * f(i)).collect();
                add_into(&mut grads[x.0], d);
            }
        };
        match &node.op {
            Op::Leaf | Op::Noise => {}
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (self.value(a), self.value(b));
                let mut ga = self.wants(a).then(|| vec![0.0; av.numel()]);
                let mut gb = self.wants(b).then(|| vec![0.0; bv.numel()]);
                let (ad, bd) = (av.data(), bv.data());
                let op = &node.op;
                kernels::broadcast_for_each(node.value.shape(), av.shape(), bv.shape(), |o, ia, ib| {
                    let go = g[o];
                    match op {
                        Op::Add => {
                            if let Some(ga) = ga.as_mut() {
                                ga[ia] += go;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ib] += go;
                            }
                        }
                        Op::Sub => {
                            if let Some(ga) = ga.as_mut() {
                                ga[ia] += go;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ib] -= go;
                            }
                        }
                        _ => {
                            if let Some(ga) = ga.as_mut() {
                                ga[ia] += go * bd[ib];
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ib] += go * ad[ia];
                            }
                        }
                    }
                });
                if let Some(ga) = ga {
                    add_into(&mut grads[a.0], ga);
                }
                if let Some(gb) = gb {
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if bv.rank() == 1 { 1 } else { bv.shape()[1] };
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(false, true, m, k, n, g, bv.data(), 0.0, &mut ga);
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(true, false, k, n, m, av.data(), g, 0.0, &mut gb);
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Conv2d { stride, padding } => {
                let (x, w) = (node.inputs[0], node.inputs[1]);
                let (n, k, geo) = self
                    .conv_geometry(x, w, *stride, *padding)
                    .expect("geometry validated in forward");
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                let in_len = geo.channels * geo.height * geo.width;
                let out_len = k * geo.col_cols();
                let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
                let mut gw = self.wants(w).then(|| vec![0.0; wd.len()]);
                let mut gx = self.wants(x).then(|| vec![0.0; xd.len()]);
                for s in 0..n {
                    let gy = &g[s * out_len..(s + 1) * out_len];
                    if let Some(gw) = gw.as_mut() {
                        kernels::im2col(&xd[s * in_len..(s + 1) * in_len], &geo, &mut cols);
                        kernels::gemm(false, true, k, geo.col_rows(), geo.col_cols(), gy, &cols, 1.0, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        kernels::gemm(true, false, geo.col_rows(), geo.col_cols(), k, wd, gy, 0.0, &mut cols);
                        kernels::col2im(&cols, &geo, &mut gx[s * in_len..(s + 1) * in_len]);
                    }
                }
                if let Some(gw) = gw {
                    add_into(&mut grads[w.0], gw);
                }
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Conv2dTranspose { stride, padding, output_padding } => {
                let (x, w) = (node.inputs[0], node.inputs[1]);
                let (n, c_in, geo) = self
                    .conv_t_geometry(x, w, *stride, *padding, *output_padding)
                    .expect("geometry validated in forward");
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                let in_len = c_in * geo.col_cols();
                let out_len = geo.channels * geo.height * geo.width;
                let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
                let mut gw = self.wants(w).then(|| vec![0.0; wd.len()]);
                let mut gx = self.wants(x).then(|| vec![0.0; xd.len()]);
                for s in 0..n {
                    kernels::im2col(&g[s * out_len..(s + 1) * out_len], &geo, &mut cols);
                    if let Some(gx) = gx.as_mut() {
                        // dX (Cin, H*W) = W (Cin, Cout*kh*kw) x cols
                        kernels::gemm(
                            false,
                            false,
                            c_in,
                            geo.col_cols(),
                            geo.col_rows(),
                            wd,
                            &cols,
                            0.0,
                            &mut gx[s * in_len..(s + 1) * in_len],
                        );
                    }
                    if let Some(gw) = gw.as_mut() {
                        // dW (Cin, Cout*kh*kw) += X (Cin, H*W) x cols^T
                        kernels::gemm(
                            false,
                            true,
                            c_in,
                            geo.col_rows(),
                            geo.col_cols(),
                            &xd[s * in_len..(s + 1) * in_len],
                            &cols,
                            1.0,
                            gw,
                        );
                    }
                }
                if let Some(gw) = gw {
                    add_into(&mut grads[w.0], gw);
                }
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Relu => {
                let xd = self.value(node.inputs[0]).data();
                unary(grads, &|i| if xd[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::LeakyRelu { slope } => {
                let xd = self.value(node.inputs[0]).data();
                unary(grads, &|i| if xd[i] > 0.0 { 1.0 } else { *slope });
            }
            Op::Tanh => unary(grads, &|i| 1.0 - y[i] * y[i]),
            Op::Sigmoid => unary(grads, &|i| y[i] * (1.0 - y[i])),
            Op::Exp => unary(grads, &|i| y[i]),
            Op::Log => {
                let xd = self.value(node.inputs[0]).data();
                unary(grads, &|i| 1.0 / xd[i]);
            }
            Op::Clamp { min, max } => {
                let xd = self.value(node.inputs[0]).data();
                unary(grads, &|i| if xd[i] > *min && xd[i] < *max { 1.0 } else { 0.0 });
            }
            Op::Reshape => unary(grads, &|_| 1.0),
            Op::Sum { axes } | Op::Mean { axes } => {
                let x = node.inputs[0];
                if self.wants(x) {
                    let xs = self.shape(x);
                    let n = numel(xs);
                    let scale = if matches!(node.op, Op::Mean { .. }) {
                        1.0 / (n / g.len().max(1)).max(1) as f64
                    } else {
                        1.0
                    };
                    let mut gx = vec![0.0; n];
                    if axes.is_none() {
                        gx.iter_mut().for_each(|v| *v = g[0] * scale);
                    } else {
                        kernels::broadcast_for_each(xs, xs, node.value.shape(), |o, _, r| gx[o] = g[r] * scale);
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Concat { axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut start = 0;
                for &v in &node.inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * row + start..o * row + start + chunk]);
                        }
                        add_into(&mut grads[v.0], gv);
                    }
                    start += chunk;
                }
            }
            Op::Softmax => {
                let x = node.inputs[0];
                if self.wants(x) {
                    let len = *node.value.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(len).zip(y.chunks(len)).zip(gx.chunks_mut(len)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..len {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
        }
    }

    /// Plain-text edge list: one `index op inputs` line per node.
    pub fn dump_edges(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let inputs: Vec<String> = n.inputs.iter().map(|v| v.0.to_string()).collect();
            let _ = writeln!(s, "{i} {} [{}]", n.op.name(), inputs.join(","));
        }
        s
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
