//! Fixed-topology multilayer perceptrons with hand-written reverse-mode
//! differentiation, an Adam/SGD trainer and a versioned binary model format.
//!
//! Every learned component (score network, feasibility models, condition
//! encoder) is a [`FeedForwardNet`]. Batches are row-major: one sample per row.

mod io;
mod optim;
mod train;

pub use io::{load_model, net_from_json, net_to_json, read_model, save_model, write_model, ModelFile, ModelMeta, MAGIC};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use train::{train, train_joint, TrainReport, TrainerConfig};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * sigmoid(x)`, smooth and ReLU-like.
    #[default]
    Silu,
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// Output transform applied after the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    #[default]
    Linear,
    Sigmoid,
}

impl OutputHead {
    pub fn name(self) -> &'static str {
        match self {
            OutputHead::Linear => "linear",
            OutputHead::Sigmoid => "sigmoid",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(OutputHead::Linear),
            "sigmoid" => Ok(OutputHead::Sigmoid),
            other => Err(Error::InvalidArgument(format!("unknown output head `{other}`"))),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

/// Logit bound for the sigmoid head. Beyond it the sigmoid rounds to exactly
/// 0 or 1, so logits are clamped to keep outputs strictly inside (0, 1).
#[inline]
fn logit_bound<T: Scalar>() -> T {
    -T::epsilon().ln() - T::one()
}

/// One affine layer; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Feed-forward network: affine layers with a shared hidden activation and
/// an output head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet<T> {
    layers: Vec<Dense<T>>,
    activation: Activation,
    head: OutputHead,
}

/// Intermediate values of a batched forward pass, consumed by
/// [`FeedForwardNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    input: Array2<T>,
    /// Pre-activations of every layer; the last entry holds the head logits.
    pre: Vec<Array2<T>>,
    /// Post-activations of hidden layers.
    hidden: Vec<Array2<T>>,
    output: Array2<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Array2<T> {
        &self.output
    }

    /// Head pre-activations (equal to the output for a linear head).
    pub fn logits(&self) -> &Array2<T> {
        self.pre.last().expect("network has at least one layer")
    }

    /// Post-activation of hidden layer `i` (0-based).
    pub fn hidden(&self, i: usize) -> &Array2<T> {
        &self.hidden[i]
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Where the cotangent of a backward pass is attached.
#[derive(Debug, Clone, Copy)]
pub enum Cotangent<'a, T> {
    /// d(loss)/d(output).
    Output(ArrayView2<'a, T>),
    /// d(loss)/d(head logits); skips the head derivative, which keeps
    /// sigmoid cross-entropy numerically clean.
    Logits(ArrayView2<'a, T>),
}

impl<T: Scalar> FeedForwardNet<T> {
    /// Builds a network from explicit layers.
    pub fn from_layers(layers: Vec<Dense<T>>, activation: Activation, head: OutputHead) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("adjacent layer widths", pair[0].output_dim(), pair[1].input_dim())?;
        }
        for layer in &layers {
            check_dim("bias length", layer.output_dim(), layer.bias.len())?;
        }
        Ok(Self {
            layers,
            activation,
            head,
        })
    }

    /// All-zero network with the given layer widths.
    pub fn zeros(layer_dims: &[usize], activation: Activation, head: OutputHead) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Self::from_layers(layers, activation, head)
    }

    /// He-style Gaussian initialization scaled by fan-in, zero biases.
    pub fn init<R: Rng + ?Sized>(
        layer_dims: &[usize],
        activation: Activation,
        head: OutputHead,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation, head)?;
        let gain = match activation {
            Activation::Tanh => 1.0,
            _ => 2.0,
        };
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let fan_in = layer.input_dim() as f64;
            let scale = if i == last {
                (1.0 / fan_in).sqrt()
            } else {
                (gain / fan_in).sqrt()
            };
            layer.weight.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * scale)
            });
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].input_dim()];
        dims.extend(self.layers.iter().map(Dense::output_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::output_dim).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[T]) -> Result<()> {
        check_dim("flat parameter vector", self.num_params(), params.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = params[off];
                off += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[off];
                off += 1;
            }
        }
        Ok(())
    }

    pub fn param_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|&p| {
                let p = p.to_f64_lossy();
                p * p
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|p| p.is_finite()))
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> FeedForwardNet<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense {
                weight: l.weight.mapv(|w| U::lit(w.to_f64_lossy())),
                bias: l.bias.mapv(|b| U::lit(b.to_f64_lossy())),
            })
            .collect();
        FeedForwardNet {
            layers,
            activation: self.activation,
            head: self.head,
        }
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        check_dim("network input", self.input_dim(), input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(x)?.row(0).to_vec())
    }

    /// Batched forward pass without keeping intermediates.
    pub fn forward_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut a = affine(x, &self.layers[0]);
        for layer in self.layers.iter().skip(1) {
            let act = self.activation;
            a.mapv_inplace(|z| act.apply(z));
            a = affine(a.view(), layer);
        }
        self.apply_head(&mut a);
        Ok(a)
    }

    /// Batched forward pass that records what [`backward`](Self::backward) needs.
    pub fn forward_trace(&self, x: ArrayView2<T>) -> Result<Trace<T>> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut z = affine(x, &self.layers[0]);
        for layer in self.layers.iter().skip(1) {
            let act = self.activation;
            let a = z.mapv(|v| act.apply(v));
            pre.push(z);
            z = affine(a.view(), layer);
            hidden.push(a);
        }
        let mut output = z.clone();
        pre.push(z);
        self.apply_head(&mut output);
        Ok(Trace {
            input: x.to_owned(),
            pre,
            hidden,
            output,
        })
    }

    fn apply_head(&self, z: &mut Array2<T>) {
        if self.head == OutputHead::Sigmoid {
            let bound = logit_bound::<T>();
            z.mapv_inplace(|v| sigmoid(v.max(-bound).min(bound)));
        }
    }

    /// Reverse-mode pass. Returns parameter gradients of the scalar
    /// `sum(cotangent * output)` over the batch, and the per-row input gradient.
    pub fn backward(&self, trace: &Trace<T>, cotangent: Cotangent<T>) -> Result<(Gradients<T>, Array2<T>)> {
        let n = trace.batch_size();
        let logits = trace.logits();
        let mut delta = match cotangent {
            Cotangent::Output(c) => {
                check_dim("cotangent width", self.output_dim(), c.ncols())?;
                check_dim("cotangent rows", n, c.nrows())?;
                match self.head {
                    OutputHead::Linear => c.to_owned(),
                    OutputHead::Sigmoid => {
                        let bound = logit_bound::<T>();
                        let mut d = c.to_owned();
                        ndarray::Zip::from(&mut d)
                            .and(logits)
                            .and(&trace.output)
                            .for_each(|d, &z, &p| {
                                *d = if z.abs() >= bound {
                                    T::zero()
                                } else {
                                    *d * p * (T::one() - p)
                                };
                            });
                        d
                    }
                }
            }
            Cotangent::Logits(c) => {
                check_dim("cotangent width", self.output_dim(), c.ncols())?;
                check_dim("cotangent rows", n, c.nrows())?;
                c.to_owned()
            }
        };

        let mut grads: Vec<Dense<T>> = Vec::with_capacity(self.layers.len());
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let a_prev = if li == 0 {
                trace.input.view()
            } else {
                trace.hidden[li - 1].view()
            };
            let gw = delta.t().dot(&a_prev);
            let gb = delta.sum_axis(Axis(0));
            let next = delta.dot(&layer.weight);
            grads.push(Dense {
                weight: gw,
                bias: gb,
            });
            delta = next;
            if li > 0 {
                let act = self.activation;
                ndarray::Zip::from(&mut delta)
                    .and(&trace.pre[li - 1])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Folds input columns `start..` into the first-layer bias for batches
    /// where those columns are the same in every row.
    pub fn fix_trailing_input(&self, start: usize, fixed: &[T]) -> Result<FixedInput<T>> {
        check_dim("fixed input width", self.input_dim().saturating_sub(start), fixed.len())?;
        if start > self.input_dim() {
            return Err(Error::InvalidArgument("fixed input start beyond input width".into()));
        }
        let l0 = &self.layers[0];
        let f = ArrayView1::from(fixed);
        let bias = &l0.bias + &l0.weight.slice(s![.., start..]).dot(&f);
        Ok(FixedInput { start, bias })
    }

    fn first_layer_fixed(&self, x: ArrayView2<T>, fixed: &FixedInput<T>) -> Result<Array2<T>> {
        check_dim("variable input width", fixed.start, x.ncols())?;
        let w = self.layers[0].weight.slice(s![.., ..fixed.start]);
        let mut z = x.dot(&w.t());
        z += &fixed.bias;
        Ok(z)
    }

    /// [`forward_batch`](Self::forward_batch) with the trailing columns taken from `fixed`.
    pub fn forward_batch_fixed(&self, x: ArrayView2<T>, fixed: &FixedInput<T>) -> Result<Array2<T>> {
        let mut a = self.first_layer_fixed(x, fixed)?;
        for layer in self.layers.iter().skip(1) {
            let act = self.activation;
            a.mapv_inplace(|z| act.apply(z));
            a = affine(a.view(), layer);
        }
        self.apply_head(&mut a);
        Ok(a)
    }

    /// [`forward_trace`](Self::forward_trace) with the trailing columns taken
    /// from `fixed`. The trace only supports [`input_gradient`](Self::input_gradient).
    pub fn forward_trace_fixed(&self, x: ArrayView2<T>, fixed: &FixedInput<T>) -> Result<Trace<T>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut z = self.first_layer_fixed(x, fixed)?;
        for layer in self.layers.iter().skip(1) {
            let act = self.activation;
            let a = z.mapv(|v| act.apply(v));
            pre.push(z);
            z = affine(a.view(), layer);
            hidden.push(a);
        }
        let mut output = z.clone();
        pre.push(z);
        self.apply_head(&mut output);
        Ok(Trace {
            input: x.to_owned(),
            pre,
            hidden,
            output,
        })
    }

    /// Input gradient of `sum(cotangent * output)` without parameter
    /// gradients. For traces from the fixed-input path only the variable
    /// columns are returned.
    pub fn input_gradient(&self, trace: &Trace<T>, cotangent: ArrayView2<T>) -> Result<Array2<T>> {
        let n = trace.batch_size();
        check_dim("cotangent width", self.output_dim(), cotangent.ncols())?;
        check_dim("cotangent rows", n, cotangent.nrows())?;
        let mut delta = cotangent.to_owned();
        if self.head == OutputHead::Sigmoid {
            let bound = logit_bound::<T>();
            ndarray::Zip::from(&mut delta)
                .and(trace.logits())
                .and(&trace.output)
                .for_each(|d, &z, &p| {
                    *d = if z.abs() >= bound {
                        T::zero()
                    } else {
                        *d * p * (T::one() - p)
                    };
                });
        }
        for li in (1..self.layers.len()).rev() {
            delta = delta.dot(&self.layers[li].weight);
            let act = self.activation;
            ndarray::Zip::from(&mut delta)
                .and(&trace.pre[li - 1])
                .for_each(|d, &z| *d *= act.derivative(z));
        }
        let cols = trace.input.ncols();
        Ok(delta.dot(&self.layers[0].weight.slice(s![.., ..cols])))
    }

    /// Single-sample backward pass: parameter gradients and input gradient of
    /// `<output, cotangent>`.
    pub fn backward_single(&self, input: &[T], cotangent: &[T]) -> Result<(Gradients<T>, Vec<T>)> {
        check_dim("network input", self.input_dim(), input.len())?;
        check_dim("cotangent width", self.output_dim(), cotangent.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        let trace = self.forward_trace(x)?;
        let c = ArrayView2::from_shape((1, cotangent.len()), cotangent).expect("row view");
        let (g, dx) = self.backward(&trace, Cotangent::Output(c))?;
        Ok((g, dx.row(0).to_vec()))
    }

    /// Applies `params -= step` for an update with the same layout.
    pub(crate) fn apply_update(&mut self, update: &Gradients<T>) {
        for (l, u) in self.layers.iter_mut().zip(&update.layers) {
            l.weight -= &u.weight;
            l.bias -= &u.bias;
        }
    }
}

#[inline]
fn affine<T: Scalar>(x: ArrayView2<T>, layer: &Dense<T>) -> Array2<T> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument("layer_dims needs at least input and output widths".into()));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument("layer widths must be positive".into()));
    }
    Ok(())
}

/// First-layer bias with a fixed block of trailing inputs folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedInput<T> {
    start: usize,
    bias: Array1<T>,
}

impl<T> FixedInput<T> {
    /// Number of variable leading input columns.
    pub fn variable_width(&self) -> usize {
        self.start
    }
}

/// Parameter gradients laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &FeedForwardNet<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn scale(&mut self, factor: T) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|w| w * factor);
            l.bias.mapv_inplace(|b| b * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn norm(&self) -> T {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|g| g.is_finite()))
    }

    /// Gradient block of the first layer restricted to input columns `cols`.
    pub fn first_layer_columns(&self, cols: std::ops::Range<usize>) -> Array2<T> {
        self.layers[0].weight.slice(s![.., cols]).to_owned()
    }
}
