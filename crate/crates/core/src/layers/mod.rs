//! Differentiable layers with hand-written forward and backward passes.

mod conv;
mod dense;
mod loss;
mod pool;
mod simple;

pub use conv::Conv2d;
pub use dense::Dense;
pub use loss::{softmax, softmax_xent, XentOutput};
pub use pool::{MaxPool2d, POOL};
pub use simple::{Dropout, Flatten, Relu};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A named parameter tensor and its gradient (always the same shape).
#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub name: &'static str,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn zeros(name: &'static str, shape: &[usize]) -> Self {
        let value = Tensor::zeros(shape.to_vec()).expect("positive parameter shape");
        Self {
            name,
            grad: value.zeros_like(),
            value,
        }
    }

    fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name,
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

/// Kaiming-uniform fan-in initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(t: &mut Tensor<T>, fan_in: usize, rng: &mut R) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = T::of(rng.gen_range(-bound..bound));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Maxpool2d,
    Dense,
    Flatten,
    Relu,
    Dropout,
    SoftmaxXent,
}

#[derive(Clone, Debug)]
pub enum LayerOp<T = f32> {
    Conv2d(Conv2d<T>),
    MaxPool2d(MaxPool2d),
    Dense(Dense<T>),
    Flatten(Flatten),
    Relu(Relu),
    Dropout(Dropout<T>),
}

/// One entry of a sequential model.
#[derive(Clone, Debug)]
pub struct Layer<T = f32> {
    pub name: String,
    /// 1-based base block this layer belongs to; `None` for head layers.
    pub block: Option<usize>,
    pub trainable: bool,
    pub op: LayerOp<T>,
    grads_ready: bool,
}

impl<T: Scalar> Layer<T> {
    pub fn new(name: impl Into<String>, op: LayerOp<T>) -> Self {
        Self {
            name: name.into(),
            block: None,
            trainable: true,
            op,
            grads_ready: false,
        }
    }

    pub fn in_block(mut self, block: usize) -> Self {
        self.block = Some(block);
        self
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            LayerOp::Conv2d(_) => LayerKind::Conv2d,
            LayerOp::MaxPool2d(_) => LayerKind::Maxpool2d,
            LayerOp::Dense(_) => LayerKind::Dense,
            LayerOp::Flatten(_) => LayerKind::Flatten,
            LayerOp::Relu(_) => LayerKind::Relu,
            LayerOp::Dropout(_) => LayerKind::Dropout,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match &self.op {
            LayerOp::Conv2d(c) => vec![&c.weight, &c.bias],
            LayerOp::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.op {
            LayerOp::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            LayerOp::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.op, LayerOp::Conv2d(_) | LayerOp::Dense(_))
    }

    /// True when the layer owns parameters that the optimizer may update.
    pub fn updates_params(&self) -> bool {
        self.trainable && self.has_params()
    }

    /// Whether the forward pass depends on an RNG in training mode.
    pub fn is_stochastic(&self) -> bool {
        matches!(&self.op, LayerOp::Dropout(d) if d.rate() > 0.0)
    }

    /// Gradients from the latest backward pass are present and not yet consumed.
    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    /// Marks (or clears) gradients as available for the next optimizer step.
    pub fn set_grads_ready(&mut self, ready: bool) {
        self.grads_ready = ready;
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        match &mut self.op {
            LayerOp::Conv2d(c) => c.init(rng),
            LayerOp::Dense(d) => d.init(rng),
            _ => {}
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match &self.op {
            LayerOp::Conv2d(c) => c.output_shape(input),
            LayerOp::MaxPool2d(p) => p.output_shape(input),
            LayerOp::Dense(d) => d.output_shape(input),
            LayerOp::Flatten(_) => Ok(Flatten::output_shape(input)),
            LayerOp::Relu(_) | LayerOp::Dropout(_) => Ok(input.to_vec()),
        }
        .map_err(|e| match e {
            Error::Shape(msg) => Error::Shape(format!("{}: {msg}", self.name)),
            other => other,
        })
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, training: bool, rng: &mut R) -> Result<Tensor<T>> {
        match &mut self.op {
            LayerOp::Conv2d(c) => c.forward(x),
            LayerOp::MaxPool2d(p) => p.forward(x),
            LayerOp::Dense(d) => d.forward(x),
            LayerOp::Flatten(f) => f.forward(x),
            LayerOp::Relu(r) => Ok(r.forward(x)),
            LayerOp::Dropout(d) => Ok(d.forward(x, training, rng)),
        }
    }

    /// Backward pass returning `dx`. Parameter gradients are filled only for trainable layers.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .backward_with(dy, true)?
            .expect("dx requested"))
    }

    /// Like [`Layer::backward`], skipping the `dx` computation when it is not needed.
    pub fn backward_with(&mut self, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let param_grads = self.trainable;
        let dx = match &mut self.op {
            LayerOp::Conv2d(c) => c.backward(dy, param_grads, need_dx)?,
            LayerOp::Dense(d) => d.backward(dy, param_grads, need_dx)?,
            LayerOp::MaxPool2d(p) => Some(p.backward(dy)?),
            LayerOp::Flatten(f) => Some(f.backward(dy)?),
            LayerOp::Relu(r) => Some(r.backward(dy)?),
            LayerOp::Dropout(d) => Some(d.backward(dy)?),
        };
        if param_grads && self.has_params() {
            self.grads_ready = true;
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        match &mut self.op {
            LayerOp::Conv2d(c) => c.clear_cache(),
            LayerOp::MaxPool2d(p) => p.clear_cache(),
            LayerOp::Dense(d) => d.clear_cache(),
            LayerOp::Flatten(f) => f.clear_cache(),
            LayerOp::Relu(r) => r.clear_cache(),
            LayerOp::Dropout(d) => d.clear_cache(),
        }
    }

    /// Copy with parameters converted to another precision and caches dropped.
    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let op = match &self.op {
            LayerOp::Conv2d(c) => LayerOp::Conv2d(c.cast()),
            LayerOp::Dense(d) => LayerOp::Dense(d.cast()),
            LayerOp::MaxPool2d(_) => LayerOp::MaxPool2d(MaxPool2d::new()),
            LayerOp::Flatten(_) => LayerOp::Flatten(Flatten::new()),
            LayerOp::Relu(_) => LayerOp::Relu(Relu::new()),
            LayerOp::Dropout(d) => LayerOp::Dropout(d.cast()),
        };
        Layer {
            name: self.name.clone(),
            block: self.block,
            trainable: self.trainable,
            op,
            grads_ready: false,
        }
    }
}
