//! Sequential models: the truncated VGG19 base, the added classification head,
//! and block-level freezing.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    softmax_xent, Conv2d, Dense, Dropout, Flatten, Layer, LayerOp, MaxPool2d, Relu, XentOutput,
};
use crate::rng::{stream, Domain};
use crate::tensor::{Scalar, Shape4, Tensor};

/// Conv layers per VGG19 block.
pub const VGG19_DEPTHS: [usize; 5] = [2, 2, 4, 4, 4];
/// Output channels per VGG19 block.
pub const VGG19_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
/// Filter counts of the three conv pairs in the added head.
pub const HEAD_WIDTHS: [usize; 3] = [32, 64, 64];
pub const HEAD_DENSE_UNITS: usize = 512;
pub const CONV_KERNEL: usize = 3;
pub const DEFAULT_CLASSES: usize = 11;

/// Everything needed to rebuild a model deterministically from a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input geometry; `n` is ignored.
    pub input: Shape4,
    pub base_blocks: usize,
    pub frozen_blocks: BTreeSet<usize>,
    pub class_count: usize,
    pub conv_dropout: f32,
    pub dense_dropout: f32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::new(150, 4)
    }
}

impl ModelSpec {
    /// Square RGB input, all retained base blocks frozen, 11 classes.
    pub fn new(image_size: usize, base_blocks: usize) -> Self {
        Self {
            input: Shape4 {
                n: 1,
                h: image_size,
                w: image_size,
                c: 3,
            },
            base_blocks,
            frozen_blocks: (1..=base_blocks).collect(),
            class_count: DEFAULT_CLASSES,
            conv_dropout: 0.25,
            dense_dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Shape4::new(1, self.input.h, self.input.w, self.input.c)?;
        if !(1..=VGG19_DEPTHS.len()).contains(&self.base_blocks) {
            return Err(Error::Param(format!(
                "base_blocks must be in [1, 5], got {}",
                self.base_blocks
            )));
        }
        if let Some(b) = self
            .frozen_blocks
            .iter()
            .find(|&&b| b == 0 || b > self.base_blocks)
        {
            return Err(Error::Param(format!(
                "frozen block {b} is not among the {} retained base blocks",
                self.base_blocks
            )));
        }
        if self.class_count < 2 {
            return Err(Error::Param("class_count must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    input: Shape4,
    pub layers: Vec<Layer<T>>,
    /// Description the model was built from, kept in step with [`freeze`].
    pub spec: Option<ModelSpec>,
}

fn init_layer<T: Scalar>(layer: &mut Layer<T>, seed: u64) {
    let mut rng = stream(seed, Domain::Init, &[name_key(&layer.name)]);
    layer.init(&mut rng);
}

/// Stable 64-bit key for a layer name (FNV-1a).
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// The first `base_blocks` VGG19 blocks, each ending in a 2x2 max pool.
pub fn build_vgg19_base<T: Scalar>(input: Shape4, base_blocks: usize, seed: u64) -> Result<Model<T>> {
    if !(1..=VGG19_DEPTHS.len()).contains(&base_blocks) {
        return Err(Error::Param(format!(
            "base_blocks must be in [1, 5], got {base_blocks}"
        )));
    }
    let mut model = Model::from_layers(input, Vec::new());
    let mut channels = input.c;
    for block in 1..=base_blocks {
        let width = VGG19_WIDTHS[block - 1];
        for i in 1..=VGG19_DEPTHS[block - 1] {
            let mut conv = Layer::new(
                format!("block{block}_conv{i}"),
                LayerOp::Conv2d(Conv2d::new(CONV_KERNEL, channels, width)?),
            )
            .in_block(block);
            init_layer(&mut conv, seed);
            model.layers.push(conv);
            model
                .layers
                .push(Layer::new(format!("block{block}_relu{i}"), LayerOp::Relu(Relu::new())).in_block(block));
            channels = width;
        }
        model.layers.push(
            Layer::new(format!("block{block}_pool"), LayerOp::MaxPool2d(MaxPool2d::new())).in_block(block),
        );
    }
    model.output_shape(1).map_err(|e| {
        Error::Shape(format!(
            "{base_blocks} VGG19 blocks do not fit a {}x{} input: {e}",
            input.h, input.w
        ))
    })?;
    Ok(model)
}

/// Appends (conv32 conv32 pool drop)(conv64 conv64 pool drop)(conv64 conv64 pool drop)
/// flatten dense512 drop dense(class_count). Softmax cross-entropy is applied by
/// [`Model::loss`].
pub fn assemble_modified_head<T: Scalar>(
    mut base: Model<T>,
    class_count: usize,
    conv_dropout: f32,
    dense_dropout: f32,
    seed: u64,
) -> Result<Model<T>> {
    let shape = base.output_shape(1)?;
    let [_, h, w, mut channels] = shape[..] else {
        return Err(Error::Shape(format!("head needs an NHWC base output, got {shape:?}")));
    };
    let min = 1 << HEAD_WIDTHS.len();
    if h < min || w < min {
        return Err(Error::Shape(format!(
            "base output {h}x{w} is too small for {} head poolings (need >= {min}x{min})",
            HEAD_WIDTHS.len()
        )));
    }
    let mut push = |layer: Layer<T>| {
        let mut layer = layer;
        init_layer(&mut layer, seed);
        base.layers.push(layer);
    };
    let mut conv_index = 1;
    for (stage, &width) in HEAD_WIDTHS.iter().enumerate() {
        for _ in 0..2 {
            push(Layer::new(
                format!("head_conv{conv_index}"),
                LayerOp::Conv2d(Conv2d::new(CONV_KERNEL, channels, width)?),
            ));
            push(Layer::new(format!("head_relu{conv_index}"), LayerOp::Relu(Relu::new())));
            channels = width;
            conv_index += 1;
        }
        push(Layer::new(format!("head_pool{}", stage + 1), LayerOp::MaxPool2d(MaxPool2d::new())));
        push(Layer::new(
            format!("head_dropout{}", stage + 1),
            LayerOp::Dropout(Dropout::new(conv_dropout)?),
        ));
    }
    let flat = (h >> HEAD_WIDTHS.len()) * (w >> HEAD_WIDTHS.len()) * channels;
    push(Layer::new("flatten", LayerOp::Flatten(Flatten::new())));
    push(Layer::new(
        "head_dense",
        LayerOp::Dense(Dense::new(flat, HEAD_DENSE_UNITS)?),
    ));
    push(Layer::new("head_dense_relu", LayerOp::Relu(Relu::new())));
    push(Layer::new(
        "head_dropout4",
        LayerOp::Dropout(Dropout::new(dense_dropout)?),
    ));
    push(Layer::new(
        "predictions",
        LayerOp::Dense(Dense::new(HEAD_DENSE_UNITS, class_count)?),
    ));
    base.output_shape(1)?;
    Ok(base)
}

/// Marks every layer of the listed base blocks non-trainable and everything else trainable.
pub fn freeze<T: Scalar>(model: &mut Model<T>, frozen_blocks: &BTreeSet<usize>) -> Result<()> {
    let blocks = model.base_blocks();
    if let Some(b) = frozen_blocks.iter().find(|&&b| b == 0 || b > blocks) {
        return Err(Error::Param(format!(
            "unknown block {b}: the model has {blocks} base blocks"
        )));
    }
    for layer in &mut model.layers {
        layer.trainable = layer.block.is_none_or(|b| !frozen_blocks.contains(&b));
    }
    if let Some(spec) = model.spec.as_mut() {
        spec.frozen_blocks = frozen_blocks.clone();
    }
    Ok(())
}

/// Builds the full model described by `spec`. Parameters depend only on `(spec, seed)`.
pub fn build<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let base = build_vgg19_base(spec.input, spec.base_blocks, seed)?;
    let mut model = assemble_modified_head(
        base,
        spec.class_count,
        spec.conv_dropout,
        spec.dense_dropout,
        seed,
    )?;
    model.spec = Some(spec.clone());
    freeze(&mut model, &spec.frozen_blocks)?;
    Ok(model)
}

impl<T: Scalar> Model<T> {
    pub fn from_layers(input: Shape4, layers: Vec<Layer<T>>) -> Self {
        Self {
            input: Shape4 { n: 1, ..input },
            layers,
            spec: None,
        }
    }

    pub fn input_shape(&self) -> Shape4 {
        self.input
    }

    pub fn base_blocks(&self) -> usize {
        self.layers.iter().filter_map(|l| l.block).max().unwrap_or(0)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<T>> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Output shape of every layer for a batch of `n`.
    pub fn layer_shapes(&self, n: usize) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shape = vec![n, self.input.h, self.input.w, self.input.c];
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push((layer.name.clone(), shape.clone()));
        }
        Ok(out)
    }

    pub fn output_shape(&self, n: usize) -> Result<Vec<usize>> {
        Ok(self
            .layer_shapes(n)?
            .pop()
            .map(|(_, s)| s)
            .unwrap_or_else(|| vec![n, self.input.h, self.input.w, self.input.c]))
    }

    pub fn class_count(&self) -> Result<usize> {
        match self.output_shape(1)?[..] {
            [_, k] => Ok(k),
            ref s => Err(Error::Shape(format!("model output {s:?} is not [n, classes]"))),
        }
    }

    /// Number of leading layers whose output is a fixed function of the input:
    /// no updatable parameters and no training-time randomness.
    pub fn frozen_prefix_len(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.updates_params() || l.is_stochastic())
            .unwrap_or(self.layers.len())
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, training: bool, rng: &mut R) -> Result<Tensor<T>> {
        self.forward_range(0..self.layers.len(), x, training, rng)
    }

    /// Runs only `layers[range]`, feeding `x` to the first of them.
    pub fn forward_range<R: Rng + ?Sized>(
        &mut self,
        range: std::ops::Range<usize>,
        x: &Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        if range.start == 0 {
            let s = x.dims4()?;
            if (s.h, s.w, s.c) != (self.input.h, self.input.w, self.input.c) {
                return Err(Error::Shape(format!(
                    "model expects {}x{}x{} input, got {:?}",
                    self.input.h,
                    self.input.w,
                    self.input.c,
                    x.shape()
                )));
            }
        }
        let mut layers = self.layers[range].iter_mut();
        let Some(first) = layers.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x, training, rng)?;
        for layer in layers {
            h = layer.forward(&h, training, rng)?;
        }
        Ok(h)
    }

    /// Backpropagates `dlogits` down to the lowest layer with updatable parameters.
    /// Layers below it are skipped since nothing there consumes gradients.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<()> {
        let Some(stop) = self.layers.iter().position(|l| l.updates_params()) else {
            return Ok(());
        };
        let mut grad = dlogits.clone();
        for i in (stop..self.layers.len()).rev() {
            match self.layers[i].backward_with(&grad, i > stop)? {
                Some(dx) => grad = dx,
                None => break,
            }
        }
        Ok(())
    }

    /// Full backward pass including the input gradient.
    pub fn backward_to_input(&mut self, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut grad = dlogits.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(grad)
    }

    pub fn loss(&self, logits: &Tensor<T>, labels: &[usize]) -> Result<XentOutput<T>> {
        softmax_xent(logits, labels)
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            input: self.input,
            layers: self.layers.iter().map(Layer::cast).collect(),
            spec: self.spec.clone(),
        }
    }
}
