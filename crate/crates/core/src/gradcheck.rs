//! Central finite-difference checks of analytic gradients.
//!
//! Layers are checked on the scalar objective `sum(r * layer(x))` for a fixed
//! random `r`, so the analytic gradients come from `backward(r)`. Stochastic
//! layers see the same reseeded rng on every evaluation.

use rand::Rng;

use crate::error::Result;
use crate::layers::{softmax_xent, Layer};
use crate::model::Model;
use crate::rng::{stream, Domain, StreamRng};
use crate::tensor::{Scalar, Tensor};

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

/// Floor for single-precision checks, where rounding in the forward pass alone
/// perturbs a central difference at `eps = 1e-3` by roughly 1e-4.
pub const REL_FLOOR_F32: f64 = 1e-2;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_with(analytic, numeric, REL_FLOOR)
}

pub fn rel_error_with(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Seeds the random output weighting and any dropout mask.
    pub seed: u64,
    /// Coordinates probed per tensor at most.
    pub max_coords: usize,
    pub floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            seed: 0,
            max_coords: 400,
            floor: REL_FLOOR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Where the largest error occurred, e.g. `input[3]` or `weight[10]`.
    pub worst: String,
    pub checked: usize,
    floor: f64,
}

impl GradReport {
    fn new(floor: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
            floor,
        }
    }

    fn record(&mut self, what: &str, i: usize, analytic: f64, numeric: f64) {
        let e = rel_error_with(analytic, numeric, self.floor);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = format!("{what}[{i}] analytic {analytic:e} numeric {numeric:e}");
        }
    }
}

/// Coordinates to probe: all of them, or an evenly spread subset of `max`.
fn coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

fn noise<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let mut rng = stream(seed, Domain::Synthetic, &[0x6772_6164]);
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect(),
    )
}

fn dropout_rng(seed: u64) -> StreamRng {
    stream(seed, Domain::Dropout, &[0x6763])
}

fn objective<T: Scalar>(layer: &mut Layer<T>, x: &Tensor<T>, r: &Tensor<T>, seed: u64) -> Result<f64> {
    let y = layer.forward(x, true, &mut dropout_rng(seed))?;
    Ok(y
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
        .sum())
}

/// Checks input and parameter gradients of `layer` at `x`.
pub fn check_layer<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>, opts: &CheckOptions) -> Result<GradReport> {
    let CheckOptions { eps, seed, max_coords, .. } = *opts;
    let mut layer = layer.clone();
    layer.trainable = true;
    let r = noise::<T>(&layer.output_shape(x.shape())?, seed)?;
    layer.forward(x, true, &mut dropout_rng(seed))?;
    let dx = layer.backward(&r)?;
    let param_grads: Vec<Tensor<T>> = layer.params().iter().map(|p| p.grad.clone()).collect();

    let mut report = GradReport::new(opts.floor);
    let mut probe = x.clone();
    for i in coords(x.len(), max_coords) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(eps);
        let plus = objective(&mut layer, &probe, &r, seed)?;
        probe.data_mut()[i] = orig - T::of(eps);
        let minus = objective(&mut layer, &probe, &r, seed)?;
        probe.data_mut()[i] = orig;
        report.record("input", i, dx.data()[i].to_f64().unwrap(), (plus - minus) / (2.0 * eps));
    }
    for (p, grad) in param_grads.iter().enumerate() {
        let name = layer.params()[p].name;
        for i in coords(grad.len(), max_coords) {
            let orig = layer.params()[p].value.data()[i];
            layer.params_mut()[p].value.data_mut()[i] = orig + T::of(eps);
            let plus = objective(&mut layer, x, &r, seed)?;
            layer.params_mut()[p].value.data_mut()[i] = orig - T::of(eps);
            let minus = objective(&mut layer, x, &r, seed)?;
            layer.params_mut()[p].value.data_mut()[i] = orig;
            report.record(name, i, grad.data()[i].to_f64().unwrap(), (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Checks the fused softmax cross-entropy gradient with respect to the logits.
pub fn check_softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize], opts: &CheckOptions) -> Result<GradReport> {
    let eps = opts.eps;
    let analytic = softmax_xent(logits, labels)?.dlogits;
    let mut report = GradReport::new(opts.floor);
    let mut probe = logits.clone();
    for i in 0..logits.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(eps);
        let plus = softmax_xent(&probe, labels)?.loss;
        probe.data_mut()[i] = orig - T::of(eps);
        let minus = softmax_xent(&probe, labels)?.loss;
        probe.data_mut()[i] = orig;
        report.record("logits", i, analytic.data()[i].to_f64().unwrap(), (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

/// End-to-end check of a whole model's input gradient under its cross-entropy loss.
pub fn check_model_input<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    opts: &CheckOptions,
) -> Result<GradReport> {
    let CheckOptions { eps, seed, max_coords, .. } = *opts;
    let mut model = model.clone();
    let loss_at = |m: &mut Model<T>, x: &Tensor<T>| -> Result<f64> {
        let logits = m.forward(x, true, &mut dropout_rng(seed))?;
        Ok(softmax_xent(&logits, labels)?.loss)
    };
    let logits = model.forward(x, true, &mut dropout_rng(seed))?;
    let dx = model.backward_to_input(&softmax_xent(&logits, labels)?.dlogits)?;
    let mut report = GradReport::new(opts.floor);
    let mut probe = x.clone();
    for i in coords(x.len(), max_coords) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(eps);
        let plus = loss_at(&mut model, &probe)?;
        probe.data_mut()[i] = orig - T::of(eps);
        let minus = loss_at(&mut model, &probe)?;
        probe.data_mut()[i] = orig;
        report.record("input", i, dx.data()[i].to_f64().unwrap(), (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}
