//! First-order update rules: SGD, Adagrad, RMSprop, Adam, Adamax and Nadam.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Rmsprop,
    Adam,
    Adamax,
    Nadam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::Adagrad,
        OptimizerKind::Adam,
        OptimizerKind::Adamax,
        OptimizerKind::Nadam,
        OptimizerKind::Rmsprop,
        OptimizerKind::Sgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adamax => "adamax",
            OptimizerKind::Nadam => "nadam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Param(format!(
                    "unknown optimizer {s:?}; expected one of adagrad, adam, adamax, nadam, rmsprop, sgd"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSprop decay.
    pub rho: f64,
    pub epsilon: f64,
    /// SGD momentum; 0 gives the plain rule.
    pub momentum: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            epsilon: 1e-8,
            momentum: 0.0,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(unit(self.beta1) && unit(self.beta2) && unit(self.rho) && unit(self.momentum)) {
            return Err(Error::Param("beta1, beta2, rho and momentum must be in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Param("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter accumulators; which ones are used depends on the rule.
#[derive(Clone, Debug)]
struct Slots<T> {
    first: Option<Tensor<T>>,
    second: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T = f32> {
    config: OptimizerConfig,
    slots: BTreeMap<(usize, usize), Slots<T>>,
    step_count: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            slots: BTreeMap::new(),
            step_count: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Accumulators for parameter `param` of layer `layer`: first moment (or
    /// velocity), second moment (or squared-gradient sum / infinity norm).
    pub fn slot(&self, layer: usize, param: usize) -> Option<(Option<&Tensor<T>>, Option<&Tensor<T>>)> {
        self.slots
            .get(&(layer, param))
            .map(|s| (s.first.as_ref(), s.second.as_ref()))
    }

    /// Number of parameters that have acquired slots.
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Zeroes every accumulator and the step counter.
    pub fn reset(&mut self) {
        for s in self.slots.values_mut() {
            for t in [&mut s.first, &mut s.second].into_iter().flatten() {
                t.data_mut().fill(T::zero());
            }
        }
        self.step_count = 0;
    }

    /// Updates every trainable parameter in place from the gradients of the last backward pass.
    pub fn apply_step(&mut self, model: &mut Model<T>) -> Result<()> {
        if let Some(l) = model
            .layers
            .iter()
            .find(|l| l.updates_params() && !l.grads_ready())
        {
            return Err(Error::State(format!(
                "no gradients for trainable layer {:?}; run backward first",
                l.name
            )));
        }
        self.step_count += 1;
        let coeffs = Coefficients::new(&self.config, self.step_count);
        for (li, layer) in model.layers.iter_mut().enumerate() {
            if !layer.updates_params() {
                continue;
            }
            for (pi, p) in layer.params_mut().into_iter().enumerate() {
                let slots = self
                    .slots
                    .entry((li, pi))
                    .or_insert_with(|| new_slots(&self.config, &p.value));
                update(&coeffs, self.config.kind, slots, p.value.data_mut(), p.grad.data());
            }
            layer.set_grads_ready(false);
        }
        Ok(())
    }
}

fn new_slots<T: Scalar>(config: &OptimizerConfig, like: &Tensor<T>) -> Slots<T> {
    use OptimizerKind::*;
    let z = || Some(like.zeros_like());
    match config.kind {
        Sgd if config.momentum > 0.0 => Slots { first: z(), second: None },
        Sgd => Slots { first: None, second: None },
        Adagrad | Rmsprop => Slots { first: None, second: z() },
        Adam | Adamax | Nadam => Slots { first: z(), second: z() },
    }
}

/// Step-dependent scalars, computed once per step in 64-bit then narrowed.
struct Coefficients<T> {
    lr: T,
    b1: T,
    one_m_b1: T,
    b2: T,
    one_m_b2: T,
    rho: T,
    one_m_rho: T,
    eps: T,
    momentum: T,
    /// 1 / (1 - beta1^t)
    bc1: T,
    /// 1 / (1 - beta2^t)
    bc2: T,
}

impl<T: Scalar> Coefficients<T> {
    fn new(c: &OptimizerConfig, t: u64) -> Self {
        let t = t as i32;
        Self {
            lr: T::of(c.lr),
            b1: T::of(c.beta1),
            one_m_b1: T::of(1.0 - c.beta1),
            b2: T::of(c.beta2),
            one_m_b2: T::of(1.0 - c.beta2),
            rho: T::of(c.rho),
            one_m_rho: T::of(1.0 - c.rho),
            eps: T::of(c.epsilon),
            momentum: T::of(c.momentum),
            bc1: T::of(1.0 / (1.0 - c.beta1.powi(t))),
            bc2: T::of(1.0 / (1.0 - c.beta2.powi(t))),
        }
    }
}

fn update<T: Scalar>(k: &Coefficients<T>, kind: OptimizerKind, s: &mut Slots<T>, theta: &mut [T], grad: &[T]) {
    use OptimizerKind::*;
    match kind {
        Sgd => match s.first.as_mut() {
            None => {
                for (p, &g) in theta.iter_mut().zip(grad) {
                    *p = *p - k.lr * g;
                }
            }
            Some(vel) => {
                for ((p, &g), v) in theta.iter_mut().zip(grad).zip(vel.data_mut()) {
                    *v = k.momentum * *v - k.lr * g;
                    *p = *p + *v;
                }
            }
        },
        Adagrad | Rmsprop => {
            let acc = s.second.as_mut().expect("squared-gradient slot").data_mut();
            for ((p, &g), a) in theta.iter_mut().zip(grad).zip(acc) {
                *a = if kind == Adagrad {
                    *a + g * g
                } else {
                    k.rho * *a + k.one_m_rho * g * g
                };
                *p = *p - k.lr * g / (a.sqrt() + k.eps);
            }
        }
        Adam | Adamax | Nadam => {
            let m = s.first.as_mut().expect("first-moment slot").data_mut();
            let v = s.second.as_mut().expect("second-moment slot").data_mut();
            for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(m).zip(v) {
                *m = k.b1 * *m + k.one_m_b1 * g;
                let m_hat = *m * k.bc1;
                let step = match kind {
                    Adam => {
                        *v = k.b2 * *v + k.one_m_b2 * g * g;
                        m_hat / ((*v * k.bc2).sqrt() + k.eps)
                    }
                    Adamax => {
                        *v = (k.b2 * *v).max(g.abs());
                        m_hat / (*v + k.eps)
                    }
                    _ => {
                        *v = k.b2 * *v + k.one_m_b2 * g * g;
                        let nesterov = k.b1 * m_hat + k.one_m_b1 * g * k.bc1;
                        nesterov / ((*v * k.bc2).sqrt() + k.eps)
                    }
                };
                *p = *p - k.lr * step;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Dense, Layer, LayerOp};
    use crate::tensor::Shape4;

    /// One dense 1->1 layer whose weight plays the role of a scalar parameter.
    fn scalar_model<T: Scalar>(theta: f64) -> Model<T> {
        let mut d = Dense::<T>::new(1, 1).unwrap();
        d.weight.value.data_mut()[0] = T::of(theta);
        Model::from_layers(
            Shape4::new(1, 1, 1, 1).unwrap(),
            vec![Layer::new("w", LayerOp::Dense(d))],
        )
    }

    fn set_grad<T: Scalar>(m: &mut Model<T>, g: f64) {
        let layer = &mut m.layers[0];
        layer.params_mut()[0].grad.data_mut()[0] = T::of(g);
        layer.set_grads_ready(true);
    }

    fn theta<T: Scalar>(m: &Model<T>) -> T {
        m.layers[0].params()[0].value.data()[0]
    }

    #[test]
    fn sgd_one_step() {
        let mut m = scalar_model::<f64>(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Sgd).with_lr(0.1)).unwrap();
        set_grad(&mut m, 2.0);
        opt.apply_step(&mut m).unwrap();
        assert!((theta(&m) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut m = scalar_model::<f64>(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam)).unwrap();
        set_grad(&mut m, 0.5);
        opt.apply_step(&mut m).unwrap();
        let shift = theta(&m) - 1.0;
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((shift - expected).abs() < 1e-15, "{shift}");
        assert!((shift + 0.001).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_sgd_and_adagrad() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adagrad] {
            let mut m = scalar_model::<f32>(0.7);
            let mut opt = Optimizer::new(OptimizerConfig::new(kind)).unwrap();
            for _ in 0..3 {
                set_grad(&mut m, 0.0);
                opt.apply_step(&mut m).unwrap();
            }
            assert_eq!(theta(&m), 0.7, "{kind}");
        }
    }

    #[test]
    fn missing_grads_is_state_error() {
        let mut m = scalar_model::<f32>(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam)).unwrap();
        assert!(matches!(opt.apply_step(&mut m), Err(Error::State(_))));
        set_grad(&mut m, 1.0);
        opt.apply_step(&mut m).unwrap();
        // gradients are consumed by the step
        assert!(matches!(opt.apply_step(&mut m), Err(Error::State(_))));
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn reset_reproduces_first_step() {
        for kind in OptimizerKind::ALL {
            let mut fresh_model = scalar_model::<f32>(0.3);
            let mut fresh = Optimizer::new(OptimizerConfig::new(kind)).unwrap();
            set_grad(&mut fresh_model, 0.25);
            fresh.apply_step(&mut fresh_model).unwrap();

            let mut m = scalar_model::<f32>(0.3);
            let mut opt = Optimizer::new(OptimizerConfig::new(kind)).unwrap();
            for g in [1.0, -2.0, 0.5] {
                set_grad(&mut m, g);
                opt.apply_step(&mut m).unwrap();
            }
            opt.reset();
            opt.reset();
            assert_eq!(opt.step_count(), 0);
            m.layers[0].params_mut()[0].value.data_mut()[0] = 0.3;
            set_grad(&mut m, 0.25);
            opt.apply_step(&mut m).unwrap();
            assert_eq!(theta(&m).to_bits(), theta(&fresh_model).to_bits(), "{kind}");
        }
    }

    #[test]
    fn reset_zeroes_adagrad_accumulator() {
        let mut m = scalar_model::<f32>(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adagrad)).unwrap();
        set_grad(&mut m, 3.0);
        opt.apply_step(&mut m).unwrap();
        opt.reset();
        let (_, acc) = opt.slot(0, 0).unwrap();
        assert_eq!(acc.unwrap().data().iter().sum::<f32>(), 0.0);
    }

    #[test]
    fn frozen_layers_get_no_slots() {
        let mut m = scalar_model::<f32>(1.0);
        m.layers[0].trainable = false;
        let before = m.layers[0].params()[0].value.clone();
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam)).unwrap();
        m.layers[0].params_mut()[0].grad.data_mut()[0] = 5.0;
        opt.apply_step(&mut m).unwrap();
        assert_eq!(opt.slot_count(), 0);
        assert_eq!(m.layers[0].params()[0].value, before);
    }

    #[test]
    fn names_parse() {
        for k in OptimizerKind::ALL {
            assert_eq!(k.name().parse::<OptimizerKind>().unwrap(), k);
        }
        assert!("momentum".parse::<OptimizerKind>().is_err());
    }
}
