//! Parameter-free layers: ReLU, Flatten and inverted Dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Default)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.active = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        crate::tensor::max0(x)
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let active = self
            .active
            .as_ref()
            .ok_or_else(|| Error::State("relu backward called before forward".into()))?;
        if active.len() != dy.len() {
            return Err(Error::Shape(format!("relu backward: dy {:?}", dy.shape())));
        }
        let mut dx = dy.clone();
        for (d, &on) in dx.data_mut().iter_mut().zip(active) {
            if !on {
                *d = T::zero();
            }
        }
        Ok(dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.active = None;
    }
}

/// NHWC (or any rank) to `[n, rest]`.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_shape(input: &[usize]) -> Vec<usize> {
        vec![input[0], input[1..].iter().product()]
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input_shape = Some(x.shape().to_vec());
        x.clone().reshape(Self::output_shape(x.shape()))
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| Error::State("flatten backward called before forward".into()))?;
        dy.clone().reshape(shape.clone())
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input_shape = None;
    }
}

#[derive(Clone, Debug)]
enum DropoutCache<T> {
    Identity,
    Mask(Vec<T>),
}

/// Inverted dropout: at training time each element survives with probability
/// `1 - rate` and is scaled by `1 / (1 - rate)`; inference is the identity.
#[derive(Clone, Debug)]
pub struct Dropout<T = f32> {
    rate: f32,
    cache: Option<DropoutCache<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(Self { rate, cache: None })
    }

    pub fn rate(&self) -> f32 {
        self.rate
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, training: bool, rng: &mut R) -> Tensor<T> {
        if !training || self.rate == 0.0 {
            self.cache = Some(DropoutCache::Identity);
            return x.clone();
        }
        let keep = 1.0 - f64::from(self.rate);
        let scale = T::of(1.0 / keep);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.gen_bool(keep) { scale } else { T::zero() })
            .collect();
        let mut y = x.clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v = *v * *m;
        }
        self.cache = Some(DropoutCache::Mask(mask));
        y
    }

    pub fn backward(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.cache {
            None => Err(Error::State("dropout backward called before forward".into())),
            Some(DropoutCache::Identity) => Ok(dy.clone()),
            Some(DropoutCache::Mask(mask)) => {
                if mask.len() != dy.len() {
                    return Err(Error::Shape(format!("dropout backward: dy {:?}", dy.shape())));
                }
                let mut dx = dy.clone();
                for (v, m) in dx.data_mut().iter_mut().zip(mask) {
                    *v = *v * *m;
                }
                Ok(dx)
            }
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub(crate) fn cast<U: Scalar>(&self) -> Dropout<U> {
        Dropout {
            rate: self.rate,
            cache: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn relu_routes_positive_only() {
        let mut r = Relu::new();
        let x = Tensor::<f32>::new([4], vec![-1., 0., 2., 3.]).unwrap();
        assert_eq!(r.forward(&x).data(), &[0., 0., 2., 3.]);
        let dx = r.backward(&Tensor::filled([4], 1.0).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0., 0., 1., 1.]);
    }

    #[test]
    fn flatten_round_trip() {
        let mut f = Flatten::new();
        let x = Tensor::<f32>::zeros([2, 3, 3, 4]).unwrap();
        let y = f.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 36]);
        assert_eq!(f.backward(&y).unwrap().shape(), x.shape());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dropout::<f32>::new(0.0).unwrap();
        let x = Tensor::new([3], vec![1., -2., 3.]).unwrap();
        assert_eq!(d.forward(&x, true, &mut rng), x);
        assert_eq!(d.forward(&x, false, &mut rng), x);
    }

    #[test]
    fn dropout_inference_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dropout::<f32>::new(0.5).unwrap();
        let x = Tensor::new([3], vec![1., -2., 3.]).unwrap();
        assert_eq!(d.forward(&x, false, &mut rng), x);
        assert_eq!(d.backward(&x).unwrap(), x);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut d = Dropout::<f32>::new(0.25).unwrap();
        let x = Tensor::filled([1_000_000], 1.0).unwrap();
        let y = d.forward(&x, true, &mut rng);
        let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / 1e6;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
        // backward reuses the same mask
        let dx = d.backward(&x).unwrap();
        assert_eq!(dx, y);
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let x = Tensor::<f32>::filled([1000], 1.0).unwrap();
        let run = || {
            let mut d = Dropout::<f32>::new(0.5).unwrap();
            d.forward(&x, true, &mut ChaCha8Rng::seed_from_u64(9))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_rate_validated() {
        assert!(Dropout::<f32>::new(1.0).is_err());
        assert!(Dropout::<f32>::new(-0.1).is_err());
    }
}
