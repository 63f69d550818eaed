use rand::Rng;

use super::{kaiming_uniform, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Fully connected layer, `y = x·W + b` with `W` stored `(inputs, units)`.
#[derive(Clone, Debug)]
pub struct Dense<T = f32> {
    pub inputs: usize,
    pub units: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(inputs: usize, units: usize) -> Result<Self> {
        if inputs == 0 || units == 0 {
            return Err(Error::Param(format!(
                "dense layer needs positive sizes, got {inputs}->{units}"
            )));
        }
        Ok(Self {
            inputs,
            units,
            weight: Param::zeros("weight", &[inputs, units]),
            bias: Param::zeros("bias", &[units]),
            input: None,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        kaiming_uniform(&mut self.weight.value, self.inputs, rng);
        self.bias.value.data_mut().fill(T::zero());
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, k] if k == self.inputs => Ok(vec![n, self.units]),
            _ => Err(Error::Shape(format!(
                "dense layer expects [n, {}], got {input:?}",
                self.inputs
            ))),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.output_shape(x.shape())?;
        let n = shape[0];
        let mut out = Vec::with_capacity(n * self.units);
        for _ in 0..n {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            MatRef::new(x.data(), n, self.inputs),
            MatRef::new(self.weight.value.data(), self.inputs, self.units),
            T::one(),
            &mut out,
        );
        self.input = Some(x.clone());
        Tensor::new(shape, out)
    }

    pub fn backward(
        &mut self,
        dy: &Tensor<T>,
        param_grads: bool,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        let n = x.shape()[0];
        if dy.shape() != [n, self.units] {
            return Err(Error::Shape(format!(
                "dense backward: dy {:?}, expected [{n}, {}]",
                dy.shape(),
                self.units
            )));
        }
        if param_grads {
            gemm(
                MatRef::t(x.data(), n, self.inputs),
                MatRef::new(dy.data(), n, self.units),
                T::zero(),
                self.weight.grad.data_mut(),
            );
            let gb = self.bias.grad.data_mut();
            gb.fill(T::zero());
            for row in dy.data().chunks(self.units) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g = *g + *d;
                }
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); n * self.inputs];
        gemm(
            MatRef::new(dy.data(), n, self.units),
            MatRef::t(self.weight.value.data(), self.inputs, self.units),
            T::zero(),
            &mut dx,
        );
        Tensor::new([n, self.inputs], dx).map(Some)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input = None;
    }

    pub(crate) fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense {
            inputs: self.inputs,
            units: self.units,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            input: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let mut d = Dense::<f32>::new(3, 3).unwrap();
        d.weight.value = Tensor::new([3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::new([2, 3], vec![1., -2., 3., 0.5, 0., 9.]).unwrap();
        assert_eq!(d.forward(&x).unwrap(), x);
    }

    #[test]
    fn hand_arithmetic() {
        let mut d = Dense::<f32>::new(2, 1).unwrap();
        d.weight.value = Tensor::new([2, 1], vec![1., 1.]).unwrap();
        d.bias.value = Tensor::new([1], vec![0.5]).unwrap();
        let y = d.forward(&Tensor::new([1, 2], vec![1., 2.]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.5]);

        let dx = d
            .backward(&Tensor::new([1, 1], vec![2.]).unwrap(), true, true)
            .unwrap()
            .unwrap();
        assert_eq!(dx.data(), &[2., 2.]);
        assert_eq!(d.weight.grad.data(), &[2., 4.]);
        assert_eq!(d.bias.grad.data(), &[2.]);
    }

    #[test]
    fn input_mismatch() {
        let mut d = Dense::<f32>::new(4, 2).unwrap();
        assert!(d.forward(&Tensor::zeros([1, 3]).unwrap()).is_err());
        assert!(d.forward(&Tensor::zeros([1, 2, 2, 1]).unwrap()).is_err());
    }
}
