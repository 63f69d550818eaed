use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 2x2 / stride-2 max pooling. Odd trailing rows and columns are dropped.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    // flat input index of each output's maximum
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

pub const POOL: usize = 2;

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, h, w, c] if h >= POOL && w >= POOL => Ok(vec![n, h / POOL, w / POOL, c]),
            _ => Err(Error::Shape(format!(
                "max pooling needs NHWC input with h, w >= {POOL}, got {input:?}"
            ))),
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        let s = x.dims4()?;
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let src = x.data();
        let mut out = Vec::with_capacity(s.n * oh * ow * s.c);
        let mut arg = Vec::with_capacity(out.capacity());
        for n in 0..s.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for c in 0..s.c {
                        let mut best_i = usize::MAX;
                        let mut best = T::neg_infinity();
                        for dy in 0..POOL {
                            for dx in 0..POOL {
                                let i = ((n * s.h + oy * POOL + dy) * s.w + ox * POOL + dx) * s.c + c;
                                // strict comparison keeps the first maximum in scan order
                                if best_i == usize::MAX || src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_i);
                    }
                }
            }
        }
        self.argmax = Some((arg, x.shape().to_vec()));
        Tensor::new(out_shape, out)
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, in_shape) = self
            .argmax
            .as_ref()
            .ok_or_else(|| Error::State("max pool backward called before forward".into()))?;
        if dy.len() != arg.len() {
            return Err(Error::Shape(format!(
                "max pool backward: dy {:?} does not match forward output",
                dy.shape()
            )));
        }
        let mut dx = Tensor::zeros(in_shape.clone())?;
        let d = dx.data_mut();
        for (&i, &g) in arg.iter().zip(dy.data()) {
            d[i] = d[i] + g;
        }
        Ok(dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.argmax = None;
    }
}
