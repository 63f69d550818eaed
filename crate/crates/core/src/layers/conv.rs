use rand::Rng;
use rayon::prelude::*;

use super::{kaiming_uniform, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, PatchGeometry, Scalar, Tensor};

/// Stride-1 "same"-padded 2-D convolution.
///
/// The weight is stored `(kh, kw, cin, cout)`, which read row-major is exactly the
/// `(kh·kw·cin) x cout` matrix that multiplies an im2col patch row.
#[derive(Clone, Debug)]
pub struct Conv2d<T = f32> {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Zero-initialized layer. `kernel` must be odd so "same" padding is symmetric.
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if kernel % 2 == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::Param(format!(
                "conv needs an odd kernel and positive channels, got k={kernel} {in_channels}->{out_channels}"
            )));
        }
        Ok(Self {
            kernel,
            in_channels,
            out_channels,
            weight: Param::zeros("weight", &[kernel, kernel, in_channels, out_channels]),
            bias: Param::zeros("bias", &[out_channels]),
            input: None,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.kernel * self.kernel * self.in_channels;
        kaiming_uniform(&mut self.weight.value, fan_in, rng);
        self.bias.value.data_mut().fill(T::zero());
    }

    fn geometry(&self, h: usize, w: usize) -> Result<PatchGeometry> {
        PatchGeometry::new(
            h,
            w,
            self.in_channels,
            self.kernel,
            self.kernel,
            1,
            self.kernel / 2,
        )
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, h, w, c] if c == self.in_channels => Ok(vec![n, h, w, self.out_channels]),
            _ => Err(Error::Shape(format!(
                "conv expects NHWC input with {} channels, got {input:?}",
                self.in_channels
            ))),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        let s = x.dims4()?;
        let geo = self.geometry(s.h, s.w)?;
        let (rows, plen, cout) = (geo.rows(), geo.patch_len(), self.out_channels);
        let weight = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut out = vec![T::zero(); s.n * rows * cout];
        out.par_chunks_mut(rows * cout)
            .zip(x.data().par_chunks(s.pixels()))
            .for_each_init(
                || vec![T::zero(); rows * plen],
                |cols, (dst, src)| {
                    geo.im2col_sample(src, cols);
                    gemm(
                        MatRef::new(cols, rows, plen),
                        MatRef::new(weight, plen, cout),
                        T::zero(),
                        dst,
                    );
                    for px in dst.chunks_mut(cout) {
                        for (v, b) in px.iter_mut().zip(bias) {
                            *v = *v + *b;
                        }
                    }
                },
            );
        self.input = Some(x.clone());
        Tensor::new(out_shape, out)
    }

    /// Fills weight/bias grads when `param_grads`; returns dx when `need_dx`.
    pub fn backward(
        &mut self,
        dy: &Tensor<T>,
        param_grads: bool,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::State("conv2d backward called before forward".into()))?;
        let expected = self.output_shape(x.shape())?;
        if dy.shape() != expected {
            return Err(Error::Shape(format!(
                "conv2d backward: dy {:?}, expected {expected:?}",
                dy.shape()
            )));
        }
        let s = x.dims4()?;
        let geo = self.geometry(s.h, s.w)?;
        let (rows, plen, cout) = (geo.rows(), geo.patch_len(), self.out_channels);
        let weight = self.weight.value.data();

        // Per-sample partial weight grads, reduced below in sample order.
        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..s.n)
            .into_par_iter()
            .map(|i| {
                let src = x.sample(i);
                let dyn_ = dy.sample(i);
                let mut dw = None;
                if param_grads {
                    let mut cols = vec![T::zero(); rows * plen];
                    geo.im2col_sample(src, &mut cols);
                    let mut g = vec![T::zero(); plen * cout];
                    gemm(
                        MatRef::t(&cols, rows, plen),
                        MatRef::new(dyn_, rows, cout),
                        T::zero(),
                        &mut g,
                    );
                    dw = Some(g);
                }
                let mut dx = None;
                if need_dx {
                    let mut dcols = vec![T::zero(); rows * plen];
                    gemm(
                        MatRef::new(dyn_, rows, cout),
                        MatRef::t(weight, plen, cout),
                        T::zero(),
                        &mut dcols,
                    );
                    let mut d = vec![T::zero(); s.pixels()];
                    geo.col2im_sample(&dcols, &mut d);
                    dx = Some(d);
                }
                (dw, dx)
            })
            .collect();

        let mut dx_all = need_dx.then(|| Vec::with_capacity(s.n * s.pixels()));
        if param_grads {
            let gw = self.weight.grad.data_mut();
            gw.fill(T::zero());
            let gb = self.bias.grad.data_mut();
            gb.fill(T::zero());
            for px in dy.data().chunks(cout) {
                for (g, d) in gb.iter_mut().zip(px) {
                    *g = *g + *d;
                }
            }
        }
        for (dw, dx) in per_sample {
            if let Some(dw) = dw {
                for (g, d) in self.weight.grad.data_mut().iter_mut().zip(dw) {
                    *g = *g + d;
                }
            }
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend(dx);
            }
        }
        dx_all.map(|d| Tensor::new(s.dims(), d)).transpose()
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input = None;
    }

    pub(crate) fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            kernel: self.kernel,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            input: None,
        }
    }
}
