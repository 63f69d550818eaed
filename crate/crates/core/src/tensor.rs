//! Dense row-major tensors and the numeric kernels the layers are built from.
//!
//! Images are laid out NHWC. Matrix products go through `matrixmultiply`, which
//! accumulates in the element type (32-bit for `f32` tensors, 64-bit for the
//! `f64` tensors used by gradient checking). Kernels that run in parallel split
//! work by batch sample only, so the reduction order of every output element is
//! fixed regardless of thread count.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]: `f32` in production, `f64` for verification.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` over strided views. Caller guarantees bounds.
    ///
    /// # Safety
    /// Every index reachable through the given dims and strides must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A row-major matrix view over a slice, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of a stored `rows x cols` matrix.
    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b + beta·out` with `out` a dense `a.rows x b.cols` buffer.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert!(out.len() >= a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every index addressed by these dims and strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!(
            "dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    /// Same shape as `self`, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as an NHWC image batch.
    pub fn dims4(&self) -> Result<Shape4> {
        match self.shape[..] {
            [n, h, w, c] => Shape4::new(n, h, w, c),
            _ => Err(Error::shape(format!(
                "expected an NHWC tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Batch slice `i` along the leading axis, as a flat slice.
    pub fn sample(&self, i: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[i * per..(i + 1) * per]
    }
}

/// Batch-height-width-channels dimensions; every field is at least 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(format!(
                "NHWC dims must be >= 1, got {n}x{h}x{w}x{c}"
            )));
        }
        Ok(Self { n, h, w, c })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w * self.c
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || {
        Error::shape(format!(
            "matmul of {:?} and {:?}: inner dimensions differ",
            a.shape, b.shape
        ))
    };
    let (m, k) = a.dims2().map_err(|_| mismatch())?;
    let (k2, n) = b.dims2().map_err(|_| mismatch())?;
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        MatRef::new(&a.data, m, k),
        MatRef::new(&b.data, k, n),
        T::zero(),
        &mut out,
    );
    Tensor::new([m, n], out)
}

/// Output extent of a sliding window; errors when no window fits.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::shape("kernel and stride must be >= 1"));
    }
    let span = input + 2 * pad;
    if span < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

/// Window placement for im2col / col2im over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PatchGeometry {
    pub fn new(
        h: usize,
        w: usize,
        c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let oh = conv_output_size(h, kh, stride, pad)?;
        let ow = conv_output_size(w, kw, stride, pad)?;
        Ok(Self {
            h,
            w,
            c,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn rows(&self) -> usize {
        self.oh * self.ow
    }

    /// Writes one sample's patch matrix (`rows x patch_len`) into `out`.
    pub(crate) fn im2col_sample<T: Scalar>(&self, src: &[T], out: &mut [T]) {
        let (h, w, c) = (self.h as isize, self.w as isize, self.c);
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut out[(oy * self.ow + ox) * plen..][..plen];
                let y0 = (oy * self.stride) as isize - self.pad as isize;
                let x0 = (ox * self.stride) as isize - self.pad as isize;
                for ky in 0..self.kh {
                    let y = y0 + ky as isize;
                    for kx in 0..self.kw {
                        let x = x0 + kx as isize;
                        let dst = &mut row[(ky * self.kw + kx) * c..][..c];
                        if y < 0 || y >= h || x < 0 || x >= w {
                            dst.fill(T::zero());
                        } else {
                            let at = ((y * w + x) as usize) * c;
                            dst.copy_from_slice(&src[at..at + c]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch matrix back into one sample's image buffer.
    pub(crate) fn col2im_sample<T: Scalar>(&self, cols: &[T], dst: &mut [T]) {
        let (h, w, c) = (self.h as isize, self.w as isize, self.c);
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * plen..][..plen];
                let y0 = (oy * self.stride) as isize - self.pad as isize;
                let x0 = (ox * self.stride) as isize - self.pad as isize;
                for ky in 0..self.kh {
                    let y = y0 + ky as isize;
                    if y < 0 || y >= h {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let x = x0 + kx as isize;
                        if x < 0 || x >= w {
                            continue;
                        }
                        let at = ((y * w + x) as usize) * c;
                        let src = &row[(ky * self.kw + kx) * c..][..c];
                        for (d, s) in dst[at..at + c].iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
    }
}

/// Rearranges NHWC receptive fields into rows of a `(n·oh·ow) x (kh·kw·c)` matrix.
pub fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let s = x.dims4()?;
    let geo = PatchGeometry::new(s.h, s.w, s.c, kh, kw, stride, pad)?;
    let per = geo.rows() * geo.patch_len();
    let mut out = vec![T::zero(); s.n * per];
    out.par_chunks_mut(per)
        .zip(x.data.par_chunks(s.pixels()))
        .for_each(|(dst, src)| geo.im2col_sample(src, dst));
    Tensor::new([s.n * geo.rows(), geo.patch_len()], out)
}

/// Inverse scatter of [`im2col`]: sums every patch entry back onto its source pixel.
pub fn col2im<T: Scalar>(cols: &Tensor<T>, input: Shape4, geo: &PatchGeometry) -> Result<Tensor<T>> {
    let (r, k) = cols.dims2()?;
    if r != input.n * geo.rows() || k != geo.patch_len() {
        return Err(Error::shape(format!(
            "col2im: {:?} does not match geometry for {:?}",
            cols.shape, input
        )));
    }
    let per = geo.rows() * geo.patch_len();
    let mut out = vec![T::zero(); input.n * input.pixels()];
    out.par_chunks_mut(input.pixels())
        .zip(cols.data.par_chunks(per))
        .for_each(|(dst, src)| geo.col2im_sample(src, dst));
    Tensor::new(input.dims(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
    Max0,
}

/// Right-hand side of an [`elementwise`] op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
    None,
}

pub fn elementwise<T: Scalar>(op: ElementwiseOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    use ElementwiseOp::*;
    let f: fn(T, T) -> T = match op {
        Add => |x, y| x + y,
        Sub => |x, y| x - y,
        Mul | Scale => |x, y| x * y,
        Max0 => |x, _| if x > T::zero() { x } else { T::zero() },
    };
    let data = match (op, b) {
        (Max0, Operand::None) => a.data.iter().map(|&x| f(x, x)).collect(),
        (Max0, _) => return Err(Error::Param("max0 takes no operand".into())),
        (Scale, Operand::Tensor(_)) | (_, Operand::None) => {
            return Err(Error::Param(format!("{op:?} needs a scalar operand")))
        }
        (Add | Sub | Mul, Operand::Tensor(b)) => {
            if a.shape != b.shape {
                return Err(Error::shape(format!(
                    "{op:?} of {:?} and {:?}",
                    a.shape, b.shape
                )));
            }
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        }
        (_, Operand::Scalar(s)) => a.data.iter().map(|&x| f(x, s)).collect(),
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElementwiseOp::Add, a, Operand::Tensor(b))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElementwiseOp::Sub, a, Operand::Tensor(b))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElementwiseOp::Mul, a, Operand::Tensor(b))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

pub fn max0<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Adds `bias[c]` to every element whose last-axis index is `c`.
pub fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let c = *x.shape.last().expect("non-empty shape");
    if bias.shape != [c] {
        return Err(Error::shape(format!(
            "bias {:?} does not match channel count {c}",
            bias.shape
        )));
    }
    for row in x.data.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v = *v + *b;
        }
    }
    Ok(())
}
