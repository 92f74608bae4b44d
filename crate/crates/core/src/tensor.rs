//! Rank-4 dense tensors in NCHW layout.

use std::fmt;

use crate::error::{Error, Result};

/// Floating point element type supported by the kernels.
///
/// Training and gradient checks run in `f64`; inference also accepts `f32`.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn is_finite(self) -> bool;
    /// `self * a + b`, fused when the target supports it.
    fn mul_add(self, a: Self, b: Self) -> Self;

    /// `c = alpha * a * b + beta * c` for row-major matrices with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
    unsafe fn gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Tensor dimensions: (batch, channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of pixels in one plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Shape4::new(d[0], d[1], d[2], d[3])
    }
}

/// Dense row-major NCHW tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T = f64> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4<{}>{}", T::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor4<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Length is still checked.
    pub(crate) fn from_vec_unchecked(shape: Shape4, data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.len(), "tensor length for {shape}");
        Tensor4 { shape, data }
    }

    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![T::ZERO; shape.len()],
        }
    }

    pub fn full(shape: impl Into<Shape4>, v: T) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![v; shape.len()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor4 {
            shape: Shape4::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// Contiguous slice of one (batch, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let off = (n * self.shape.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what} element {i}"))),
            None => Ok(()),
        }
    }

    pub fn reshape(self, shape: impl Into<Shape4>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {shape}", self.shape),
            ));
        }
        Ok(Tensor4 {
            shape,
            data: self.data,
        })
    }

    /// Channel range `[start, start + count)` as a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape;
        if start + count > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) out of {} channels", start + count, s.c),
            ));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * count * p);
        for n in 0..s.n {
            let off = (n * s.c + start) * p;
            data.extend_from_slice(&self.data[off..off + count * p]);
        }
        Ok(Tensor4 {
            shape: Shape4::new(s.n, count, s.h, s.w),
            data,
        })
    }

    /// Selects batch items `[start, start + count)`.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape;
        if start + count > s.n {
            return Err(Error::shape(
                "slice_batch",
                format!("[{start}, {}) out of batch {}", start + count, s.n),
            ));
        }
        let item = s.c * s.plane();
        Ok(Tensor4 {
            shape: Shape4::new(count, s.c, s.h, s.w),
            data: self.data[start * item..(start + count) * item].to_vec(),
        })
    }

    pub fn sum(&self) -> T {
        let mut acc = T::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::ZERO;
        for &v in &self.data {
            let a = if v < T::ZERO { -v } else { v };
            if a > m {
                m = a;
            }
        }
        m
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Stacks single-item tensors along the batch axis.
pub fn stack_batch<T: Scalar>(items: &[Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("stack_batch of zero tensors".into()))?
        .shape();
    let mut data = Vec::with_capacity(first.len() * items.len());
    let mut n = 0;
    for t in items {
        let s = t.shape();
        if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
            return Err(Error::shape("stack_batch", format!("{s} vs {first}")));
        }
        n += s.n;
        data.extend_from_slice(t.data());
    }
    Ok(Tensor4::from_vec_unchecked(
        Shape4::new(n, first.c, first.h, first.w),
        data,
    ))
}
