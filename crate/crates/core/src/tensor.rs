//! Dense rank-4 tensors in NCHW layout.
//!
//! Every feature map, image batch, weight tensor and gradient in the crate is a
//! [`Tensor4`]. Elements are stored contiguously with the width axis fastest.
//! All operations here are pure: they borrow their inputs and return new values.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks use `f64`.
pub trait Scalar: Float + Default + Debug + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + 'static {
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row-major views.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are `(row, col)`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn check_gemm_bounds<T>(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm view {rows}x{cols} with strides {strides:?} exceeds buffer of {len} {}",
        std::any::type_name::<T>()
    );
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_gemm_bounds::<$t>(a.len(), m, k, a_strides);
                check_gemm_bounds::<$t>(b.len(), k, n, b_strides);
                check_gemm_bounds::<$t>(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked against its slice above and
                // `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, Precision::Single, matrixmultiply::sgemm);
impl_scalar!(f64, Precision::Double, matrixmultiply::dgemm);

/// Arithmetic precision of a computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// 32-bit floats; the training default.
    Single,
    /// 64-bit floats; used by the finite-difference gradient checks.
    Double,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::invalid(format!("unknown precision '{other}'"))),
        }
    }
}

/// Shape of a [`Tensor4`]: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(s: [usize; 4]) -> Self {
        Shape4::new(s[0], s[1], s[2], s[3])
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Elementwise binary operator for [`Tensor4::zip`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZipOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape4>) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn filled(shape: impl Into<Shape4>, value: T) -> Self {
        let shape = shape.into();
        Tensor4 { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot hold a {shape} tensor ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.shape.n && c < self.shape.c && y < self.shape.h && x < self.shape.w);
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// Contiguous `c x h x w` block of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Contiguous `h x w` plane of channel `c` in batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zip(&self, other: &Self, op: ZipOp) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise {op:?} needs equal shapes, got {} and {}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                ZipOp::Add => a + b,
                ZipOp::Sub => a - b,
                ZipOp::Mul => a * b,
            })
            .collect();
        Ok(Tensor4 { shape: self.shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, ZipOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, ZipOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, ZipOp::Mul)
    }

    /// In-place `self += other`. Used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("cannot accumulate {} into {}", other.shape, self.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum of all elements in ascending flat-index order, accumulated in `f64`.
    pub fn reduce_sum(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, &v| acc + v.to_f64())
    }

    /// Shift every spatial plane by `(dy, dx)` pixels, filling vacated pixels with zero.
    pub fn shift2d(&self, dy: isize, dx: isize) -> Result<Self> {
        let Shape4 { h, w, .. } = self.shape;
        if dy.unsigned_abs() >= h.max(1) || dx.unsigned_abs() >= w.max(1) {
            return Err(Error::invalid(format!("shift ({dy}, {dx}) must be smaller than the {h}x{w} plane")));
        }
        let mut out = Tensor4::zeros(self.shape);
        let (h, w) = (h as isize, w as isize);
        let x_lo = dx.max(0);
        let x_hi = (w + dx).min(w);
        for n in 0..self.shape.n {
            for c in 0..self.shape.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in dy.max(0)..(h + dy).min(h) {
                    let sy = y - dy;
                    let d = (y * w) as usize;
                    let s = (sy * w) as usize;
                    dst[d + x_lo as usize..d + x_hi as usize]
                        .copy_from_slice(&src[s + (x_lo - dx) as usize..s + (x_hi - dx) as usize]);
                }
            }
        }
        Ok(out)
    }

    /// Rotate every spatial plane counter-clockwise by `quarter_turns * 90` degrees.
    pub fn rotate90(&self, quarter_turns: u32) -> Result<Self> {
        let Shape4 { h, w, .. } = self.shape;
        if h != w {
            return Err(Error::shape(format!("rotation needs a square plane, got {h}x{w}")));
        }
        let turns = quarter_turns % 4;
        if turns == 0 {
            return Ok(self.clone());
        }
        let s = h;
        let mut out = Tensor4::zeros(self.shape);
        for n in 0..self.shape.n {
            for c in 0..self.shape.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s {
                    for x in 0..s {
                        // Destination of source pixel (y, x) under a CCW rotation.
                        let (ty, tx) = match turns {
                            1 => (s - 1 - x, y),
                            2 => (s - 1 - y, s - 1 - x),
                            _ => (x, s - 1 - y),
                        };
                        dst[ty * s + tx] = src[y * s + x];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn pad_zero(&self, p: usize) -> Self {
        if p == 0 {
            return self.clone();
        }
        let Shape4 { n, c, h, w } = self.shape;
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut out = Tensor4::zeros(Shape4::new(n, c, ph, pw));
        for ni in 0..n {
            for ci in 0..c {
                let src = self.plane(ni, ci);
                let dst = out.plane_mut(ni, ci);
                for y in 0..h {
                    dst[(y + p) * pw + p..(y + p) * pw + p + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
        out
    }

    /// Stack single-item tensors along the batch axis.
    pub fn stack(items: &[&Tensor4<T>]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::invalid("cannot stack an empty list"));
        };
        let item_shape = first.shape;
        let mut data = Vec::with_capacity(item_shape.len() * items.len());
        for t in items {
            if (Shape4 { n: item_shape.n, ..t.shape }) != item_shape {
                return Err(Error::shape(format!("cannot stack {} with {}", t.shape, item_shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape.n).sum();
        Ok(Tensor4 { shape: Shape4 { n, ..item_shape }, data })
    }

    /// Copy of batch item `n` as a one-item tensor.
    pub fn slice_item(&self, n: usize) -> Self {
        Tensor4 { shape: Shape4 { n: 1, ..self.shape }, data: self.item(n).to_vec() }
    }
}
