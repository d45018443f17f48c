//! Dense 4-D weight tensors, binary masks and batched feature maps.
//!
//! All storage is row-major. Weights are `(c_out, c_in, k_h, k_w)` and
//! feature maps are `(n, c, h, w)`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl Shape4 {
    pub const fn new(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Self {
        Self {
            c_out,
            c_in,
            k_h,
            k_w,
        }
    }

    pub const fn numel(&self) -> usize {
        self.c_out * self.c_in * self.k_h * self.k_w
    }

    /// Number of kernel positions, `k_h * k_w`.
    pub const fn spatial(&self) -> usize {
        self.k_h * self.k_w
    }

    #[inline]
    pub const fn index(&self, o: usize, i: usize, u: usize, v: usize) -> usize {
        ((o * self.c_in + i) * self.k_h + u) * self.k_w + v
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.k_h, self.k_w]
    }

    pub fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.c_out, self.c_in, self.k_h, self.k_w)
    }
}

fn check_finite<T: Scalar>(data: &[T]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Dense convolution weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                shape: shape.dims(),
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: Shape4, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(normal.sample(rng)))
            .collect();
        Self { shape, data }
    }

    /// Uniform init on `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Self {
        let dist = Uniform::new(lo, hi);
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(dist.sample(rng)))
            .collect();
        Self { shape, data }
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, u: usize, v: usize) -> T {
        self.data[self.shape.index(o, i, u, v)]
    }

    #[inline]
    pub fn set(&mut self, o: usize, i: usize, u: usize, v: usize, value: T) {
        let idx = self.shape.index(o, i, u, v);
        self.data[idx] = value;
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape.dims(),
                right: other.shape.dims(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            shape: self.shape,
            data,
        })
    }
}

/// Binary mask, one byte per weight position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask4 {
    shape: Shape4,
    bits: Vec<u8>,
}

impl Mask4 {
    pub fn ones(shape: Shape4) -> Self {
        Self {
            shape,
            bits: vec![1; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            bits: vec![0; shape.numel()],
        }
    }

    /// Builds a mask from raw bytes; every byte must be 0 or 1.
    pub fn from_bits(shape: Shape4, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                shape: shape.dims(),
                actual: bits.len(),
            });
        }
        if let Some(index) = bits.iter().position(|&b| b > 1) {
            return Err(Error::NonBinaryMask { index });
        }
        Ok(Self { shape, bits })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(shape.numel());
        for o in 0..shape.c_out {
            for i in 0..shape.c_in {
                for u in 0..shape.k_h {
                    for v in 0..shape.k_w {
                        bits.push(f(o, i, u, v) as u8);
                    }
                }
            }
        }
        Self { shape, bits }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, u: usize, v: usize) -> bool {
        self.bits[self.shape.index(o, i, u, v)] != 0
    }

    #[inline]
    pub fn set(&mut self, o: usize, i: usize, u: usize, v: usize, on: bool) {
        let idx = self.shape.index(o, i, u, v);
        self.bits[idx] = on as u8;
    }

    /// Number of kept positions.
    pub fn count_nonzero(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// True iff every bit set in `self` is also set in `other`.
    pub fn subset_of(&self, other: &Mask4) -> Result<bool> {
        self.check_same_shape("subset_of", other.shape)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b))
    }

    pub fn complement(&self) -> Mask4 {
        Mask4 {
            shape: self.shape,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    fn check_same_shape(&self, op: &'static str, other: Shape4) -> Result<()> {
        if self.shape != other {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }
}

/// `w ⊙ b`.
pub fn apply_mask<T: Scalar>(w: &Tensor4<T>, b: &Mask4) -> Result<Tensor4<T>> {
    b.check_same_shape("apply_mask", w.shape)?;
    let data = w
        .data
        .iter()
        .zip(&b.bits)
        .map(|(&x, &bit)| if bit != 0 { x } else { T::zero() })
        .collect();
    Ok(Tensor4 {
        shape: w.shape,
        data,
    })
}

pub fn count_nonzero_mask(b: &Mask4) -> usize {
    b.count_nonzero()
}

pub fn subset_of(a: &Mask4, b: &Mask4) -> Result<bool> {
    a.subset_of(b)
}

/// Batched channel-first activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::LengthMismatch {
                shape: vec![n, c, h, w],
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { n, c, h, w, data })
    }

    pub fn uniform<R: Rng + ?Sized>(
        (n, c, h, w): (usize, usize, usize, usize),
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let dist = Uniform::new(lo, hi);
        let data = (0..n * c * h * w)
            .map(|_| T::from_f64_lossy(dist.sample(rng)))
            .collect();
        Self { n, c, h, w, data }
    }

    /// `(n, c, h, w)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Elementwise sum of two maps of identical dims.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dims("add", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_dims("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max))
    }

    /// Copies the selected samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let per = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Self {
            n: indices.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    pub(crate) fn check_dims(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![self.n, self.c, self.h, self.w],
                right: vec![other.n, other.c, other.h, other.w],
            });
        }
        Ok(())
    }
}

/// Row-major 2-D matrix, used for the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                shape: vec![rows, cols],
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Index of the largest entry in each row; first one wins on ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Shape4 {
        Shape4::new(c_out, c_in, k_h, k_w)
    }

    #[test]
    fn mask_of_zeros_annihilates() {
        let shape = s(2, 2, 3, 3);
        let w = Tensor4::<f32>::full(shape, 1.0);
        let out = apply_mask(&w, &Mask4::zeros(shape)).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_of_ones_is_identity() {
        let shape = s(3, 2, 3, 3);
        let mut rng = rand::thread_rng();
        let w = Tensor4::<f64>::randn(shape, 1.0, &mut rng);
        assert_eq!(apply_mask(&w, &Mask4::ones(shape)).unwrap(), w);
    }

    #[test]
    fn mask_hand_case() {
        let shape = s(1, 4, 1, 1);
        let w = Tensor4::from_vec(shape, vec![0.1f64, -0.5, 0.3, -0.2]).unwrap();
        let b = Mask4::from_bits(shape, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(apply_mask(&w, &b).unwrap().data(), &[0.0, -0.5, 0.3, 0.0]);
    }

    #[test]
    fn mask_shape_mismatch_names_both_shapes() {
        let w = Tensor4::<f32>::zeros(s(1, 4, 1, 1));
        let b = Mask4::ones(s(1, 4, 3, 3));
        let err = apply_mask(&w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 4, 3, 3]") && msg.contains("[1, 4, 1, 1]"), "{msg}");
    }

    #[test]
    fn count_nonzero_cases() {
        assert_eq!(count_nonzero_mask(&Mask4::ones(s(1, 4, 3, 3))), 36);
        assert_eq!(count_nonzero_mask(&Mask4::zeros(s(1, 4, 3, 3))), 0);
        // 1:4 along input channels on (4, 8, 3, 3).
        let b = Mask4::from_fn(s(4, 8, 3, 3), |_, i, _, _| i % 4 == 0);
        assert_eq!(count_nonzero_mask(&b), 72);
    }

    #[test]
    fn subset_cases() {
        let shape = s(2, 4, 3, 3);
        let b = Mask4::from_fn(shape, |o, i, u, v| (o + i + u + v) % 2 == 0);
        assert!(subset_of(&Mask4::zeros(shape), &b).unwrap());
        assert!(subset_of(&b, &b).unwrap());
        let mut a = Mask4::zeros(shape);
        a.set(0, 1, 0, 0, true);
        assert!(!b.get(0, 1, 0, 0));
        assert!(!subset_of(&a, &b).unwrap());
        assert!(subset_of(&a, &Mask4::ones(s(1, 1, 1, 1))).is_err());
    }

    #[test]
    fn rejects_non_binary_and_non_finite() {
        assert!(Mask4::from_bits(s(1, 1, 1, 2), vec![0, 2]).is_err());
        assert!(Tensor4::from_vec(s(1, 1, 1, 2), vec![0.0f32, f32::NAN]).is_err());
        assert!(Tensor4::from_vec(s(1, 1, 1, 2), vec![0.0f32]).is_err());
    }

    fn arb_masked() -> impl Strategy<Value = (Tensor4<f64>, Mask4, Mask4)> {
        (1usize..4, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(a, b, c, d)| {
            let shape = s(a, b, c, d);
            let n = shape.numel();
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(0u8..2, n),
                prop::collection::vec(0u8..2, n),
            )
                .prop_map(move |(w, m1, m2)| {
                    let sub: Vec<u8> = m1.iter().zip(&m2).map(|(x, y)| x & y).collect();
                    (
                        Tensor4::from_vec(shape, w).unwrap(),
                        Mask4::from_bits(shape, m1).unwrap(),
                        Mask4::from_bits(shape, sub).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn apply_mask_idempotent((w, b, _) in arb_masked()) {
            let once = apply_mask(&w, &b).unwrap();
            let twice = apply_mask(&once, &b).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn subset_bounds_count((_, b, a) in arb_masked()) {
            prop_assert!(subset_of(&a, &b).unwrap());
            prop_assert!(count_nonzero_mask(&a) <= count_nonzero_mask(&b));
        }
    }
}
