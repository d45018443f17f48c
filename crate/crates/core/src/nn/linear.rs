use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Fully connected layer, `y = x Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

pub struct LinearGrads<T> {
    pub grad_weight: Matrix<T>,
    pub grad_bias: Vec<T>,
    pub grad_x: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    /// PyTorch-style init: uniform on ±1/sqrt(in).
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new(-bound, bound);
        let w = (0..inputs * outputs)
            .map(|_| T::from_f64_lossy(dist.sample(rng)))
            .collect();
        let b = (0..outputs).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
        Self {
            weight: Matrix::from_vec(outputs, inputs, w).expect("finite init"),
            bias: b,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let (n, o) = (x.rows(), self.outputs());
        let mut out = Vec::with_capacity(n * o);
        for r in 0..n {
            let xr = x.row(r);
            for j in 0..o {
                let wr = self.weight.row(j);
                let dot: T = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                out.push(dot + self.bias[j]);
            }
        }
        Matrix::from_vec(n, o, out)
    }

    pub fn backward(&self, x: &Matrix<T>, grad_out: &Matrix<T>) -> Result<LinearGrads<T>> {
        self.check_input(x)?;
        let (n, k, o) = (x.rows(), self.inputs(), self.outputs());
        if grad_out.rows() != n || grad_out.cols() != o {
            return Err(Error::ShapeMismatch {
                op: "linear_backward",
                left: vec![n, o],
                right: vec![grad_out.rows(), grad_out.cols()],
            });
        }
        let mut gw = Matrix::zeros(o, k);
        let mut gb = vec![T::zero(); o];
        let mut gx = Matrix::zeros(n, k);
        for r in 0..n {
            let xr = x.row(r);
            for j in 0..o {
                let g = grad_out.get(r, j);
                gb[j] += g;
                let wrow = &mut gw.data_mut()[j * k..(j + 1) * k];
                for (acc, &xv) in wrow.iter_mut().zip(xr) {
                    *acc += g * xv;
                }
                let wr = self.weight.row(j);
                let gxr = &mut gx.data_mut()[r * k..(r + 1) * k];
                for (acc, &wv) in gxr.iter_mut().zip(wr) {
                    *acc += g * wv;
                }
            }
        }
        Ok(LinearGrads {
            grad_weight: gw,
            grad_bias: gb,
            grad_x: gx,
        })
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.inputs() {
            return Err(Error::ChannelMismatch {
                op: "linear",
                expected: self.inputs(),
                actual: x.cols(),
            });
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let inv_n = T::one() / T::from_f64_lossy(n as f64);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(n, k);
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = &mut grad.data_mut()[r * k..(r + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gv = (p - if j == label { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}
