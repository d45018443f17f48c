use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Matrix};

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn relu_forward<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = relu(*v));
    y
}

/// Gradient of ReLU given the forward input; the derivative at 0 is taken as 0.
pub fn relu_backward<T: Scalar>(x: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    x.check_dims("relu_backward", grad_out)?;
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// Mean over the spatial dims: `(n, c, h, w) -> (n, c)`.
pub fn global_avg_pool_forward<T: Scalar>(x: &FeatureMap<T>) -> Matrix<T> {
    let (n, ch, h, w) = x.dims();
    let hw = h * w;
    let inv = T::one() / T::from_f64_lossy(hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Matrix::from_vec(n, ch, data).expect("pool output is finite when input is")
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_dims: (usize, usize, usize, usize),
    grad_out: &Matrix<T>,
) -> Result<FeatureMap<T>> {
    let (n, ch, h, w) = input_dims;
    if grad_out.rows() != n || grad_out.cols() != ch {
        return Err(crate::Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            left: vec![n, ch],
            right: vec![grad_out.rows(), grad_out.cols()],
        });
    }
    let hw = h * w;
    let inv = T::one() / T::from_f64_lossy(hw as f64);
    let mut g = FeatureMap::zeros(n, ch, h, w);
    for (k, plane) in g.data_mut().chunks_mut(hw).enumerate() {
        let v = grad_out.data()[k] * inv;
        plane.iter_mut().for_each(|p| *p = v);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        assert_eq!(relu(-1.0f64), 0.0);
        assert_eq!(relu(2.0f64), 2.0);
        let x = FeatureMap::from_vec(1, 1, 1, 3, vec![-1.0f64, 0.0, 2.0]).unwrap();
        let g = FeatureMap::from_vec(1, 1, 1, 3, vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn gap_mean_and_spread() {
        let x = FeatureMap::from_vec(1, 2, 1, 2, vec![1.0f64, 3.0, -2.0, 0.0]).unwrap();
        let y = global_avg_pool_forward(&x);
        assert_eq!(y.data(), &[2.0, -1.0]);
        let g = Matrix::from_vec(1, 2, vec![4.0, 2.0]).unwrap();
        let gx = global_avg_pool_backward(x.dims(), &g).unwrap();
        assert_eq!(gx.data(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
