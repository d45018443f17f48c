use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization state.
///
/// `num_batches_tracked` counts train-mode updates; zero means the running
/// statistics are still at their initial values and must not be fused.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub num_batches_tracked: u64,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Values saved by a train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    x_hat: FeatureMap<T>,
    inv_std: Vec<T>,
}

pub struct BnGrads<T> {
    pub grad_x: FeatureMap<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: c(DEFAULT_EPS),
            momentum: c(DEFAULT_MOMENTUM),
            num_batches_tracked: 0,
        }
    }

    /// Parameters with explicitly supplied (final) running statistics.
    pub fn from_parts(gamma: Vec<T>, beta: Vec<T>, running_mean: Vec<T>, running_var: Vec<T>, eps: T) -> Result<Self> {
        let p = Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            momentum: c(DEFAULT_MOMENTUM),
            num_batches_tracked: 1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn stats_ready(&self) -> bool {
        self.num_batches_tracked > 0
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channels();
        if self.beta.len() != ch || self.running_mean.len() != ch || self.running_var.len() != ch {
            return Err(Error::InvalidBatchNorm(format!(
                "vector lengths differ: gamma {}, beta {}, mean {}, var {}",
                ch,
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        if !(self.eps >= T::zero()) {
            return Err(Error::InvalidBatchNorm(format!("eps = {} must be >= 0", self.eps)));
        }
        if !(self.momentum > T::zero() && self.momentum < T::one()) {
            return Err(Error::InvalidBatchNorm(format!("momentum = {} outside (0, 1)", self.momentum)));
        }
        if let Some(v) = self.running_var.iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::InvalidBatchNorm(format!("negative running_var {v}")));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` of the eval-mode affine map.
    pub fn eval_affine(&self) -> Result<(Vec<T>, Vec<T>)> {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for ch in 0..self.channels() {
            let denom = self.running_var[ch] + self.eps;
            if !(denom > T::zero()) {
                return Err(Error::NonPositiveVariance {
                    channel: ch,
                    value: denom.as_f64(),
                });
            }
            let s = self.gamma[ch] / denom.sqrt();
            scale.push(s);
            shift.push(self.beta[ch] - s * self.running_mean[ch]);
        }
        Ok((scale, shift))
    }

    pub fn forward_eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_channels(x)?;
        let (scale, shift) = self.eval_affine()?;
        let (n, ch, h, w) = x.dims();
        let hw = h * w;
        let mut out = x.clone();
        for (k, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let cc = k % ch;
            for y in chunk.iter_mut() {
                *y = scale[cc] * *y + shift[cc];
            }
        }
        debug_assert_eq!(out.data().len(), n * ch * hw);
        Ok(out)
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates (running variance uses the unbiased batch variance).
    pub fn forward_train(&mut self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, BnCache<T>)> {
        self.check_channels(x)?;
        let (n, ch, h, w) = x.dims();
        let hw = h * w;
        let count = n * hw;
        if count < 2 {
            return Err(Error::BatchTooSmall(count));
        }
        let cnt: T = c(count as f64);
        let xd = x.data();
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for b in 0..n {
            for cc in 0..ch {
                let base = (b * ch + cc) * hw;
                mean[cc] += xd[base..base + hw].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for b in 0..n {
            for cc in 0..ch {
                let base = (b * ch + cc) * hw;
                let m = mean[cc];
                var[cc] += xd[base..base + hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        if let Some(ch_bad) = inv_std.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonPositiveVariance {
                channel: ch_bad,
                value: (var[ch_bad] + self.eps).as_f64(),
            });
        }

        let mut x_hat = x.clone();
        let mut out = x.clone();
        {
            let xh = x_hat.data_mut();
            let od = out.data_mut();
            for k in 0..n * ch {
                let cc = k % ch;
                for j in k * hw..(k + 1) * hw {
                    let v = (xd[j] - mean[cc]) * inv_std[cc];
                    xh[j] = v;
                    od[j] = self.gamma[cc] * v + self.beta[cc];
                }
            }
        }

        let mom = self.momentum;
        let unbias: T = cnt / (cnt - T::one());
        for cc in 0..ch {
            self.running_mean[cc] = (T::one() - mom) * self.running_mean[cc] + mom * mean[cc];
            self.running_var[cc] = (T::one() - mom) * self.running_var[cc] + mom * var[cc] * unbias;
        }
        self.num_batches_tracked += 1;
        Ok((out, BnCache { x_hat, inv_std }))
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<(FeatureMap<T>, Option<BnCache<T>>)> {
        match mode {
            Mode::Train => self.forward_train(x).map(|(y, cache)| (y, Some(cache))),
            Mode::Eval => self.forward_eval(x).map(|y| (y, None)),
        }
    }

    /// Gradients of the train-mode forward with respect to x, gamma and beta.
    pub fn backward(&self, grad_out: &FeatureMap<T>, cache: Option<&BnCache<T>>) -> Result<BnGrads<T>> {
        let cache = cache.ok_or(Error::MissingCache("batchnorm_backward"))?;
        cache.x_hat.check_dims("batchnorm_backward", grad_out)?;
        let (n, ch, h, w) = grad_out.dims();
        let hw = h * w;
        let cnt: T = c((n * hw) as f64);
        let gd = grad_out.data();
        let xh = cache.x_hat.data();
        let mut grad_beta = vec![T::zero(); ch];
        let mut grad_gamma = vec![T::zero(); ch];
        for k in 0..n * ch {
            let cc = k % ch;
            for j in k * hw..(k + 1) * hw {
                grad_beta[cc] += gd[j];
                grad_gamma[cc] += gd[j] * xh[j];
            }
        }
        let mut grad_x = FeatureMap::zeros(n, ch, h, w);
        let gx = grad_x.data_mut();
        for k in 0..n * ch {
            let cc = k % ch;
            let scale = self.gamma[cc] * cache.inv_std[cc] / cnt;
            for j in k * hw..(k + 1) * hw {
                gx[j] = scale * (cnt * gd[j] - grad_beta[cc] - xh[j] * grad_gamma[cc]);
            }
        }
        Ok(BnGrads {
            grad_x,
            grad_gamma,
            grad_beta,
        })
    }

    fn check_channels(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::ChannelMismatch {
                op: "batchnorm",
                expected: self.channels(),
                actual: x.channels(),
            });
        }
        Ok(())
    }
}

pub fn batchnorm_forward<T: Scalar>(
    p: &mut BatchNormParams<T>,
    x: &FeatureMap<T>,
    mode: Mode,
) -> Result<(FeatureMap<T>, Option<BnCache<T>>)> {
    p.forward(x, mode)
}

pub fn batchnorm_backward<T: Scalar>(
    p: &BatchNormParams<T>,
    grad_out: &FeatureMap<T>,
    cache: Option<&BnCache<T>>,
) -> Result<BnGrads<T>> {
    p.backward(grad_out, cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bn1(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> BatchNormParams<f64> {
        BatchNormParams::from_parts(vec![gamma], vec![beta], vec![mean], vec![var], eps).unwrap()
    }

    #[test]
    fn eval_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = FeatureMap::<f64>::uniform((2, 1, 3, 3), -2.0, 2.0, &mut rng);
        assert_eq!(bn1(1.0, 0.0, 0.0, 1.0, 0.0).forward_eval(&x).unwrap(), x);
    }

    #[test]
    fn eval_zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FeatureMap::<f64>::uniform((2, 1, 3, 3), -2.0, 2.0, &mut rng);
        let y = bn1(0.0, 0.7, 0.3, 2.0, 1e-5).forward_eval(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn eval_hand_value() {
        let x = FeatureMap::from_vec(1, 1, 1, 1, vec![3.0]).unwrap();
        let y = bn1(2.0, 0.5, 1.0, 4.0, 0.0).forward_eval(&x).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn train_requires_two_values() {
        let mut p = BatchNormParams::<f64>::new(1);
        let x = FeatureMap::from_vec(1, 1, 1, 1, vec![3.0]).unwrap();
        assert!(matches!(p.forward_train(&x), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn train_updates_running_stats() {
        let mut p = BatchNormParams::<f64>::new(1);
        let x = FeatureMap::from_vec(1, 1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = p.forward_train(&x).unwrap();
        // mean 2.5, biased var 1.25, unbiased 5/3
        assert!((p.running_mean[0] - 0.25).abs() < 1e-15);
        assert!((p.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
        let s: f64 = y.data().iter().sum();
        assert!(s.abs() < 1e-12);
        assert_eq!(p.num_batches_tracked, 1);
    }

    #[test]
    fn channel_mismatch() {
        let p = BatchNormParams::<f64>::new(2);
        assert!(p.forward_eval(&FeatureMap::zeros(1, 3, 2, 2)).is_err());
    }

    #[test]
    fn backward_without_cache() {
        let p = BatchNormParams::<f64>::new(1);
        assert!(matches!(
            p.backward(&FeatureMap::zeros(1, 1, 2, 2), None),
            Err(Error::MissingCache(_))
        ));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = BatchNormParams::<f64>::new(3);
        let x = FeatureMap::<f64>::uniform((2, 3, 4, 4), -1.0, 1.0, &mut rng);
        let (_, cache) = p.forward_train(&x).unwrap();
        let g = p.backward(&FeatureMap::zeros(2, 3, 4, 4), Some(&cache)).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_gamma.iter().chain(&g.grad_beta).all(|&v| v == 0.0));
    }

    /// Two samples a, b with eps = 0: x_hat = ±1, so y = ±gamma + beta and
    /// dy/dx vanishes for any upstream gradient that is constant.
    #[test]
    fn two_value_hand_case() {
        let mut p = BatchNormParams::<f64>::from_parts(vec![1.5], vec![0.2], vec![0.0], vec![1.0], 0.0).unwrap();
        let x = FeatureMap::from_vec(1, 1, 1, 2, vec![1.0, 3.0]).unwrap();
        let (y, cache) = p.forward_train(&x).unwrap();
        assert!((y.data()[0] - (-1.5 + 0.2)).abs() < 1e-15);
        assert!((y.data()[1] - (1.5 + 0.2)).abs() < 1e-15);
        let g = FeatureMap::from_vec(1, 1, 1, 2, vec![1.0, 1.0]).unwrap();
        let grads = p.backward(&g, Some(&cache)).unwrap();
        assert!(grads.grad_x.data().iter().all(|v| v.abs() < 1e-15));
        assert_eq!(grads.grad_beta, vec![2.0]);
        assert!(grads.grad_gamma[0].abs() < 1e-15);
        // g = (1, 0): dL/dx = gamma/std * (g - mean(g) - x_hat*mean(g*x_hat))
        //            = 1.5 * (1 - 0.5 - (-1)(-0.5)) = 0 for x_a. Two points
        // always normalize to ±1, so the gradient is identically zero.
        let g = FeatureMap::from_vec(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        let grads = p.backward(&g, Some(&cache)).unwrap();
        assert!(grads.grad_x.data().iter().all(|v| v.abs() < 1e-15));
        assert!((grads.grad_gamma[0] + 1.0).abs() < 1e-15);
    }
}
