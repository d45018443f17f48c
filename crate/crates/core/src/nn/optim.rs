use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `g += wd·p; v = μ·v + g; p -= lr·v`.
///
/// Velocity buffers are matched to parameters by position, so callers must
/// pass parameters in the same order on every step.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates parameter `slot` in place.
    pub fn update(&mut self, slot: usize, param: &mut [T], grad: &[T]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: vec![param.len()],
                right: vec![grad.len()],
            });
        }
        if !(self.lr >= T::zero()) {
            return Err(Error::InvalidLearningRate(self.lr.as_f64()));
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let vel = &mut self.velocity[slot];
        if vel.len() != param.len() {
            *vel = vec![T::zero(); param.len()];
        }
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
            let d = g + self.weight_decay * *p;
            *v = self.momentum * *v + d;
            *p -= self.lr * *v;
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(slot, p, g)?;
        }
        Ok(())
    }
}

/// One optimizer step over a fresh state; convenience for single updates.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    Sgd::new(lr, momentum, weight_decay).step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut opt = Sgd::new(0.0, 0.9, 5e-4);
        opt.update(0, &mut p, &[3.0, 4.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_step() {
        let mut p = vec![1.0f64, -2.0];
        sgd_step(&mut [&mut p[..]], &[&[0.5, -1.0][..]], 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 + 0.1]);
    }

    #[test]
    fn two_steps_with_momentum() {
        // v1 = g1 = 1, p1 = 1 - 0.1 = 0.9
        // v2 = 0.9*1 + 2 = 2.9, p2 = 0.9 - 0.29 = 0.61
        let mut p = vec![1.0f64];
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.update(0, &mut p, &[1.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        opt.update(0, &mut p, &[2.0]).unwrap();
        assert!((p[0] - 0.61).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![1.0f64];
        assert!(Sgd::new(0.1, 0.0, 0.0).update(0, &mut p, &[1.0, 2.0]).is_err());
    }
}
