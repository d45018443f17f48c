//! 2-D cross-correlation (no kernel flip), groups = 1, no dilation.
//!
//! The direct kernels skip zero weights, so masked convolutions cost time
//! proportional to the number of kept weights.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Mask4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T> {
    pub stride: usize,
    pub padding: usize,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            bias: None,
        }
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Self {
        self.bias = Some(bias);
        self
    }

    /// Same spec without the bias term.
    pub fn unbiased(&self) -> Self {
        Self::new(self.stride, self.padding)
    }

    pub fn output_size(&self, in_h: usize, in_w: usize, k_h: usize, k_w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::InvalidConvSpec("stride must be >= 1".into()));
        }
        let ph = in_h + 2 * self.padding;
        let pw = in_w + 2 * self.padding;
        if ph < k_h || pw < k_w {
            return Err(Error::DegenerateOutput {
                input: (in_h, in_w),
                kernel: (k_h, k_w),
                stride: self.stride,
                padding: self.padding,
            });
        }
        Ok(((ph - k_h) / self.stride + 1, (pw - k_w) / self.stride + 1))
    }
}

pub struct ConvGrads<T> {
    pub grad_w: Tensor4<T>,
    /// Present iff the spec carries a bias.
    pub grad_bias: Option<Vec<T>>,
    pub grad_x: FeatureMap<T>,
}

/// Output positions `o` with `0 <= o*stride + offset - pad < in_len`.
#[inline]
fn valid_range(offset: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + offset - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if limit > offset {
        ((limit - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn check_inputs<T: Scalar>(w: &Tensor4<T>, spec: &ConvSpec<T>, x: &FeatureMap<T>) -> Result<(usize, usize)> {
    let s = w.shape();
    if x.channels() != s.c_in {
        return Err(Error::ChannelMismatch {
            op: "conv2d",
            expected: s.c_in,
            actual: x.channels(),
        });
    }
    if let Some(b) = &spec.bias {
        if b.len() != s.c_out {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: vec![s.c_out],
                right: vec![b.len()],
            });
        }
    }
    spec.output_size(x.height(), x.width(), s.k_h, s.k_w)
}

pub fn conv2d_forward<T: Scalar>(w: &Tensor4<T>, spec: &ConvSpec<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (oh, ow) = check_inputs(w, spec, x)?;
    let s = w.shape();
    let (n, _, h, wd) = x.dims();
    let (stride, pad) = (spec.stride, spec.padding);
    let mut out = FeatureMap::zeros(n, s.c_out, oh, ow);
    let xd = x.data();
    let wdta = w.data();
    let od = out.data_mut();
    for b in 0..n {
        for o in 0..s.c_out {
            let obase = (b * s.c_out + o) * oh * ow;
            let plane = &mut od[obase..obase + oh * ow];
            if let Some(bias) = &spec.bias {
                plane.iter_mut().for_each(|y| *y = bias[o]);
            }
            for i in 0..s.c_in {
                let xbase = (b * s.c_in + i) * h * wd;
                for u in 0..s.k_h {
                    let (y0, y1) = valid_range(u, pad, stride, h, oh);
                    for v in 0..s.k_w {
                        let wv = wdta[s.index(o, i, u, v)];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = valid_range(v, pad, stride, wd, ow);
                        for oy in y0..y1 {
                            let iy = oy * stride + u - pad;
                            let xrow = &xd[xbase + iy * wd..xbase + (iy + 1) * wd];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                orow[ox] += wv * xrow[ox * stride + v - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Same map as [`conv2d_forward`], computed by lowering to a matrix product.
pub fn conv2d_forward_im2col<T: Scalar>(w: &Tensor4<T>, spec: &ConvSpec<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (oh, ow) = check_inputs(w, spec, x)?;
    let s = w.shape();
    let (n, _, h, wd) = x.dims();
    let (stride, pad) = (spec.stride as isize, spec.padding as isize);
    let rows = s.c_in * s.k_h * s.k_w;
    let cols = oh * ow;
    let mut out = FeatureMap::zeros(n, s.c_out, oh, ow);
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..n {
        col.iter_mut().for_each(|c| *c = T::zero());
        for i in 0..s.c_in {
            for u in 0..s.k_h {
                for v in 0..s.k_w {
                    let r = (i * s.k_h + u) * s.k_w + v;
                    for oy in 0..oh {
                        let iy = oy as isize * stride + u as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * stride + v as isize - pad;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            col[r * cols + oy * ow + ox] = x.get(b, i, iy as usize, ix as usize);
                        }
                    }
                }
            }
        }
        let od = out.data_mut();
        for o in 0..s.c_out {
            let wrow = &w.data()[o * rows..(o + 1) * rows];
            let orow = &mut od[(b * s.c_out + o) * cols..(b * s.c_out + o + 1) * cols];
            if let Some(bias) = &spec.bias {
                orow.iter_mut().for_each(|y| *y = bias[o]);
            }
            for (r, &wv) in wrow.iter().enumerate() {
                let crow = &col[r * cols..(r + 1) * cols];
                for (y, &cv) in orow.iter_mut().zip(crow) {
                    *y += wv * cv;
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    w: &Tensor4<T>,
    spec: &ConvSpec<T>,
    x: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_on(w, spec, x, grad_out, None)
}

/// Backward pass that only evaluates the weight gradient where `support`
/// is set; other positions of `grad_w` are zero.
pub fn conv2d_backward_on<T: Scalar>(
    w: &Tensor4<T>,
    spec: &ConvSpec<T>,
    x: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
    support: Option<&Mask4>,
) -> Result<ConvGrads<T>> {
    let (oh, ow) = check_inputs(w, spec, x)?;
    let s = w.shape();
    let (n, _, h, wd) = x.dims();
    if grad_out.dims() != (n, s.c_out, oh, ow) {
        let (a, b, c, d) = grad_out.dims();
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward grad_out",
            left: vec![n, s.c_out, oh, ow],
            right: vec![a, b, c, d],
        });
    }
    if let Some(m) = support {
        if m.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "conv2d_backward support",
                left: s.dims(),
                right: m.shape().dims(),
            });
        }
    }
    let (stride, pad) = (spec.stride, spec.padding);
    let mut grad_w = Tensor4::zeros(s);
    let mut grad_x = FeatureMap::zeros(n, s.c_in, h, wd);
    let xd = x.data();
    let gd = grad_out.data();
    let wdta = w.data();
    {
        let gw = grad_w.data_mut();
        let gx = grad_x.data_mut();
        for b in 0..n {
            for o in 0..s.c_out {
                let gbase = (b * s.c_out + o) * oh * ow;
                let gplane = &gd[gbase..gbase + oh * ow];
                for i in 0..s.c_in {
                    let xbase = (b * s.c_in + i) * h * wd;
                    for u in 0..s.k_h {
                        let (y0, y1) = valid_range(u, pad, stride, h, oh);
                        for v in 0..s.k_w {
                            let widx = s.index(o, i, u, v);
                            let wv = wdta[widx];
                            let want_w = support.is_none_or(|m| m.bits()[widx] != 0);
                            if wv == T::zero() && !want_w {
                                continue;
                            }
                            let (x0, x1) = valid_range(v, pad, stride, wd, ow);
                            let mut acc = T::zero();
                            for oy in y0..y1 {
                                let iy = oy * stride + u - pad;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let xrow = xbase + iy * wd;
                                if want_w {
                                    let xr = &xd[xrow..xrow + wd];
                                    for ox in x0..x1 {
                                        acc += grow[ox] * xr[ox * stride + v - pad];
                                    }
                                }
                                if wv != T::zero() {
                                    let gxr = &mut gx[xrow..xrow + wd];
                                    for ox in x0..x1 {
                                        gxr[ox * stride + v - pad] += wv * grow[ox];
                                    }
                                }
                            }
                            if want_w {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    let grad_bias = spec.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); s.c_out];
        for b in 0..n {
            for (o, g) in gb.iter_mut().enumerate() {
                let base = (b * s.c_out + o) * oh * ow;
                *g += gd[base..base + oh * ow].iter().copied().sum::<T>();
            }
        }
        gb
    });
    Ok(ConvGrads {
        grad_w,
        grad_bias,
        grad_x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pointwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FeatureMap::<f64>::uniform((2, 1, 4, 5), -1.0, 1.0, &mut rng);
        let w = Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0);
        let y = conv2d_forward(&w, &ConvSpec::new(1, 0), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = FeatureMap::<f64>::uniform((1, 2, 4, 4), -1.0, 1.0, &mut rng);
        let w = Tensor4::zeros(Shape4::new(3, 2, 3, 3));
        let y = conv2d_forward(&w, &ConvSpec::new(1, 1), &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let spec = ConvSpec::new(1, 1).with_bias(vec![0.5, -1.0, 2.0]);
        let y = conv2d_forward(&w, &spec, &x).unwrap();
        for c in 0..3 {
            assert!((0..16).all(|k| y.get(0, c, k / 4, k % 4) == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = FeatureMap::from_vec(1, 1, 3, 3, vec![1.0f64; 9]).unwrap();
        let w = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
        let y = conv2d_forward(&w, &ConvSpec::new(1, 0), &x).unwrap();
        assert_eq!(y.dims(), (1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn shape_errors() {
        let x = FeatureMap::<f32>::zeros(1, 2, 3, 3);
        let w = Tensor4::zeros(Shape4::new(1, 3, 3, 3));
        assert!(matches!(
            conv2d_forward(&w, &ConvSpec::new(1, 0), &x),
            Err(Error::ChannelMismatch { .. })
        ));
        let w = Tensor4::zeros(Shape4::new(1, 2, 5, 5));
        assert!(matches!(
            conv2d_forward(&w, &ConvSpec::new(1, 0), &x),
            Err(Error::DegenerateOutput { .. })
        ));
    }

    #[test]
    fn scalar_kernel_weight_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = FeatureMap::<f64>::uniform((2, 1, 3, 3), -1.0, 1.0, &mut rng);
        let g = FeatureMap::<f64>::uniform((2, 1, 3, 3), -1.0, 1.0, &mut rng);
        let w = Tensor4::full(Shape4::new(1, 1, 1, 1), 0.7);
        let grads = conv2d_backward(&w, &ConvSpec::new(1, 0), &x, &g).unwrap();
        let expected: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((grads.grad_w.data()[0] - expected).abs() < 1e-14);
        for (gx, gy) in grads.grad_x.data().iter().zip(g.data()) {
            assert!((gx - 0.7 * gy).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = FeatureMap::<f64>::uniform((2, 3, 5, 5), -1.0, 1.0, &mut rng);
        let w = Tensor4::randn(Shape4::new(4, 3, 3, 3), 1.0, &mut rng);
        let spec = ConvSpec::new(2, 1).with_bias(vec![0.0; 4]);
        let g = FeatureMap::zeros(2, 4, 3, 3);
        let grads = conv2d_backward(&w, &spec, &x, &g).unwrap();
        assert!(grads.grad_w.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn im2col_agrees_with_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5)] {
            let x = FeatureMap::<f32>::uniform((2, 3, 9, 7), -1.0, 1.0, &mut rng);
            let w = Tensor4::randn(Shape4::new(4, 3, k, k), 0.5, &mut rng);
            let spec = ConvSpec::new(stride, pad).with_bias(vec![0.1, 0.2, -0.3, 0.0]);
            let a = conv2d_forward(&w, &spec, &x).unwrap();
            let b = conv2d_forward_im2col(&w, &spec, &x).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        }
    }

    #[test]
    fn support_restricted_weight_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = Shape4::new(2, 4, 3, 3);
        let x = FeatureMap::<f64>::uniform((2, 4, 5, 5), -1.0, 1.0, &mut rng);
        let w = Tensor4::randn(shape, 1.0, &mut rng);
        let g = FeatureMap::<f64>::uniform((2, 2, 5, 5), -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(1, 1);
        let m = Mask4::from_fn(shape, |o, i, u, v| (o + i + u * v) % 3 == 0);
        let full = conv2d_backward(&w, &spec, &x, &g).unwrap();
        let part = conv2d_backward_on(&w, &spec, &x, &g, Some(&m)).unwrap();
        for (k, (&a, &b)) in full.grad_w.data().iter().zip(part.grad_w.data()).enumerate() {
            if m.bits()[k] == 1 {
                assert_eq!(a, b);
            } else {
                assert_eq!(b, 0.0);
            }
        }
        assert_eq!(full.grad_x, part.grad_x);
    }
}
