//! BN fusion and the point-wise merge of a two-branch block into a single
//! N:M convolution with bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d_forward, BatchNormParams, ConvSpec};
use crate::scalar::Scalar;
use crate::sparsity::{check_nm, NMPattern};
use crate::spre::SpReBlock;
use crate::tensor::{apply_mask, FeatureMap, Mask4, Tensor4};

/// Folds eval-mode batch norm into the preceding convolution.
///
/// Returns `(s ⊙ w, beta - s·mean + s·bias)` with `s = gamma / sqrt(var + eps)`
/// per output channel. Zero weights stay exactly zero.
pub fn fuse_bn<T: Scalar>(w: &Tensor4<T>, spec: &ConvSpec<T>, bn: &BatchNormParams<T>) -> Result<(Tensor4<T>, Vec<T>)> {
    let shape = w.shape();
    if bn.channels() != shape.c_out {
        return Err(Error::ChannelMismatch {
            op: "fuse_bn",
            expected: shape.c_out,
            actual: bn.channels(),
        });
    }
    let (scale, shift) = bn.eval_affine()?;
    let mut fused = w.clone();
    let per_out = shape.c_in * shape.spatial();
    for (o, chunk) in fused.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|x| *x *= scale[o]);
    }
    let bias = (0..shape.c_out)
        .map(|o| {
            let conv_bias = spec.bias.as_ref().map_or(T::zero(), |b| b[o]);
            shift[o] + scale[o] * conv_bias
        })
        .collect();
    Ok((fused, bias))
}

/// Single-branch inference form `conv(B ⊙ W̄, x) + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedConv<T> {
    pub name: String,
    pub w_bar: Tensor4<T>,
    pub bias_bar: Vec<T>,
    pub mask: Mask4,
    pub pattern: NMPattern,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> MergedConv<T> {
    pub fn spec(&self) -> ConvSpec<T> {
        ConvSpec::new(self.stride, self.padding).with_bias(self.bias_bar.clone())
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        conv2d_forward(&self.w_bar, &self.spec(), x)
    }

    /// Mask is N:M and `w_bar` vanishes outside it.
    pub fn check_valid(&self) -> Result<()> {
        check_nm(&self.mask, self.pattern)?;
        let outside = self
            .w_bar
            .data()
            .iter()
            .zip(self.mask.bits())
            .any(|(&w, &b)| b == 0 && w != T::zero());
        if outside {
            return Err(Error::SubsetViolation {
                layer: self.name.clone(),
            });
        }
        Ok(())
    }
}

pub fn merge_branches<T: Scalar>(block: &SpReBlock<T>) -> Result<MergedConv<T>> {
    if !block.b_extra().subset_of(block.b_main())? {
        return Err(Error::SubsetViolation {
            layer: block.name().to_string(),
        });
    }
    if !block.bn_main().stats_ready() || (block.variant().has_extra() && !block.bn_extra().stats_ready()) {
        return Err(Error::UninitializedStats);
    }
    let spec = block.spec();
    let (mut w_bar, mut bias_bar) = fuse_bn(&block.masked_main(), spec, block.bn_main())?;
    if block.variant().has_extra() {
        let (w_e, b_e) = fuse_bn(&block.masked_extra(), spec, block.bn_extra())?;
        w_bar = w_bar.add(&w_e)?;
        bias_bar.iter_mut().zip(b_e).for_each(|(a, b)| *a += b);
    }
    let masked = apply_mask(&w_bar, block.b_main())?;
    debug_assert_eq!(masked, w_bar, "subset invariant makes the final mask a no-op");
    Ok(MergedConv {
        name: block.name().to_string(),
        w_bar: masked,
        bias_bar,
        mask: block.b_main().clone(),
        pattern: block.pattern(),
        stride: spec.stride,
        padding: spec.padding,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl EquivalenceReport {
    pub fn new(trials: usize, max_abs_diff: f64, tolerance: f64) -> Self {
        Self {
            trials,
            max_abs_diff,
            tolerance,
            passed: max_abs_diff <= tolerance,
        }
    }

    /// Combines reports of several layers into one; `trials` counts every
    /// comparison made. A NaN difference anywhere fails the result.
    pub fn merge(reports: &[EquivalenceReport], tolerance: f64) -> Self {
        let trials = reports.iter().map(|r| r.trials).sum();
        let max = reports
            .iter()
            .map(|r| r.max_abs_diff)
            .fold(0.0, |a: f64, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) });
        Self::new(trials, max, tolerance)
    }
}

/// Input geometry for the random equivalence trials.
#[derive(Debug, Clone, Copy)]
pub struct TrialInput {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for TrialInput {
    fn default() -> Self {
        Self {
            batch: 2,
            height: 7,
            width: 7,
            seed: 0,
        }
    }
}

/// Compares the eval-mode two-branch output with the merged conv on
/// `trials` random inputs drawn from `[-1, 1]`.
pub fn verify_equivalence<T: Scalar>(
    block: &SpReBlock<T>,
    merged: &MergedConv<T>,
    trials: usize,
    tol: f64,
    input: TrialInput,
) -> Result<EquivalenceReport> {
    let shape = block.w_main().shape();
    if merged.w_bar.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "verify_equivalence",
            left: shape.dims(),
            right: merged.w_bar.shape().dims(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let h = input.height.max(shape.k_h);
    let w = input.width.max(shape.k_w);
    let mut max_diff = 0.0f64;
    for _ in 0..trials {
        let x = FeatureMap::<T>::uniform((input.batch, shape.c_in, h, w), -1.0, 1.0, &mut rng);
        let two_branch = block.forward_eval(&x)?;
        let single = merged.forward(&x)?;
        max_diff = max_diff.max(two_branch.max_abs_diff(&single)?);
    }
    Ok(EquivalenceReport::new(trials, max_diff, tol))
}
