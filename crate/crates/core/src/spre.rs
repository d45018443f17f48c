//! Two-branch spatial re-parameterization block.
//!
//! The main branch is an N:M-masked convolution. The extra branch reuses the
//! main mask only at kernel locations where an unstructured magnitude mask of
//! the same overall sparsity is denser than the N:M rate, so it carries
//! weights exactly where N:M sparsity under-allocates them. Each branch has
//! its own batch norm; after training both fold into one N:M convolution
//! (see [`crate::reparam`]).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d_backward_on, conv2d_forward, BatchNormParams, BnCache, ConvSpec, Mode};
use crate::scalar::{c, Scalar};
use crate::sparsity::{check_nm, magnitude_mask, nm_project_layer, spatial_sparsity, NMPattern};
use crate::tensor::{apply_mask, FeatureMap, Mask4, Tensor4};

/// Which kernel locations the extra branch occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpReVariant {
    /// Locations where the unstructured reference is denser than N:M.
    SpRe,
    /// The full main mask.
    Same,
    /// Locations where the unstructured reference is sparser than N:M.
    Inverse,
    /// No extra branch.
    None,
}

impl SpReVariant {
    pub fn code(self) -> u8 {
        match self {
            SpReVariant::None => 0,
            SpReVariant::SpRe => 1,
            SpReVariant::Same => 2,
            SpReVariant::Inverse => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SpReVariant::None,
            1 => SpReVariant::SpRe,
            2 => SpReVariant::Same,
            3 => SpReVariant::Inverse,
            _ => return None,
        })
    }

    pub fn has_extra(self) -> bool {
        self != SpReVariant::None
    }
}

impl fmt::Display for SpReVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpReVariant::SpRe => "spre",
            SpReVariant::Same => "same",
            SpReVariant::Inverse => "inverse",
            SpReVariant::None => "none",
        })
    }
}

impl FromStr for SpReVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spre" => Ok(SpReVariant::SpRe),
            "same" => Ok(SpReVariant::Same),
            "inverse" => Ok(SpReVariant::Inverse),
            "none" => Ok(SpReVariant::None),
            other => Err(format!("unknown variant `{other}` (expected spre, same, inverse or none)")),
        }
    }
}

/// Source of the unstructured reference mask `B^U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// Recomputed from the current main weights on every refresh.
    Dynamic,
    /// Computed once (e.g. from pre-trained weights) and kept.
    Frozen,
}

fn check_same_shape(op: &'static str, a: &Mask4, b: &Mask4) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().dims(),
            right: b.shape().dims(),
        });
    }
    Ok(())
}

/// Extra-branch mask: copy `b` at every location whose unstructured
/// sparsity is strictly below `1 - n/m`, zero elsewhere.
pub fn build_spre_mask(b: &Mask4, b_u: &Mask4, pat: NMPattern) -> Result<Mask4> {
    select_locations(b, b_u, pat, |ss, thr| ss < thr)
}

pub fn build_variant_mask(b: &Mask4, b_u: &Mask4, pat: NMPattern, variant: SpReVariant) -> Result<Mask4> {
    check_same_shape("build_variant_mask", b, b_u)?;
    match variant {
        SpReVariant::SpRe => build_spre_mask(b, b_u, pat),
        SpReVariant::Same => Ok(b.clone()),
        SpReVariant::Inverse => select_locations(b, b_u, pat, |ss, thr| ss > thr),
        SpReVariant::None => Ok(Mask4::zeros(b.shape())),
    }
}

fn select_locations(b: &Mask4, b_u: &Mask4, pat: NMPattern, keep: impl Fn(f64, f64) -> bool) -> Result<Mask4> {
    check_same_shape("build_spre_mask", b, b_u)?;
    let threshold = pat.sparsity();
    let profile = spatial_sparsity(b_u);
    let s = b.shape();
    Ok(Mask4::from_fn(s, |o, i, u, v| keep(profile.at(u, v), threshold) && b.get(o, i, u, v)))
}

/// Construction options shared by every block of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    pub variant: SpReVariant,
    /// Optimizer steps between mask refreshes; 0 disables refreshing.
    pub refresh_period: usize,
    /// Decay coefficient applied to pruned main-branch weights in backward.
    pub decay: f64,
    pub reference: ReferenceMode,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            variant: SpReVariant::SpRe,
            refresh_period: 1,
            decay: 2e-4,
            reference: ReferenceMode::Dynamic,
        }
    }
}

struct ForwardCache<T> {
    x: FeatureMap<T>,
    bn_main: BnCache<T>,
    bn_extra: Option<BnCache<T>>,
}

/// Gradients of one block; extra-branch entries are `None` without an extra branch.
pub struct SpReGrads<T> {
    pub w_main: Tensor4<T>,
    pub w_extra: Option<Tensor4<T>>,
    pub bn_main_gamma: Vec<T>,
    pub bn_main_beta: Vec<T>,
    pub bn_extra_gamma: Option<Vec<T>>,
    pub bn_extra_beta: Option<Vec<T>>,
    pub x: FeatureMap<T>,
}

pub struct SpReBlock<T> {
    name: String,
    w_main: Tensor4<T>,
    b_main: Mask4,
    w_extra: Tensor4<T>,
    b_extra: Mask4,
    b_unstructured: Mask4,
    bn_main: BatchNormParams<T>,
    bn_extra: BatchNormParams<T>,
    pattern: NMPattern,
    spec: ConvSpec<T>,
    variant: SpReVariant,
    refresh_period: usize,
    decay: T,
    reference: ReferenceMode,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> SpReBlock<T> {
    /// Builds a block around `w_main`, deriving `B`, `B^U` and `B^S` from it.
    ///
    /// 1×1 kernels always get variant `None`.
    pub fn new(
        name: impl Into<String>,
        w_main: Tensor4<T>,
        w_extra: Tensor4<T>,
        pattern: NMPattern,
        spec: ConvSpec<T>,
        opts: BlockOptions,
    ) -> Result<Self> {
        let name = name.into();
        let shape = w_main.shape();
        if w_extra.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "SpReBlock::new",
                left: shape.dims(),
                right: w_extra.shape().dims(),
            });
        }
        NMPattern::new(pattern.n, pattern.m)?;
        pattern.check_divisible(&name, shape.c_in)?;
        if spec.stride == 0 {
            return Err(Error::InvalidConvSpec("stride must be >= 1".into()));
        }
        let variant = if shape.is_pointwise() { SpReVariant::None } else { opts.variant };
        let b_main = nm_project_layer(&w_main, pattern, &name)?;
        let b_unstructured = magnitude_mask(&w_main, pattern.sparsity())?;
        let b_extra = build_variant_mask(&b_main, &b_unstructured, pattern, variant)?;
        Ok(Self {
            name,
            w_extra: if variant.has_extra() { w_extra } else { Tensor4::zeros(shape) },
            w_main,
            b_main,
            b_extra,
            b_unstructured,
            bn_main: BatchNormParams::new(shape.c_out),
            bn_extra: BatchNormParams::new(shape.c_out),
            pattern,
            spec,
            variant,
            refresh_period: opts.refresh_period,
            decay: c(opts.decay),
            reference: opts.reference,
            cache: None,
        })
    }

    /// Scratch-training init: He-normal main weights, extra weights at
    /// scale 1e-2.
    pub fn init_scratch<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: crate::Shape4,
        pattern: NMPattern,
        spec: ConvSpec<T>,
        opts: BlockOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (shape.c_in * shape.spatial()) as f64;
        let w_main = Tensor4::randn(shape, (2.0 / fan_in).sqrt(), rng);
        let w_extra = Tensor4::randn(shape, 1e-2, rng);
        Self::new(name, w_main, w_extra, pattern, spec, opts)
    }

    /// Reassembles a block from stored parts, validating its invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: impl Into<String>,
        w_main: Tensor4<T>,
        b_main: Mask4,
        w_extra: Tensor4<T>,
        b_extra: Mask4,
        b_unstructured: Option<Mask4>,
        bn_main: BatchNormParams<T>,
        bn_extra: BatchNormParams<T>,
        pattern: NMPattern,
        spec: ConvSpec<T>,
        opts: BlockOptions,
    ) -> Result<Self> {
        let name = name.into();
        let shape = w_main.shape();
        for (op, s) in [
            ("SpReBlock b_main", b_main.shape()),
            ("SpReBlock w_extra", w_extra.shape()),
            ("SpReBlock b_extra", b_extra.shape()),
        ] {
            if s != shape {
                return Err(Error::ShapeMismatch {
                    op,
                    left: shape.dims(),
                    right: s.dims(),
                });
            }
        }
        pattern.check_divisible(&name, shape.c_in)?;
        check_nm(&b_main, pattern)?;
        if !b_extra.subset_of(&b_main)? {
            return Err(Error::SubsetViolation { layer: name });
        }
        bn_main.validate()?;
        bn_extra.validate()?;
        for bn in [&bn_main, &bn_extra] {
            if bn.channels() != shape.c_out {
                return Err(Error::ChannelMismatch {
                    op: "SpReBlock batch norm",
                    expected: shape.c_out,
                    actual: bn.channels(),
                });
            }
        }
        let variant = if shape.is_pointwise() { SpReVariant::None } else { opts.variant };
        let b_unstructured = match b_unstructured {
            Some(m) => m,
            None => magnitude_mask(&w_main, pattern.sparsity())?,
        };
        Ok(Self {
            name,
            w_main,
            b_main,
            w_extra,
            b_extra,
            b_unstructured,
            bn_main,
            bn_extra,
            pattern,
            spec,
            variant,
            refresh_period: opts.refresh_period,
            decay: c(opts.decay),
            reference: opts.reference,
            cache: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn w_main(&self) -> &Tensor4<T> {
        &self.w_main
    }

    pub fn b_main(&self) -> &Mask4 {
        &self.b_main
    }

    pub fn w_extra(&self) -> &Tensor4<T> {
        &self.w_extra
    }

    pub fn b_extra(&self) -> &Mask4 {
        &self.b_extra
    }

    pub fn b_unstructured(&self) -> &Mask4 {
        &self.b_unstructured
    }

    pub fn bn_main(&self) -> &BatchNormParams<T> {
        &self.bn_main
    }

    pub fn bn_extra(&self) -> &BatchNormParams<T> {
        &self.bn_extra
    }

    pub fn bn_main_mut(&mut self) -> &mut BatchNormParams<T> {
        &mut self.bn_main
    }

    pub fn bn_extra_mut(&mut self) -> &mut BatchNormParams<T> {
        &mut self.bn_extra
    }

    pub fn pattern(&self) -> NMPattern {
        self.pattern
    }

    pub fn spec(&self) -> &ConvSpec<T> {
        &self.spec
    }

    pub fn variant(&self) -> SpReVariant {
        self.variant
    }

    pub fn refresh_period(&self) -> usize {
        self.refresh_period
    }

    pub fn set_refresh_period(&mut self, period: usize) {
        self.refresh_period = period;
    }

    pub fn decay(&self) -> T {
        self.decay
    }

    pub fn set_decay(&mut self, decay: T) {
        self.decay = decay;
    }

    pub fn reference_mode(&self) -> ReferenceMode {
        self.reference
    }

    /// Keeps the current `B^U` for all later refreshes.
    pub fn freeze_reference(&mut self) {
        self.reference = ReferenceMode::Frozen;
    }

    pub fn out_channels(&self) -> usize {
        self.w_main.shape().c_out
    }

    /// Overwrites the dense weights of both branches. Masks are left as
    /// they are until the next [`refresh_masks`](Self::refresh_masks).
    pub fn set_weights(&mut self, w_main: Tensor4<T>, w_extra: Tensor4<T>) -> Result<()> {
        let shape = self.w_main.shape();
        for w in [&w_main, &w_extra] {
            if w.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "SpReBlock::set_weights",
                    left: shape.dims(),
                    right: w.shape().dims(),
                });
            }
        }
        self.w_main = w_main;
        self.w_extra = if self.variant.has_extra() { w_extra } else { Tensor4::zeros(shape) };
        Ok(())
    }

    /// Effective main weight `B ⊙ W`.
    pub fn masked_main(&self) -> Tensor4<T> {
        apply_mask(&self.w_main, &self.b_main).expect("block masks match weights")
    }

    /// Effective extra weight `B^S ⊙ W^S`.
    pub fn masked_extra(&self) -> Tensor4<T> {
        apply_mask(&self.w_extra, &self.b_extra).expect("block masks match weights")
    }

    /// Checks the block invariants: `B` is N:M and `B^S ⊆ B`.
    pub fn check_invariants(&self) -> Result<()> {
        check_nm(&self.b_main, self.pattern)?;
        if !self.b_extra.subset_of(&self.b_main)? {
            return Err(Error::SubsetViolation {
                layer: self.name.clone(),
            });
        }
        Ok(())
    }

    /// Recomputes masks from the current weights when `step` is a multiple
    /// of the refresh period. Returns whether a refresh happened.
    pub fn refresh_masks(&mut self, step: usize) -> Result<bool> {
        if self.refresh_period == 0 || step % self.refresh_period != 0 {
            return Ok(false);
        }
        self.refresh_now()?;
        Ok(true)
    }

    /// Unconditional mask refresh.
    pub fn refresh_now(&mut self) -> Result<()> {
        self.b_main = nm_project_layer(&self.w_main, self.pattern, &self.name)?;
        if self.reference == ReferenceMode::Dynamic {
            self.b_unstructured = magnitude_mask(&self.w_main, self.pattern.sparsity())?;
        }
        self.b_extra = build_variant_mask(&self.b_main, &self.b_unstructured, self.pattern, self.variant)?;
        Ok(())
    }

    /// `BN(conv(B⊙W, x)) + BN(conv(B^S⊙W^S, x))`.
    ///
    /// Train mode updates running statistics and caches what the backward
    /// pass needs.
    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let main_pre = conv2d_forward(&self.masked_main(), &self.spec, x)?;
        let (mut y, main_cache) = self.bn_main.forward(&main_pre, mode)?;
        let mut extra_cache = None;
        if self.variant.has_extra() {
            let extra_pre = conv2d_forward(&self.masked_extra(), &self.spec, x)?;
            let (y_extra, cache) = self.bn_extra.forward(&extra_pre, mode)?;
            for (a, b) in y.data_mut().iter_mut().zip(y_extra.data()) {
                *a += *b;
            }
            extra_cache = cache;
        }
        self.cache = match (mode, main_cache) {
            (Mode::Train, Some(bn_main)) => Some(ForwardCache {
                x: x.clone(),
                bn_main,
                bn_extra: extra_cache,
            }),
            _ => None,
        };
        Ok(y)
    }

    /// Eval-mode forward that leaves the block untouched.
    pub fn forward_eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let main_pre = conv2d_forward(&self.masked_main(), &self.spec, x)?;
        let mut y = self.bn_main.forward_eval(&main_pre)?;
        if self.variant.has_extra() {
            let extra_pre = conv2d_forward(&self.masked_extra(), &self.spec, x)?;
            let y_extra = self.bn_extra.forward_eval(&extra_pre)?;
            for (a, b) in y.data_mut().iter_mut().zip(y_extra.data()) {
                *a += *b;
            }
        }
        Ok(y)
    }

    /// Backward through the cached train-mode forward.
    ///
    /// The weight gradient is taken through the masked weight, so it is
    /// `B ⊙ ∂L/∂(B⊙W)` on each branch; pruned main-branch weights
    /// additionally receive `decay · (1-B) ⊙ W`.
    pub fn backward(&self, grad_out: &FeatureMap<T>) -> Result<SpReGrads<T>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache("spre_backward_ste"))?;
        let bn_main = self.bn_main.backward(grad_out, Some(&cache.bn_main))?;
        let main = conv2d_backward_on(&self.masked_main(), &self.spec, &cache.x, &bn_main.grad_x, Some(&self.b_main))?;
        let mut w_main = main.grad_w;
        if self.decay != T::zero() {
            for ((g, &w), &bit) in w_main.data_mut().iter_mut().zip(self.w_main.data()).zip(self.b_main.bits()) {
                if bit == 0 {
                    *g += self.decay * w;
                }
            }
        }
        let mut grad_x = main.grad_x;
        let (mut w_extra, mut gamma_e, mut beta_e) = (None, None, None);
        if self.variant.has_extra() {
            let bn_cache = cache.bn_extra.as_ref().ok_or(Error::MissingCache("spre_backward_ste"))?;
            let bn_extra = self.bn_extra.backward(grad_out, Some(bn_cache))?;
            let extra = conv2d_backward_on(&self.masked_extra(), &self.spec, &cache.x, &bn_extra.grad_x, Some(&self.b_extra))?;
            for (a, b) in grad_x.data_mut().iter_mut().zip(extra.grad_x.data()) {
                *a += *b;
            }
            w_extra = Some(extra.grad_w);
            gamma_e = Some(bn_extra.grad_gamma);
            beta_e = Some(bn_extra.grad_beta);
        }
        Ok(SpReGrads {
            w_main,
            w_extra,
            bn_main_gamma: bn_main.grad_gamma,
            bn_main_beta: bn_main.grad_beta,
            bn_extra_gamma: gamma_e,
            bn_extra_beta: beta_e,
            x: grad_x,
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Parameters paired with their gradients, in a fixed order.
    pub fn params_with_grads<'a>(&'a mut self, grads: &'a SpReGrads<T>) -> Vec<(&'a mut [T], &'a [T])> {
        let mut out: Vec<(&mut [T], &[T])> = vec![
            (self.w_main.data_mut(), grads.w_main.data()),
            (&mut self.bn_main.gamma, &grads.bn_main_gamma),
            (&mut self.bn_main.beta, &grads.bn_main_beta),
        ];
        if let (Some(w), Some(g), Some(b)) = (&grads.w_extra, &grads.bn_extra_gamma, &grads.bn_extra_beta) {
            out.push((self.w_extra.data_mut(), w.data()));
            out.push((&mut self.bn_extra.gamma, g));
            out.push((&mut self.bn_extra.beta, b));
        }
        out
    }
}

pub fn spre_forward<T: Scalar>(block: &mut SpReBlock<T>, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
    block.forward(x, mode)
}

pub fn spre_backward_ste<T: Scalar>(block: &SpReBlock<T>, grad_out: &FeatureMap<T>) -> Result<SpReGrads<T>> {
    block.backward(grad_out)
}

pub fn refresh_masks<T: Scalar>(block: &mut SpReBlock<T>, step: usize) -> Result<bool> {
    block.refresh_masks(step)
}
