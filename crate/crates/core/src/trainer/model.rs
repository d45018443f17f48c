//! The desk-scale CNN: a dense stem, masked conv-BN-ReLU stages, global
//! average pooling and a dense linear head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    conv2d_backward_on, conv2d_forward, global_avg_pool_backward, global_avg_pool_forward, relu_backward,
    relu_forward, BatchNormParams, BnCache, ConvSpec, Linear, LinearGrads, Mode, Sgd,
};
use crate::reparam::{merge_branches, MergedConv};
use crate::scalar::{c, Scalar};
use crate::sparsity::{magnitude_mask, nm_project, uniform_spatial_mask, NMPattern};
use crate::spre::{BlockOptions, ReferenceMode, SpReBlock, SpReGrads, SpReVariant};
use crate::tensor::{apply_mask, FeatureMap, Mask4, Matrix, Shape4, Tensor4};

use super::config::{MaskKind, TinyCnnConfig};

/// How a single-branch layer derives its mask from its weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskRule {
    Dense,
    Magnitude(f64),
    UniformSpatial(f64),
    /// Single-branch N:M projection, as produced by `project`.
    Nm(NMPattern),
}

impl MaskRule {
    pub fn build<T: Scalar>(self, w: &Tensor4<T>) -> Result<Mask4> {
        match self {
            MaskRule::Dense => Ok(Mask4::ones(w.shape())),
            MaskRule::Magnitude(p) => magnitude_mask(w, p),
            MaskRule::UniformSpatial(p) => uniform_spatial_mask(w, p),
            MaskRule::Nm(pat) => nm_project(w, pat),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            MaskRule::Dense => 0,
            MaskRule::Magnitude(_) => 1,
            MaskRule::UniformSpatial(_) => 2,
            MaskRule::Nm(_) => 5,
        }
    }

    pub fn sparsity(self) -> f64 {
        match self {
            MaskRule::Dense => 0.0,
            MaskRule::Magnitude(p) | MaskRule::UniformSpatial(p) => p,
            MaskRule::Nm(pat) => pat.sparsity(),
        }
    }
}

/// Single masked conv followed by batch norm.
#[derive(Clone)]
pub struct MaskedConvBn<T> {
    pub name: String,
    pub w: Tensor4<T>,
    pub mask: Mask4,
    pub bn: BatchNormParams<T>,
    pub spec: ConvSpec<T>,
    pub rule: MaskRule,
    pub decay: T,
    pub refresh_period: usize,
    cache: Option<(FeatureMap<T>, BnCache<T>)>,
}

pub struct MaskedGrads<T> {
    pub w: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub x: FeatureMap<T>,
}

impl<T: Scalar> MaskedConvBn<T> {
    pub fn new(name: impl Into<String>, w: Tensor4<T>, spec: ConvSpec<T>, rule: MaskRule, decay: f64, refresh_period: usize) -> Result<Self> {
        let mask = rule.build(&w)?;
        Ok(Self {
            name: name.into(),
            bn: BatchNormParams::new(w.shape().c_out),
            w,
            mask,
            spec,
            rule,
            decay: c(decay),
            refresh_period,
            cache: None,
        })
    }

    /// Rebuilds a layer from stored parts; the mask is taken as given.
    pub fn from_parts(
        name: impl Into<String>,
        w: Tensor4<T>,
        mask: Mask4,
        bn: BatchNormParams<T>,
        spec: ConvSpec<T>,
        rule: MaskRule,
    ) -> Result<Self> {
        if mask.shape() != w.shape() {
            return Err(Error::ShapeMismatch {
                op: "MaskedConvBn::from_parts",
                left: w.shape().dims(),
                right: mask.shape().dims(),
            });
        }
        Ok(Self {
            name: name.into(),
            w,
            mask,
            bn,
            spec,
            rule,
            decay: T::zero(),
            refresh_period: 0,
            cache: None,
        })
    }

    pub fn masked(&self) -> Tensor4<T> {
        apply_mask(&self.w, &self.mask).expect("mask matches weights")
    }

    fn without_cache(&self) -> Self {
        let mut out = self.clone();
        out.cache = None;
        out
    }

    pub fn refresh_masks(&mut self, step: usize) -> Result<bool> {
        if self.rule == MaskRule::Dense || self.refresh_period == 0 || step % self.refresh_period != 0 {
            return Ok(false);
        }
        self.mask = self.rule.build(&self.w)?;
        Ok(true)
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let pre = conv2d_forward(&self.masked(), &self.spec, x)?;
        let (y, cache) = self.bn.forward(&pre, mode)?;
        self.cache = cache.map(|bc| (x.clone(), bc));
        Ok(y)
    }

    pub fn forward_eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.bn.forward_eval(&conv2d_forward(&self.masked(), &self.spec, x)?)
    }

    /// Same straight-through rule as the SpRe main branch.
    pub fn backward(&self, grad_out: &FeatureMap<T>) -> Result<MaskedGrads<T>> {
        let (x, bn_cache) = self.cache.as_ref().ok_or(Error::MissingCache("masked_conv_backward"))?;
        let bn = self.bn.backward(grad_out, Some(bn_cache))?;
        let conv = conv2d_backward_on(&self.masked(), &self.spec, x, &bn.grad_x, Some(&self.mask))?;
        let mut gw = conv.grad_w;
        if self.decay != T::zero() {
            for ((g, &w), &bit) in gw.data_mut().iter_mut().zip(self.w.data()).zip(self.mask.bits()) {
                if bit == 0 {
                    *g += self.decay * w;
                }
            }
        }
        Ok(MaskedGrads {
            w: gw,
            gamma: bn.grad_gamma,
            beta: bn.grad_beta,
            x: conv.grad_x,
        })
    }

    fn params_with_grads<'a>(&'a mut self, g: &'a MaskedGrads<T>) -> Vec<(&'a mut [T], &'a [T])> {
        vec![
            (self.w.data_mut(), g.w.data()),
            (&mut self.bn.gamma, &g.gamma),
            (&mut self.bn.beta, &g.beta),
        ]
    }
}

pub enum SparseLayer<T> {
    Masked(MaskedConvBn<T>),
    SpRe(SpReBlock<T>),
    /// Inference-only merged form of a SpRe block.
    Merged(MergedConv<T>),
}

pub enum LayerGrads<T> {
    Masked(MaskedGrads<T>),
    SpRe(SpReGrads<T>),
}

impl<T: Scalar> LayerGrads<T> {
    fn x(&self) -> &FeatureMap<T> {
        match self {
            LayerGrads::Masked(g) => &g.x,
            LayerGrads::SpRe(g) => &g.x,
        }
    }
}

impl<T: Scalar> SparseLayer<T> {
    pub fn name(&self) -> &str {
        match self {
            SparseLayer::Masked(l) => &l.name,
            SparseLayer::SpRe(b) => b.name(),
            SparseLayer::Merged(m) => &m.name,
        }
    }

    pub fn shape(&self) -> Shape4 {
        match self {
            SparseLayer::Masked(l) => l.w.shape(),
            SparseLayer::SpRe(b) => b.w_main().shape(),
            SparseLayer::Merged(m) => m.w_bar.shape(),
        }
    }

    /// The mask the deployed layer carries.
    pub fn live_mask(&self) -> &Mask4 {
        match self {
            SparseLayer::Masked(l) => &l.mask,
            SparseLayer::SpRe(b) => b.b_main(),
            SparseLayer::Merged(m) => &m.mask,
        }
    }

    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        match self {
            SparseLayer::Masked(l) => l.forward(x, mode),
            SparseLayer::SpRe(b) => b.forward(x, mode),
            SparseLayer::Merged(m) => match mode {
                Mode::Eval => m.forward(x),
                Mode::Train => Err(Error::InvalidConfig(format!("merged layer `{}` cannot be trained", m.name))),
            },
        }
    }

    fn forward_eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        match self {
            SparseLayer::Masked(l) => l.forward_eval(x),
            SparseLayer::SpRe(b) => b.forward_eval(x),
            SparseLayer::Merged(m) => m.forward(x),
        }
    }

    fn backward(&self, g: &FeatureMap<T>) -> Result<LayerGrads<T>> {
        match self {
            SparseLayer::Masked(l) => l.backward(g).map(LayerGrads::Masked),
            SparseLayer::SpRe(b) => b.backward(g).map(LayerGrads::SpRe),
            SparseLayer::Merged(_) => Err(Error::MissingCache("merged layer backward")),
        }
    }

    pub fn refresh_masks(&mut self, step: usize) -> Result<bool> {
        match self {
            SparseLayer::Masked(l) => l.refresh_masks(step),
            SparseLayer::SpRe(b) => b.refresh_masks(step),
            SparseLayer::Merged(_) => Ok(false),
        }
    }
}

pub struct ModelGrads<T> {
    stem: MaskedGrads<T>,
    layers: Vec<LayerGrads<T>>,
    head: LinearGrads<T>,
}

struct ForwardTrace<T> {
    /// Pre-ReLU outputs of the stem and of every sparse layer.
    pre_relu: Vec<FeatureMap<T>>,
    pooled_from: (usize, usize, usize, usize),
    pooled: Matrix<T>,
}

pub struct TinyCnn<T> {
    pub config: TinyCnnConfig,
    pub stem: MaskedConvBn<T>,
    pub layers: Vec<SparseLayer<T>>,
    pub head: Linear<T>,
    trace: Option<ForwardTrace<T>>,
}

/// Per-layer construction settings.
#[derive(Debug, Clone, Copy)]
pub struct LayerPlan {
    pub kind: MaskKind,
    pub pattern: NMPattern,
    pub variant: SpReVariant,
    pub decay: f64,
    pub refresh_period: usize,
}

impl<T: Scalar> TinyCnn<T> {
    /// `(name, shape, stride)` of every sparse layer in order.
    pub fn layer_layout(config: &TinyCnnConfig) -> Vec<(String, Shape4, usize)> {
        let k = config.kernel;
        let mut out = Vec::new();
        let mut c_prev = config.widths[0];
        for (s, &width) in config.widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                out.push((format!("s{s}b{b}"), Shape4::new(width, c_prev, k, k), stride));
                c_prev = width;
            }
        }
        out
    }

    /// Random init. The RNG is consumed identically for every layer kind, so
    /// runs that differ only in masking start from the same weights.
    pub fn init<R: Rng + ?Sized>(config: &TinyCnnConfig, plan: LayerPlan, rng: &mut R) -> Result<Self> {
        config.validate(match plan.kind {
            MaskKind::Nm => Some(plan.pattern),
            _ => None,
        })?;
        let k = config.kernel;
        let pad = k / 2;
        let he = |shape: Shape4| (2.0 / (shape.c_in * shape.spatial()) as f64).sqrt();
        let stem_shape = Shape4::new(config.widths[0], config.in_channels, k, k);
        let stem_w = Tensor4::randn(stem_shape, he(stem_shape), rng);
        let stem = MaskedConvBn::new("stem", stem_w, ConvSpec::new(1, pad), MaskRule::Dense, 0.0, 0)?;
        let mut layers = Vec::new();
        for (name, shape, stride) in Self::layer_layout(config) {
            let w_main = Tensor4::randn(shape, he(shape), rng);
            let w_extra = Tensor4::randn(shape, 1e-2, rng);
            let spec = ConvSpec::new(stride, pad);
            let p = plan.pattern.sparsity();
            let layer = match plan.kind {
                MaskKind::Nm => SparseLayer::SpRe(SpReBlock::new(
                    name,
                    w_main,
                    w_extra,
                    plan.pattern,
                    spec,
                    BlockOptions {
                        variant: plan.variant,
                        refresh_period: plan.refresh_period,
                        decay: plan.decay,
                        reference: ReferenceMode::Dynamic,
                    },
                )?),
                MaskKind::Dense => {
                    SparseLayer::Masked(MaskedConvBn::new(name, w_main, spec, MaskRule::Dense, plan.decay, 0)?)
                }
                MaskKind::Unstructured => SparseLayer::Masked(MaskedConvBn::new(
                    name,
                    w_main,
                    spec,
                    MaskRule::Magnitude(p),
                    plan.decay,
                    plan.refresh_period,
                )?),
                MaskKind::UniformSpatial => SparseLayer::Masked(MaskedConvBn::new(
                    name,
                    w_main,
                    spec,
                    MaskRule::UniformSpatial(p),
                    plan.decay,
                    plan.refresh_period,
                )?),
            };
            layers.push(layer);
        }
        let last = *config.widths.last().expect("validated non-empty");
        let head = Linear::init(last, config.classes, rng);
        Ok(Self {
            config: config.clone(),
            stem,
            layers,
            head,
            trace: None,
        })
    }

    pub fn from_parts(config: TinyCnnConfig, stem: MaskedConvBn<T>, layers: Vec<SparseLayer<T>>, head: Linear<T>) -> Self {
        Self {
            config,
            stem,
            layers,
            head,
            trace: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<Matrix<T>> {
        let mut pre_relu = Vec::with_capacity(self.layers.len() + 1);
        let s = self.stem.forward(x, mode)?;
        let mut h = relu_forward(&s);
        pre_relu.push(s);
        for layer in &mut self.layers {
            let z = layer.forward(&h, mode)?;
            h = relu_forward(&z);
            pre_relu.push(z);
        }
        let pooled = global_avg_pool_forward(&h);
        let logits = self.head.forward(&pooled)?;
        self.trace = match mode {
            Mode::Train => Some(ForwardTrace {
                pre_relu,
                pooled_from: h.dims(),
                pooled,
            }),
            Mode::Eval => None,
        };
        Ok(logits)
    }

    /// Eval-mode logits without touching any cached state.
    pub fn predict(&self, x: &FeatureMap<T>) -> Result<Matrix<T>> {
        let mut h = relu_forward(&self.stem.forward_eval(x)?);
        for layer in &self.layers {
            h = relu_forward(&layer.forward_eval(&h)?);
        }
        self.head.forward(&global_avg_pool_forward(&h))
    }

    pub fn backward(&self, grad_logits: &Matrix<T>) -> Result<ModelGrads<T>> {
        let trace = self.trace.as_ref().ok_or(Error::MissingCache("model backward"))?;
        let head = self.head.backward(&trace.pooled, grad_logits)?;
        let mut g = global_avg_pool_backward(trace.pooled_from, &head.grad_x)?;
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let gz = relu_backward(&trace.pre_relu[k + 1], &g)?;
            let lg = layer.backward(&gz)?;
            g = lg.x().clone();
            layer_grads.push(lg);
        }
        layer_grads.reverse();
        let gz = relu_backward(&trace.pre_relu[0], &g)?;
        let stem = self.stem.backward(&gz)?;
        Ok(ModelGrads {
            stem,
            layers: layer_grads,
            head,
        })
    }

    /// Applies one optimizer step; parameters are visited in a fixed order.
    pub fn apply_grads(&mut self, opt: &mut Sgd<T>, grads: &ModelGrads<T>) -> Result<()> {
        let mut slot = 0;
        for (p, g) in self.stem.params_with_grads(&grads.stem) {
            opt.update(slot, p, g)?;
            slot += 1;
        }
        for (layer, lg) in self.layers.iter_mut().zip(&grads.layers) {
            let pairs = match (layer, lg) {
                (SparseLayer::Masked(l), LayerGrads::Masked(g)) => l.params_with_grads(g),
                (SparseLayer::SpRe(b), LayerGrads::SpRe(g)) => b.params_with_grads(g),
                _ => return Err(Error::MissingCache("gradient/layer kind mismatch")),
            };
            for (p, g) in pairs {
                opt.update(slot, p, g)?;
                slot += 1;
            }
        }
        opt.update(slot, self.head.weight.data_mut(), grads.head.grad_weight.data())?;
        opt.update(slot + 1, &mut self.head.bias, &grads.head.grad_bias)?;
        Ok(())
    }

    /// Refreshes every layer whose period divides `step`; returns how many
    /// layers refreshed.
    pub fn refresh_masks(&mut self, step: usize) -> Result<usize> {
        let mut n = 0;
        for layer in &mut self.layers {
            n += layer.refresh_masks(step)? as usize;
        }
        Ok(n)
    }

    /// Replaces every SpRe block by its merged single-conv form.
    pub fn merged(&self) -> Result<TinyCnn<T>> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                SparseLayer::SpRe(b) => merge_branches(b).map(SparseLayer::Merged),
                SparseLayer::Masked(m) => Ok(SparseLayer::Masked(m.without_cache())),
                SparseLayer::Merged(m) => Ok(SparseLayer::Merged(m.clone())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TinyCnn {
            config: self.config.clone(),
            stem: self.stem.without_cache(),
            layers,
            head: self.head.clone(),
            trace: None,
        })
    }

    pub fn clear_caches(&mut self) {
        self.trace = None;
        self.stem.cache = None;
        for l in &mut self.layers {
            match l {
                SparseLayer::Masked(m) => m.cache = None,
                SparseLayer::SpRe(b) => b.clear_cache(),
                SparseLayer::Merged(_) => {}
            }
        }
    }
}
