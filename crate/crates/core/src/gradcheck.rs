//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each case builds a random scalar loss `L = Σ out ⊙ R`, perturbs a sample
//! of coordinates by ±h and compares with the analytic gradient using the
//! norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`. Each check returns
//! the worst error over its random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::nn::{conv2d_backward, conv2d_forward, softmax_cross_entropy, BatchNormParams, ConvSpec, Linear, Mode};
use crate::sparsity::NMPattern;
use crate::spre::{BlockOptions, ReferenceMode, SpReBlock, SpReVariant};
use crate::tensor::{FeatureMap, Matrix, Shape4, Tensor4};

const H: f64 = 1e-6;
const PROBES: usize = 24;

/// Worst relative error of one check, and the tensor it occurred in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub cases: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    fn new() -> Self {
        Self {
            cases: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: &str, err: f64) {
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = err.max(self.max_rel_err);
            self.worst = what.to_string();
        }
    }
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative error of `analytic` against central differences of `loss` over
/// a sample of coordinates of `param`.
fn probe<F: FnMut(&[f64]) -> f64>(param: &[f64], analytic: &[f64], rng: &mut ChaCha8Rng, mut loss: F) -> f64 {
    assert_eq!(param.len(), analytic.len(), "gradient length");
    let idx: Vec<usize> = if param.len() <= PROBES {
        (0..param.len()).collect()
    } else {
        (0..PROBES).map(|_| rng.gen_range(0..param.len())).collect()
    };
    let mut p = param.to_vec();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for &i in &idx {
        let orig = p[i];
        p[i] = orig + H;
        let up = loss(&p);
        p[i] = orig - H;
        let down = loss(&p);
        p[i] = orig;
        a.push(analytic[i]);
        n.push((up - down) / (2.0 * H));
    }
    rel_err(&a, &n)
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_fm(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::uniform((n, c, h, w), -1.0, 1.0, rng)
}

fn fm_like(x: &FeatureMap<f64>, data: &[f64]) -> FeatureMap<f64> {
    let (n, c, h, w) = x.dims();
    FeatureMap::from_vec(n, c, h, w, data.to_vec()).expect("finite probe values")
}

/// Conv weight, bias and input gradients.
pub fn check_conv(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GradReport::new();
    for _ in 0..cases {
        let k = [1, 2, 3][rng.gen_range(0..3)];
        let shape = Shape4::new(rng.gen_range(1..4), rng.gen_range(1..4), k, k);
        let (stride, padding) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let hw = k + rng.gen_range(0..4);
        let batch = rng.gen_range(1..3);
        let x = rand_fm(&mut rng, batch, shape.c_in, hw, hw);
        let w = Tensor4::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
        let bias = rand_vec(&mut rng, shape.c_out, -1.0, 1.0);
        let spec = ConvSpec::new(stride, padding).with_bias(bias.clone());
        let out = conv2d_forward(&w, &spec, &x).unwrap();
        let r = rand_vec(&mut rng, out.data().len(), -1.0, 1.0);
        let g = conv2d_backward(&w, &spec, &x, &fm_like(&out, &r)).unwrap();

        let e = probe(w.data(), g.grad_w.data(), &mut rng, |p| {
            dot(conv2d_forward(&Tensor4::from_vec(shape, p.to_vec()).unwrap(), &spec, &x).unwrap().data(), &r)
        });
        rep.record("conv weight", e);
        let e = probe(x.data(), g.grad_x.data(), &mut rng, |p| {
            dot(conv2d_forward(&w, &spec, &fm_like(&x, p)).unwrap().data(), &r)
        });
        rep.record("conv input", e);
        let e = probe(&bias, g.grad_bias.as_deref().unwrap(), &mut rng, |p| {
            let spec = ConvSpec::new(stride, padding).with_bias(p.to_vec());
            dot(conv2d_forward(&w, &spec, &x).unwrap().data(), &r)
        });
        rep.record("conv bias", e);
        rep.cases += 1;
    }
    rep
}

/// Train-mode batch-norm input, gamma and beta gradients.
pub fn check_batchnorm(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GradReport::new();
    for _ in 0..cases {
        let ch = rng.gen_range(1..4);
        let (n, h, w) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..4));
        let x = rand_fm(&mut rng, n, ch, h, w);
        let mut bn = BatchNormParams::<f64>::new(ch);
        bn.gamma = rand_vec(&mut rng, ch, 0.5, 1.5);
        bn.beta = rand_vec(&mut rng, ch, -0.5, 0.5);
        let (out, cache) = bn.clone().forward_train(&x).unwrap();
        let r = rand_vec(&mut rng, out.data().len(), -1.0, 1.0);
        let g = bn.backward(&fm_like(&out, &r), Some(&cache)).unwrap();

        let run = |bn: &BatchNormParams<f64>, x: &FeatureMap<f64>| dot(bn.clone().forward_train(x).unwrap().0.data(), &r);
        rep.record("bn input", probe(x.data(), g.grad_x.data(), &mut rng, |p| run(&bn, &fm_like(&x, p))));
        let e = probe(&bn.gamma, &g.grad_gamma, &mut rng, |p| {
            run(&BatchNormParams { gamma: p.to_vec(), ..bn.clone() }, &x)
        });
        rep.record("bn gamma", e);
        let e = probe(&bn.beta, &g.grad_beta, &mut rng, |p| {
            run(&BatchNormParams { beta: p.to_vec(), ..bn.clone() }, &x)
        });
        rep.record("bn beta", e);
        rep.cases += 1;
    }
    rep
}

/// Linear weight, bias and input gradients.
pub fn check_linear(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GradReport::new();
    for _ in 0..cases {
        let (batch, inp, out) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let lin = Linear::<f64>::init(inp, out, &mut rng);
        let x = Matrix::from_vec(batch, inp, rand_vec(&mut rng, batch * inp, -1.0, 1.0)).unwrap();
        let y = lin.forward(&x).unwrap();
        let r = rand_vec(&mut rng, y.data().len(), -1.0, 1.0);
        let g = lin.backward(&x, &Matrix::from_vec(batch, out, r.clone()).unwrap()).unwrap();

        let run = |l: &Linear<f64>, x: &Matrix<f64>| dot(l.forward(x).unwrap().data(), &r);
        let e = probe(lin.weight.data(), g.grad_weight.data(), &mut rng, |p| {
            let weight = Matrix::from_vec(out, inp, p.to_vec()).unwrap();
            run(&Linear { weight, bias: lin.bias.clone() }, &x)
        });
        rep.record("linear weight", e);
        let e = probe(&lin.bias, &g.grad_bias, &mut rng, |p| {
            run(&Linear { weight: lin.weight.clone(), bias: p.to_vec() }, &x)
        });
        rep.record("linear bias", e);
        let e = probe(x.data(), g.grad_x.data(), &mut rng, |p| {
            run(&lin, &Matrix::from_vec(batch, inp, p.to_vec()).unwrap())
        });
        rep.record("linear input", e);
        rep.cases += 1;
    }
    rep
}

/// Mean softmax cross-entropy gradient with respect to the logits.
pub fn check_cross_entropy(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GradReport::new();
    for _ in 0..cases {
        let (batch, classes) = (rng.gen_range(1..6), rng.gen_range(2..8));
        let logits = rand_vec(&mut rng, batch * classes, -3.0, 3.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let m = Matrix::from_vec(batch, classes, logits.clone()).unwrap();
        let (_, grad) = softmax_cross_entropy(&m, &labels).unwrap();
        let e = probe(&logits, grad.data(), &mut rng, |p| {
            softmax_cross_entropy(&Matrix::from_vec(batch, classes, p.to_vec()).unwrap(), &labels).unwrap().0
        });
        rep.record("cross entropy", e);
        rep.cases += 1;
    }
    rep
}

fn rebuild(block: &SpReBlock<f64>) -> SpReBlock<f64> {
    SpReBlock::from_parts(
        block.name(),
        block.w_main().clone(),
        block.b_main().clone(),
        block.w_extra().clone(),
        block.b_extra().clone(),
        Some(block.b_unstructured().clone()),
        block.bn_main().clone(),
        block.bn_extra().clone(),
        block.pattern(),
        block.spec().clone(),
        BlockOptions {
            variant: block.variant(),
            refresh_period: 0,
            decay: block.decay(),
            reference: ReferenceMode::Frozen,
        },
    )
    .expect("block invariants hold")
}

/// `Σ out ⊙ R + λ/2 ‖(1 − B) ⊙ W‖²` with the masks held fixed; its exact
/// gradient is what the straight-through backward returns.
fn block_loss(block: &SpReBlock<f64>, x: &FeatureMap<f64>, r: &[f64], lambda: f64) -> f64 {
    let mut b = rebuild(block);
    let out = b.forward(x, Mode::Train).unwrap();
    let pruned: f64 = b
        .w_main()
        .data()
        .iter()
        .zip(b.b_main().bits())
        .filter(|(_, &bit)| bit == 0)
        .map(|(w, _)| w * w)
        .sum();
    dot(out.data(), r) + 0.5 * lambda * pruned
}

/// Straight-through backward of random SpRe blocks across patterns and
/// variants. `lambda = None` draws a positive decay per case.
///
/// Panics if an off-support main-branch gradient differs from `λ·w`.
pub fn check_ste(cases: usize, seed: u64, lambda: Option<f64>) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GradReport::new();
    for _ in 0..cases {
        let lambda = lambda.unwrap_or_else(|| rng.gen_range(1e-3..0.5));
        ste_case(&mut rng, lambda, &mut rep);
        rep.cases += 1;
    }
    rep
}

fn ste_case(rng: &mut ChaCha8Rng, lambda: f64, rep: &mut GradReport) {
    let patterns = [(2, 4), (1, 4), (1, 2), (2, 2)];
    let (n, m) = patterns[rng.gen_range(0..patterns.len())];
    let k = [1, 3][rng.gen_range(0..2)];
    let shape = Shape4::new(rng.gen_range(1..4), m * rng.gen_range(1..3), k, k);
    let variants = [SpReVariant::SpRe, SpReVariant::Same, SpReVariant::Inverse, SpReVariant::None];
    let variant = variants[rng.gen_range(0..variants.len())];
    let w_main = Tensor4::<f64>::uniform(shape, -1.0, 1.0, rng);
    let w_extra = Tensor4::<f64>::uniform(shape, -1.0, 1.0, rng);
    let opts = BlockOptions {
        variant,
        refresh_period: 0,
        decay: lambda,
        reference: ReferenceMode::Dynamic,
    };
    let spec = ConvSpec::new(rng.gen_range(1..3), k / 2);
    let pattern = NMPattern::new(n, m).unwrap();
    let mut block = SpReBlock::new("b", w_main, w_extra, pattern, spec, opts).unwrap();
    block.bn_main_mut().gamma = rand_vec(rng, shape.c_out, 0.5, 1.5);
    let hw = k + rng.gen_range(1..4);
    let batch = rng.gen_range(2..4);
    let x = rand_fm(rng, batch, shape.c_in, hw, hw);
    let out = block.forward(&x, Mode::Train).unwrap();
    let r = rand_vec(rng, out.data().len(), -1.0, 1.0);
    let g = block.backward(&fm_like(&out, &r)).unwrap();

    let with_weights = |main: &[f64], extra: &[f64]| {
        let mut b = rebuild(&block);
        let main = Tensor4::from_vec(shape, main.to_vec()).unwrap();
        b.set_weights(main, Tensor4::from_vec(shape, extra.to_vec()).unwrap()).unwrap();
        b
    };
    let tag = format!("ste {variant} {n}:{m} k={k}");
    let (wm, we) = (block.w_main().data().to_vec(), block.w_extra().data().to_vec());
    let e = probe(&wm, g.w_main.data(), rng, |p| block_loss(&with_weights(p, &we), &x, &r, lambda));
    rep.record(&format!("{tag} w_main"), e);
    let e = probe(x.data(), g.x.data(), rng, |p| block_loss(&block, &fm_like(&x, p), &r, lambda));
    rep.record(&format!("{tag} input"), e);
    let gamma = block.bn_main().gamma.clone();
    let e = probe(&gamma, &g.bn_main_gamma, rng, |p| {
        let mut b = rebuild(&block);
        b.bn_main_mut().gamma = p.to_vec();
        block_loss(&b, &x, &r, lambda)
    });
    rep.record(&format!("{tag} gamma"), e);
    if let (Some(gw), Some(gb)) = (&g.w_extra, &g.bn_extra_beta) {
        let e = probe(&we, gw.data(), rng, |p| block_loss(&with_weights(&wm, p), &x, &r, lambda));
        rep.record(&format!("{tag} w_extra"), e);
        let beta = block.bn_extra().beta.clone();
        let e = probe(&beta, gb, rng, |p| {
            let mut b = rebuild(&block);
            b.bn_extra_mut().beta = p.to_vec();
            block_loss(&b, &x, &r, lambda)
        });
        rep.record(&format!("{tag} extra beta"), e);
    }
    // off the support only the decay term remains
    for ((gv, &w), &bit) in g.w_main.data().iter().zip(block.w_main().data()).zip(block.b_main().bits()) {
        if bit == 0 {
            assert_eq!(*gv, lambda * w, "{tag}: off-support gradient");
        }
    }
}
