//! Training loops, evaluation and the paired uniform-spatial ablation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{metrics_jsonl, model_to_checkpoint, write_atomic, write_profiles_csv, EpochRecord};
use crate::nn::{softmax_cross_entropy, Mode, Sgd};
use crate::scalar::{c, DType, Scalar};
use crate::sparsity::{check_nm, pruned_count, spatial_sparsity, SparsityProfile};
use crate::spre::{BlockOptions, ReferenceMode, SpReBlock};
use crate::tensor::{Mask4, Tensor4};

use super::config::{DatasetConfig, MaskKind, Method, TrainConfig};
use super::data::{cifar10_load_with, synth_dataset_with_noise, Dataset, Split};
use super::model::{LayerPlan, MaskRule, SparseLayer, TinyCnn};

const EVAL_BATCH: usize = 256;

/// Live-mask profiles of every sparse layer at the end of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSnapshot {
    pub epoch: usize,
    pub profiles: Vec<SparsityProfile>,
}

/// Result of checking one layer's mask constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCheck {
    pub epoch: usize,
    pub layer: String,
    /// `None` when the constraint holds, otherwise the violation.
    pub violation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    /// Validation accuracy before any training.
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub profiles: Vec<ProfileSnapshot>,
    pub mask_checks: Vec<MaskCheck>,
    /// Layer refreshes performed during sparse training.
    pub refreshes: usize,
    /// Refreshes after which a layer broke its constraint.
    pub refresh_violations: Vec<String>,
}

impl RunMetrics {
    pub fn masks_valid(&self) -> bool {
        self.refresh_violations.is_empty() && self.mask_checks.iter().all(|m| m.violation.is_none())
    }
}

/// Checks a layer's declared mask constraint: N:M plus `B^S ⊆ B` for SpRe
/// blocks, exact zero counts for unstructured layers.
pub fn check_layer<T: Scalar>(layer: &SparseLayer<T>) -> Result<()> {
    let count_err = |name: &str, what: String| Err(Error::InvalidConfig(format!("layer `{name}`: {what}")));
    match layer {
        SparseLayer::SpRe(b) => b.check_invariants(),
        SparseLayer::Merged(m) => m.check_valid(),
        SparseLayer::Masked(l) => {
            let zeros = |m: &Mask4| m.bits().iter().filter(|&&b| b == 0).count();
            let s = l.mask.shape();
            match l.rule {
                MaskRule::Dense => match zeros(&l.mask) {
                    0 => Ok(()),
                    z => count_err(&l.name, format!("dense layer has {z} pruned weights")),
                },
                MaskRule::Magnitude(p) => {
                    let want = pruned_count(p, s.numel());
                    match zeros(&l.mask) {
                        z if z == want => Ok(()),
                        z => count_err(&l.name, format!("{z} pruned weights, expected {want}")),
                    }
                }
                MaskRule::Nm(pat) => check_nm(&l.mask, pat),
                MaskRule::UniformSpatial(p) => {
                    let per_loc = s.c_out * s.c_in;
                    let want = per_loc - pruned_count(1.0 - p, per_loc);
                    let prof = spatial_sparsity(&l.mask);
                    for (k, &v) in prof.values.iter().enumerate() {
                        let z = (v * per_loc as f64).round() as usize;
                        if z != want {
                            return count_err(&l.name, format!("{z} pruned at location {k}, expected {want}"));
                        }
                    }
                    Ok(())
                }
            }
        }
    }
}

pub fn layer_profiles<T: Scalar>(model: &TinyCnn<T>) -> Vec<SparsityProfile> {
    model
        .layers
        .iter()
        .map(|l| spatial_sparsity(l.live_mask()).with_name(l.name()))
        .collect()
}

/// Eval-mode argmax for every sample of `split`.
pub fn predictions<T: Scalar>(model: &TinyCnn<T>, data: &Dataset, split: &Split) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(split.len());
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch::<T>(split, chunk);
        out.extend(model.predict(&x)?.argmax_rows());
    }
    Ok(out)
}

/// Top-1 accuracy of `model` on `split` in eval mode.
pub fn evaluate<T: Scalar>(model: &TinyCnn<T>, data: &Dataset, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predictions(model, data, split)?;
    Ok(accuracy(&preds, &split.labels))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetConfig::Synthetic {
            seed,
            classes,
            samples_per_class,
            image_size,
            noise,
        } => synth_dataset_with_noise(*seed, *classes, *samples_per_class, *image_size, *noise),
        DatasetConfig::Cifar10 { dir, mean, std } => cifar10_load_with(dir, *mean, *std),
    }
}

fn check_dataset(config: &TrainConfig, data: &Dataset) -> Result<()> {
    let m = &config.model;
    if data.classes != m.classes || data.channels != m.in_channels || data.height != m.input_size || data.width != m.input_size {
        return Err(Error::InvalidConfig(format!(
            "dataset is {}x{}x{} with {} classes, model expects {}x{}x{} with {}",
            data.channels, data.height, data.width, data.classes, m.in_channels, m.input_size, m.input_size, m.classes
        )));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

struct Loop<'a> {
    config: &'a TrainConfig,
    data: &'a Dataset,
    rng: ChaCha8Rng,
    metrics: RunMetrics,
    epoch: usize,
}

impl Loop<'_> {
    fn steps_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.config.batch_size)
    }

    /// Runs `epochs` epochs on a fresh optimizer; `sparse` turns on mask
    /// refreshes and per-epoch mask checks.
    fn run<T: Scalar>(&mut self, model: &mut TinyCnn<T>, epochs: usize, sparse: bool) -> Result<()> {
        let cfg = self.config;
        let mut opt = Sgd::new(c::<T>(cfg.lr), c(cfg.momentum), c(cfg.weight_decay));
        let per_epoch = self.steps_per_epoch();
        let total = per_epoch * epochs;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        let mut step = 0;
        for e in 0..epochs {
            order.shuffle(&mut self.rng);
            let (mut loss_sum, mut hits) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                opt.lr = c(cfg.lr_at(step, total, e));
                let (x, labels) = self.data.batch::<T>(&self.data.train, chunk);
                let logits = model.forward(&x, Mode::Train)?;
                let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
                loss_sum += loss.as_f64() * chunk.len() as f64;
                hits += logits.argmax_rows().iter().zip(&labels).filter(|(p, l)| p == l).count();
                let grads = model.backward(&grad)?;
                model.apply_grads(&mut opt, &grads)?;
                step += 1;
                if sparse {
                    let n = model.refresh_masks(step)?;
                    if n > 0 {
                        self.metrics.refreshes += n;
                        for layer in &model.layers {
                            if let Err(err) = check_layer(layer) {
                                self.metrics.refresh_violations.push(format!("step {step}: {err}"));
                            }
                        }
                    }
                }
            }
            model.clear_caches();
            self.epoch += 1;
            let n = self.data.train.len() as f64;
            self.metrics.epochs.push(EpochRecord {
                epoch: self.epoch,
                loss: loss_sum / n,
                train_acc: hits as f64 / n,
                val_acc: evaluate(model, self.data, &self.data.val)?,
            });
            if sparse {
                self.snapshot(model);
            }
        }
        Ok(())
    }

    fn snapshot<T: Scalar>(&mut self, model: &TinyCnn<T>) {
        for layer in &model.layers {
            self.metrics.mask_checks.push(MaskCheck {
                epoch: self.epoch,
                layer: layer.name().to_string(),
                violation: check_layer(layer).err().map(|e| e.to_string()),
            });
        }
        self.metrics.profiles.push(ProfileSnapshot {
            epoch: self.epoch,
            profiles: layer_profiles(model),
        });
    }
}

/// Replaces every dense layer by a SpRe block built one-shot from its
/// trained weights: frozen reference, no refresh, zero extra weights and
/// the trained batch norm on the main branch.
pub fn sparsify_pretrained<T: Scalar>(model: &mut TinyCnn<T>, config: &TrainConfig) -> Result<()> {
    let layers = std::mem::take(&mut model.layers);
    model.layers = layers
        .into_iter()
        .map(|layer| match layer {
            SparseLayer::Masked(l) => {
                let shape = l.w.shape();
                let mut block = SpReBlock::new(
                    l.name.clone(),
                    l.w,
                    Tensor4::zeros(shape),
                    config.pattern,
                    l.spec,
                    BlockOptions {
                        variant: config.variant,
                        refresh_period: 0,
                        decay: config.ste_decay,
                        reference: ReferenceMode::Frozen,
                    },
                )?;
                *block.bn_main_mut() = l.bn;
                Ok(SparseLayer::SpRe(block))
            }
            other => Ok(other),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}

/// Builds, trains and evaluates a model on `data`.
///
/// With `epochs = 0` (and no pre-training) the metrics hold only the
/// initial evaluation.
pub fn train_on<T: Scalar>(config: &TrainConfig, data: &Dataset) -> Result<(TinyCnn<T>, RunMetrics)> {
    config.validate()?;
    check_dataset(config, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = data.train.len().div_ceil(config.batch_size);
    let kind = match config.method {
        Method::Scratch => config.mask_kind,
        Method::PretrainFinetune => MaskKind::Dense,
    };
    let plan = LayerPlan {
        kind,
        pattern: config.pattern,
        variant: config.variant,
        decay: config.ste_decay,
        refresh_period: config.refresh_period.unwrap_or(per_epoch),
    };
    let mut model = TinyCnn::<T>::init(&config.model, plan, &mut rng)?;
    let mut lp = Loop {
        config,
        data,
        rng,
        metrics: RunMetrics::default(),
        epoch: 0,
    };
    if config.method == Method::PretrainFinetune {
        lp.run(&mut model, config.pretrain_epochs, false)?;
        sparsify_pretrained(&mut model, config)?;
    }
    lp.metrics.initial_accuracy = evaluate(&model, data, &data.val)?;
    lp.snapshot(&model);
    lp.run(&mut model, config.epochs, true)?;
    lp.metrics.final_accuracy = evaluate(&model, data, &data.val)?;
    Ok((model, lp.metrics))
}

/// Writes the configured metrics, checkpoint and profile outputs.
pub fn write_outputs<T: Scalar>(config: &TrainConfig, model: &TinyCnn<T>, metrics: &RunMetrics) -> Result<()> {
    if let Some(path) = &config.metrics_path {
        write_atomic(path, metrics_jsonl(&metrics.epochs)?.as_bytes())?;
    }
    if let Some(path) = &config.checkpoint_path {
        model_to_checkpoint(model)?.save(path)?;
    }
    if let Some(path) = &config.profile_path {
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, &layer_profiles(model))?;
        write_atomic(path, &buf)?;
    }
    Ok(())
}

fn train_typed<T: Scalar>(config: &TrainConfig, data: &Dataset) -> Result<RunMetrics> {
    let (model, metrics) = train_on::<T>(config, data)?;
    write_outputs(config, &model, &metrics)?;
    Ok(metrics)
}

/// Loads the configured dataset, trains at the configured precision and
/// writes the configured outputs.
pub fn train(config: &TrainConfig) -> Result<RunMetrics> {
    config.validate()?;
    let data = load_dataset(config)?;
    match config.dtype {
        DType::F32 => train_typed::<f32>(config, &data),
        DType::F64 => train_typed::<f64>(config, &data),
    }
}

/// Paired unstructured runs at `p = 1 - n/m`: free magnitude masks and
/// uniform-spatial masks, same seed and schedule. Returns `(free, uniform)`.
pub fn run_uniform_ablation(config: &TrainConfig) -> Result<(RunMetrics, RunMetrics)> {
    let data = load_dataset(config)?;
    run_uniform_ablation_on(config, &data)
}

pub fn run_uniform_ablation_on(config: &TrainConfig, data: &Dataset) -> Result<(RunMetrics, RunMetrics)> {
    let with = |kind| TrainConfig {
        mask_kind: kind,
        method: Method::Scratch,
        ..config.clone()
    };
    let run = |cfg: &TrainConfig| match cfg.dtype {
        DType::F32 => train_on::<f32>(cfg, data).map(|r| r.1),
        DType::F64 => train_on::<f64>(cfg, data).map(|r| r.1),
    };
    Ok((run(&with(MaskKind::Unstructured))?, run(&with(MaskKind::UniformSpatial))?))
}
