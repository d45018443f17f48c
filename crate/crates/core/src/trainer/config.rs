use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::DType;
use crate::sparsity::NMPattern;
use crate::spre::SpReVariant;

/// Plain conv-BN-ReLU stages, stride-2 downsampling between stages, global
/// average pooling and a linear head. The stem conv and the head are dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyCnnConfig {
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub blocks_per_stage: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub input_size: usize,
}

impl Default for TinyCnnConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            kernel: 3,
            blocks_per_stage: 1,
            classes: 10,
            in_channels: 3,
            input_size: 16,
        }
    }
}

impl TinyCnnConfig {
    pub fn validate(&self, pattern: Option<NMPattern>) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.widths.is_empty() {
            return bad("model.widths must not be empty".into());
        }
        if self.widths.contains(&0) || self.kernel == 0 || self.blocks_per_stage == 0 || self.in_channels == 0 {
            return bad("model sizes must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("model.classes = {} must be >= 2", self.classes));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("model.kernel = {} must be odd", self.kernel));
        }
        if let Some(p) = pattern {
            for &w in &self.widths {
                if w % p.m != 0 {
                    return bad(format!("width {w} not divisible by M = {} of pattern {p}", p.m));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Cosine decay from `lr` to 0 over all optimizer steps.
    Cosine,
    /// Multiply by `gamma` at each epoch in `milestones`.
    Step { milestones: Vec<usize>, gamma: f64 },
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Sparse training from random init with periodic mask refresh.
    Scratch,
    /// Dense pre-training, one-shot masks from the pre-trained weights,
    /// then fine-tuning with frozen masks.
    PretrainFinetune,
}

/// Which constraint the sparse conv layers train under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// N:M main branch plus the configured SpRe variant.
    Nm,
    /// Per-layer magnitude masks at `1 - n/m`.
    Unstructured,
    /// Magnitude masks at `1 - n/m` with equal sparsity at every kernel location.
    UniformSpatial,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        seed: u64,
        classes: usize,
        samples_per_class: usize,
        image_size: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Cifar10 {
        dir: String,
        #[serde(default = "default_cifar_mean")]
        mean: [f32; 3],
        #[serde(default = "default_cifar_std")]
        std: [f32; 3],
    },
}

fn default_noise() -> f64 {
    0.35
}

pub fn default_cifar_mean() -> [f32; 3] {
    [0.4914, 0.4822, 0.4465]
}

pub fn default_cifar_std() -> [f32; 3] {
    [0.2470, 0.2435, 0.2616]
}

/// Full training-run configuration; the JSON form rejects unknown keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: TinyCnnConfig,
    pub dataset: DatasetConfig,
    pub pattern: NMPattern,
    pub variant: SpReVariant,
    pub mask_kind: MaskKind,
    pub method: Method,
    pub epochs: usize,
    /// Dense epochs before masking; only used by `pretrain_finetune`.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Decay on pruned main-branch weights in the straight-through backward.
    pub ste_decay: f64,
    /// Optimizer steps between mask refreshes; `None` means once per epoch.
    pub refresh_period: Option<usize>,
    pub seed: u64,
    pub dtype: DType,
    /// Line-delimited JSON metrics output.
    pub metrics_path: Option<String>,
    pub checkpoint_path: Option<String>,
    /// CSV of per-layer spatial sparsity at the end of training.
    pub profile_path: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: TinyCnnConfig::default(),
            dataset: DatasetConfig::Synthetic {
                seed: 0,
                classes: 10,
                samples_per_class: 100,
                image_size: 16,
                noise: default_noise(),
            },
            pattern: NMPattern { n: 2, m: 4 },
            variant: SpReVariant::SpRe,
            mask_kind: MaskKind::Nm,
            method: Method::Scratch,
            epochs: 60,
            pretrain_epochs: 30,
            batch_size: 128,
            lr: 0.1,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            ste_decay: 2e-4,
            refresh_period: None,
            seed: 0,
            dtype: DType::F32,
            metrics_path: None,
            checkpoint_path: None,
            profile_path: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        NMPattern::new(self.pattern.n, self.pattern.m)
            .map_err(|_| Error::InvalidConfig(format!("invalid pattern {}", self.pattern)))?;
        let divisibility = match self.mask_kind {
            MaskKind::Nm => Some(self.pattern),
            _ => None,
        };
        self.model.validate(divisibility)?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 || self.ste_decay < 0.0 {
            return bad("decay coefficients must be non-negative".into());
        }
        if let LrSchedule::Step { gamma, .. } = &self.lr_schedule {
            if !(*gamma > 0.0) {
                return bad(format!("lr_schedule.gamma = {gamma} must be positive"));
            }
        }
        if let DatasetConfig::Synthetic { classes, image_size, .. } = &self.dataset {
            if *classes != self.model.classes {
                return bad(format!("dataset has {classes} classes, model has {}", self.model.classes));
            }
            if *image_size != self.model.input_size {
                return bad(format!("dataset image size {image_size} != model.input_size {}", self.model.input_size));
            }
        }
        if self.method == Method::PretrainFinetune && self.mask_kind != MaskKind::Nm {
            return bad("pretrain_finetune requires mask_kind = nm".into());
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` of `total_steps`, in epoch `epoch`.
    pub fn lr_at(&self, step: usize, total_steps: usize, epoch: usize) -> f64 {
        match &self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                if total_steps == 0 {
                    self.lr
                } else {
                    0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
                }
            }
            LrSchedule::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                self.lr * gamma.powi(passed as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_unknown_keys() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        assert!(TrainConfig::from_json(r#"{"epochs": 3, "bogus": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"model": {"widths": [16], "extra": 2}}"#).is_err());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg = TrainConfig::from_json(r#"{"epochs": 3, "pattern": {"n": 1, "m": 16}, "variant": "inverse"}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.variant, SpReVariant::Inverse);
        assert_eq!(cfg.batch_size, 128);
    }

    #[test]
    fn rejects_indivisible_widths() {
        let mut cfg = TrainConfig::default();
        cfg.model.widths = vec![16, 24];
        cfg.pattern = NMPattern { n: 1, m: 16 };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        cfg.mask_kind = MaskKind::Unstructured;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn schedules() {
        let mut cfg = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0, 100, 0) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(50, 100, 0) - 0.05).abs() < 1e-15);
        assert!(cfg.lr_at(100, 100, 0).abs() < 1e-15);
        cfg.lr_schedule = LrSchedule::Step {
            milestones: vec![2, 4],
            gamma: 0.1,
        };
        assert!((cfg.lr_at(0, 10, 3) - 0.01).abs() < 1e-15);
    }
}
