//! Labeled image datasets: a deterministic procedural generator and the
//! CIFAR-10 binary-format loader.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// Images stored channel-first as `f32`, one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: Split,
    pub val: Split,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Gathers `indices` of `split` into a batch.
    pub fn batch<T: Scalar>(&self, split: &Split, indices: &[usize]) -> (FeatureMap<T>, Vec<usize>) {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(split.images[i * per..(i + 1) * per].iter().map(|&v| T::from_f64_lossy(v as f64)));
            labels.push(split.labels[i]);
        }
        let fm = FeatureMap::from_vec(indices.len(), self.channels, self.height, self.width, data)
            .expect("dataset images are finite");
        (fm, labels)
    }

    /// Little-endian bytes of every image and label, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for split in [&self.train, &self.val] {
            for v in &split.images {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &l in &split.labels {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        out
    }
}

/// Procedural dataset of oriented strokes.
///
/// Class `k` draws a stroke at angle `π·k/classes` through a jittered center,
/// with random length, width, per-channel color and additive Gaussian noise,
/// so color and position carry no label information. Each class is split
/// 80/20 into train and validation; both splits are shuffled.
pub fn synth_dataset(seed: u64, classes: usize, samples_per_class: usize, image_size: usize) -> Result<Dataset> {
    synth_dataset_with_noise(seed, classes, samples_per_class, image_size, 0.35)
}

pub fn synth_dataset_with_noise(
    seed: u64,
    classes: usize,
    samples_per_class: usize,
    image_size: usize,
    noise: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig(format!("synthetic dataset needs >= 2 classes, got {classes}")));
    }
    if image_size < 4 {
        return Err(Error::InvalidConfig(format!("image size {image_size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n_train = (samples_per_class * 4) / 5;
    let s = image_size as f64;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for k in 0..classes {
        let theta = std::f64::consts::PI * k as f64 / classes as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        for j in 0..samples_per_class {
            let cx = s / 2.0 + rng.gen_range(-s / 6.0..s / 6.0);
            let cy = s / 2.0 + rng.gen_range(-s / 6.0..s / 6.0);
            let half_len = rng.gen_range(0.25 * s..0.45 * s);
            let width = rng.gen_range(0.6..1.2);
            let color: [f64; 3] = [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)];
            let mut img = vec![0f32; 3 * image_size * image_size];
            for y in 0..image_size {
                for x in 0..image_size {
                    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let along = px * dx + py * dy;
                    let perp = -px * dy + py * dx;
                    let body = (-(perp * perp) / (2.0 * width * width)).exp();
                    let fade = if along.abs() <= half_len {
                        1.0
                    } else {
                        (-(along.abs() - half_len).powi(2) / 2.0).exp()
                    };
                    let v = body * fade;
                    for (ch, col) in color.iter().enumerate() {
                        img[(ch * image_size + y) * image_size + x] = (col * v + gauss.sample(&mut rng)) as f32;
                    }
                }
            }
            if j < n_train {
                train.push((img, k));
            } else {
                val.push((img, k));
            }
        }
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    let pack = |items: Vec<(Vec<f32>, usize)>| {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (img, l) in items {
            images.extend(img);
            labels.push(l);
        }
        Split { images, labels }
    };
    Ok(Dataset {
        classes,
        channels: 3,
        height: image_size,
        width: image_size,
        train: pack(train),
        val: pack(val),
    })
}

pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Parses one CIFAR-10 binary batch holding exactly `records` records,
/// appending normalized channel-first pixels and labels to `out`.
pub fn parse_cifar_batch(bytes: &[u8], records: usize, path: &str, mean: [f32; 3], std: [f32; 3], out: &mut Split) -> Result<()> {
    let expected = records * CIFAR_RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::ShortFile {
            path: path.to_string(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    out.images.reserve(records * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::LabelOutOfRange { label, classes: 10 });
        }
        out.labels.push(label);
        for (k, &px) in rec[1..].iter().enumerate() {
            let ch = k / 1024;
            out.images.push((px as f32 / 255.0 - mean[ch]) / std[ch]);
        }
    }
    Ok(())
}

/// Loads the five training batches and the test batch from `dir`.
pub fn cifar10_load(dir: impl AsRef<Path>) -> Result<Dataset> {
    cifar10_load_with(dir, super::config::default_cifar_mean(), super::config::default_cifar_std())
}

pub fn cifar10_load_with(dir: impl AsRef<Path>, mean: [f32; 3], std: [f32; 3]) -> Result<Dataset> {
    let dir = dir.as_ref();
    let read = |name: &str, out: &mut Split| -> Result<()> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        parse_cifar_batch(&bytes, CIFAR_RECORDS_PER_FILE, &path.display().to_string(), mean, std, out)
    };
    let mut train = Split {
        images: Vec::new(),
        labels: Vec::new(),
    };
    for name in CIFAR_TRAIN_FILES {
        read(name, &mut train)?;
    }
    let mut val = Split {
        images: Vec::new(),
        labels: Vec::new(),
    };
    read(CIFAR_TEST_FILE, &mut val)?;
    Ok(Dataset {
        classes: 10,
        channels: 3,
        height: 32,
        width: 32,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_dataset(7, 4, 10, 12).unwrap();
        let b = synth_dataset(7, 4, 10, 12).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = synth_dataset(8, 4, 10, 12).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn synthetic_labels_uniform_and_split() {
        let d = synth_dataset(1, 5, 20, 12).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (80, 20));
        for split in [&d.train, &d.val] {
            let mut hist = vec![0; 5];
            split.labels.iter().for_each(|&l| hist[l] += 1);
            assert!(hist.iter().all(|&h| h == split.len() / 5));
        }
        assert_eq!(d.train.images.len(), 80 * 3 * 144);
    }

    #[test]
    fn synthetic_rejects_single_class() {
        assert!(synth_dataset(0, 1, 10, 12).is_err());
    }

    fn fake_records(n: usize) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(n * CIFAR_RECORD_BYTES);
        for r in 0..n {
            bytes.push((r % 10) as u8);
            bytes.extend((0..3072).map(|k| ((k + r) % 256) as u8));
        }
        bytes
    }

    #[test]
    fn parses_records() {
        let mut out = Split {
            images: Vec::new(),
            labels: Vec::new(),
        };
        parse_cifar_batch(&fake_records(3), 3, "x", [0.0; 3], [1.0; 3], &mut out).unwrap();
        assert_eq!(out.labels, vec![0, 1, 2]);
        assert!(out.labels.iter().all(|&l| l < 10));
        assert_eq!(out.images.len(), 3 * 3072);
        assert_eq!(out.images[1], 1.0 / 255.0);
        assert!(out.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn short_file_names_path_and_sizes() {
        let mut out = Split {
            images: Vec::new(),
            labels: Vec::new(),
        };
        let err = parse_cifar_batch(&fake_records(2), 3, "data_batch_9.bin", [0.0; 3], [1.0; 3], &mut out).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("data_batch_9.bin") && msg.contains("9219") && msg.contains("6146"), "{msg}");
    }

    #[test]
    fn loads_directory() {
        let dir = tempfile::tempdir().unwrap();
        let full = fake_records(CIFAR_RECORDS_PER_FILE);
        for name in CIFAR_TRAIN_FILES {
            std::fs::write(dir.path().join(name), &full).unwrap();
        }
        std::fs::write(dir.path().join(CIFAR_TEST_FILE), &full[..full.len() - 5]).unwrap();
        let err = cifar10_load(dir.path()).unwrap_err();
        assert!(err.to_string().contains(CIFAR_TEST_FILE));

        std::fs::write(dir.path().join(CIFAR_TEST_FILE), &full).unwrap();
        let d = cifar10_load(dir.path()).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (50_000, 10_000));
        assert!(d.train.labels[0] < 10);

        std::fs::remove_file(dir.path().join("data_batch_3.bin")).unwrap();
        assert!(cifar10_load(dir.path()).unwrap_err().to_string().contains("data_batch_3.bin"));
    }
}
