//! Checkpoint-to-checkpoint workflows behind the command-line tool.
//!
//! Each function is pure over [`Checkpoint`] values; file handling lives in
//! the binary. Float precision is taken from the checkpoint's weights.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Entry};
use crate::error::{Error, Result};
use crate::io::{
    layer_kind, layer_names, model_from_checkpoint, read_layer, read_merged, read_spre_block, write_layer,
    write_merged, write_spre_block, KIND_MERGED, KIND_SPRE,
};
use crate::reparam::{merge_branches, verify_equivalence, EquivalenceReport, TrialInput};
use crate::scalar::{DType, Scalar};
use crate::sparsity::{nm_project_layer, spatial_sparsity, NMPattern, SparsityProfile};
use crate::spre::{BlockOptions, ReferenceMode, SpReBlock, SpReVariant};
use crate::tensor::{FeatureMap, Tensor4};
use crate::trainer::model::{MaskRule, SparseLayer};

fn float_dtype(ck: &Checkpoint) -> Result<DType> {
    ck.float_dtype()
        .ok_or_else(|| Error::InvalidConfig("checkpoint holds no float tensors".into()))
}

/// Rebuilds `ck` with each listed layer's entries replaced, in place, by
/// the entries of its replacement checkpoint.
fn replace_layers(ck: &Checkpoint, replacements: Vec<(String, Checkpoint)>) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    let owner = |name: &str| replacements.iter().position(|(l, _)| name.starts_with(&format!("{l}.")));
    let mut emitted = vec![false; replacements.len()];
    for e in ck.entries() {
        match owner(&e.name) {
            Some(k) if !emitted[k] => {
                emitted[k] = true;
                for r in replacements[k].1.entries() {
                    out.push(r.clone())?;
                }
            }
            Some(_) => {}
            None => out.push(e.clone())?,
        }
    }
    Ok(out)
}

/// Spatial-sparsity profile of every rank-4 mask, in checkpoint order.
pub fn profile_checkpoint(ck: &Checkpoint) -> Result<Vec<SparsityProfile>> {
    ck.entries()
        .iter()
        .filter(|e| e.is_mask() && e.dims.len() == 4)
        .map(|e| Ok(spatial_sparsity(&ck.mask(&e.name)?).with_name(e.name.clone())))
        .collect()
}

/// `<l>.w_main` entries whose layer is single-branch (or has no layer
/// metadata) and whose input channels divide into groups of `m`.
fn projectable(ck: &Checkpoint, pattern: NMPattern) -> Result<Vec<(String, &Entry)>> {
    let mut out = Vec::new();
    for e in ck.entries() {
        let Some(layer) = e.name.strip_suffix(".w_main") else { continue };
        let Some(shape) = e.shape4() else { continue };
        if e.is_mask() || shape.c_in % pattern.m != 0 {
            continue;
        }
        if ck.contains(&format!("{layer}.kind")) && matches!(layer_kind(ck, layer)?, KIND_SPRE | KIND_MERGED) {
            continue;
        }
        out.push((layer.to_string(), e));
    }
    Ok(out)
}

fn project_typed<T: Scalar>(ck: &Checkpoint, pattern: NMPattern) -> Result<Checkpoint> {
    let mut out = ck.clone();
    let targets = projectable(ck, pattern)?;
    if targets.is_empty() {
        return Err(Error::InvalidConfig(format!("no conv weights eligible for {pattern} projection")));
    }
    let mut replacements = Vec::new();
    for (layer, e) in targets {
        if ck.contains(&format!("{layer}.kind")) {
            let mut l = match read_layer::<T>(ck, &layer)? {
                SparseLayer::Masked(l) => l,
                _ => unreachable!("projectable filters multi-branch layers"),
            };
            l.rule = MaskRule::Nm(pattern);
            l.mask = nm_project_layer(&l.w, pattern, &layer)?;
            let mut group = Checkpoint::new();
            write_layer(&mut group, &SparseLayer::Masked(l))?;
            replacements.push((layer, group));
        } else {
            let w: Tensor4<T> = ck.tensor4(&e.name)?;
            out.upsert(Entry::mask(format!("{layer}.b_main"), &nm_project_layer(&w, pattern, &layer)?));
        }
    }
    replace_layers(&out, replacements)
}

/// N:M-projects every eligible conv weight and stores the mask as
/// `<l>.b_main`. Multi-branch and merged layers are left as they are.
pub fn project_checkpoint(ck: &Checkpoint, pattern: NMPattern) -> Result<Checkpoint> {
    NMPattern::new(pattern.n, pattern.m)?;
    match float_dtype(ck)? {
        DType::F32 => project_typed::<f32>(ck, pattern),
        DType::F64 => project_typed::<f64>(ck, pattern),
    }
}

fn spre_build_typed<T: Scalar>(ck: &Checkpoint, pattern: NMPattern, variant: SpReVariant) -> Result<Checkpoint> {
    let mut replacements = Vec::new();
    for layer in layer_names(ck) {
        let l = match read_layer::<T>(ck, &layer)? {
            SparseLayer::Masked(l) if l.w.shape().c_in % pattern.m == 0 => l,
            _ => continue,
        };
        let shape = l.w.shape();
        let mut block = SpReBlock::new(
            layer.clone(),
            l.w,
            Tensor4::zeros(shape),
            pattern,
            l.spec,
            BlockOptions {
                variant,
                refresh_period: 0,
                reference: ReferenceMode::Frozen,
                ..BlockOptions::default()
            },
        )?;
        *block.bn_main_mut() = l.bn;
        let mut group = Checkpoint::new();
        write_spre_block(&mut group, &block)?;
        replacements.push((layer, group));
    }
    if replacements.is_empty() {
        return Err(Error::InvalidConfig(format!("no single-branch conv layers eligible for {pattern}")));
    }
    replace_layers(ck, replacements)
}

/// Turns every eligible single-branch layer of a pre-trained checkpoint
/// into a SpRe block: `B` and `B^U` come from the pre-trained weights,
/// the reference is frozen, and the extra branch starts at zero with fresh
/// batch norm.
pub fn spre_build_checkpoint(ck: &Checkpoint, pattern: NMPattern, variant: SpReVariant) -> Result<Checkpoint> {
    NMPattern::new(pattern.n, pattern.m)?;
    match float_dtype(ck)? {
        DType::F32 => spre_build_typed::<f32>(ck, pattern, variant),
        DType::F64 => spre_build_typed::<f64>(ck, pattern, variant),
    }
}

fn reparam_typed<T: Scalar>(ck: &Checkpoint) -> Result<Checkpoint> {
    let mut replacements = Vec::new();
    for layer in layer_names(ck) {
        if layer_kind(ck, &layer)? != KIND_SPRE {
            continue;
        }
        let merged = merge_branches(&read_spre_block::<T>(ck, &layer)?)?;
        let mut group = Checkpoint::new();
        write_merged(&mut group, &merged)?;
        replacements.push((layer, group));
    }
    replace_layers(ck, replacements)
}

/// Merges every SpRe layer into a single conv with bias; all other entries
/// pass through unchanged.
pub fn reparam_checkpoint(ck: &Checkpoint) -> Result<Checkpoint> {
    match float_dtype(ck)? {
        DType::F32 => reparam_typed::<f32>(ck),
        DType::F64 => reparam_typed::<f64>(ck),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub max_abs_diff: f64,
    pub passed: bool,
}

/// Overall [`EquivalenceReport`] plus the per-layer breakdown; `network`
/// holds the end-to-end logits comparison when both files are full models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    #[serde(flatten)]
    pub overall: EquivalenceReport,
    pub layers: Vec<LayerReport>,
    pub network: Option<LayerReport>,
}

fn verify_typed<T: Scalar>(two: &Checkpoint, merged: &Checkpoint, trials: usize, tol: f64) -> Result<VerifyReport> {
    let mut reports = Vec::new();
    let mut layers = Vec::new();
    for layer in layer_names(two) {
        if layer_kind(two, &layer)? != KIND_SPRE {
            continue;
        }
        let block = read_spre_block::<T>(two, &layer)?;
        let m = read_merged::<T>(merged, &layer)?;
        let r = verify_equivalence(&block, &m, trials, tol, TrialInput::default())?;
        layers.push(LayerReport {
            layer,
            max_abs_diff: r.max_abs_diff,
            passed: r.passed,
        });
        reports.push(r);
    }
    if reports.is_empty() {
        return Err(Error::InvalidConfig("first checkpoint has no SpRe layers to verify".into()));
    }
    let mut network = None;
    if two.contains("model.arch") && merged.contains("model.arch") {
        let a = model_from_checkpoint::<T>(two)?;
        let b = model_from_checkpoint::<T>(merged)?;
        let cfg = &a.config;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let mut diff = 0.0f64;
        for _ in 0..trials {
            let x = FeatureMap::<T>::uniform((2, cfg.in_channels, cfg.input_size, cfg.input_size), -1.0, 1.0, &mut rng);
            let (la, lb) = (a.predict(&x)?, b.predict(&x)?);
            for (p, q) in la.data().iter().zip(lb.data()) {
                diff = diff.max((p.as_f64() - q.as_f64()).abs());
            }
        }
        let r = EquivalenceReport::new(trials, diff, tol);
        network = Some(LayerReport {
            layer: "network".into(),
            max_abs_diff: diff,
            passed: r.passed,
        });
        reports.push(r);
    }
    Ok(VerifyReport {
        overall: EquivalenceReport::merge(&reports, tol),
        layers,
        network,
    })
}

/// Checks every SpRe layer of `two_branch` against its merged counterpart
/// in `merged` on `trials` random inputs, plus the whole network when both
/// checkpoints are full models.
pub fn verify_checkpoints(two_branch: &Checkpoint, merged: &Checkpoint, trials: usize, tol: f64) -> Result<VerifyReport> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance {tol} must be non-negative")));
    }
    let (a, b) = (float_dtype(two_branch)?, float_dtype(merged)?);
    if a != b {
        return Err(Error::InvalidConfig(format!("checkpoint precisions differ: {a:?} vs {b:?}")));
    }
    match a {
        DType::F32 => verify_typed::<f32>(two_branch, merged, trials, tol),
        DType::F64 => verify_typed::<f64>(two_branch, merged, trials, tol),
    }
}
