//! Checkpoint layout of blocks and models, plus the CSV and JSON emitters.
//!
//! Every conv layer `<l>` in a model checkpoint carries a `<l>.kind` entry
//! (0 dense, 1 magnitude, 2 uniform-spatial, 3 SpRe, 4 merged, 5 single-branch
//! N:M) and a
//! `<l>.conv_spec` entry `[stride, padding]`; the remaining entries depend on
//! the kind:
//!
//! * masked layers: `w_main`, `b_main`, `bn_main.*`, `sparsity`, plus
//!   `pattern` for kind 5
//! * SpRe blocks: `w_main`, `b_main`, `b_unstructured`, `bn_main.*`,
//!   `pattern`, `variant`, `options`, and `w_extra`, `b_extra`, `bn_extra.*`
//!   when the variant has an extra branch
//! * merged layers: `w_bar`, `bias_bar`, `mask`, `pattern`
//!
//! Batch-norm groups `<p>` hold `<p>.gamma`, `<p>.beta`, `<p>.running_mean`,
//! `<p>.running_var`, `<p>.eps`, `<p>.momentum` and `<p>.num_batches_tracked`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::error::{Error, Result};
use crate::nn::{BatchNormParams, ConvSpec, Linear};
use crate::reparam::MergedConv;
use crate::scalar::Scalar;
use crate::sparsity::{NMPattern, SparsityProfile};
use crate::spre::{BlockOptions, ReferenceMode, SpReBlock, SpReVariant};
use crate::tensor::{Mask4, Matrix, Tensor4};
use crate::trainer::config::TinyCnnConfig;
use crate::trainer::model::{MaskRule, MaskedConvBn, SparseLayer, TinyCnn};

pub const KIND_DENSE: u8 = 0;
pub const KIND_MAGNITUDE: u8 = 1;
pub const KIND_UNIFORM: u8 = 2;
pub const KIND_SPRE: u8 = 3;
pub const KIND_MERGED: u8 = 4;
pub const KIND_NM: u8 = 5;

fn bad_meta(name: &str, what: &str) -> Error {
    Error::Checkpoint(CheckpointError::WrongKind {
        name: name.to_string(),
        expected: what.to_string(),
        actual: "malformed metadata".to_string(),
    })
}

fn meta_usize(ck: &Checkpoint, name: &str, len: usize) -> Result<Vec<usize>> {
    let v = ck.meta(name)?;
    if v.len() != len || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
        return Err(bad_meta(name, &format!("{len} non-negative integers")));
    }
    Ok(v.into_iter().map(|x| x as usize).collect())
}

pub fn write_bn<T: Scalar>(ck: &mut Checkpoint, prefix: &str, bn: &BatchNormParams<T>) -> Result<()> {
    ck.put_vector(format!("{prefix}.gamma"), &bn.gamma)?;
    ck.put_vector(format!("{prefix}.beta"), &bn.beta)?;
    ck.put_vector(format!("{prefix}.running_mean"), &bn.running_mean)?;
    ck.put_vector(format!("{prefix}.running_var"), &bn.running_var)?;
    ck.put_vector(format!("{prefix}.eps"), &[bn.eps])?;
    ck.put_vector(format!("{prefix}.momentum"), &[bn.momentum])?;
    ck.put_meta(format!("{prefix}.num_batches_tracked"), &[bn.num_batches_tracked as f64])?;
    Ok(())
}

pub fn read_bn<T: Scalar>(ck: &Checkpoint, prefix: &str) -> Result<BatchNormParams<T>> {
    let scalar = |field: &str| -> Result<T> {
        let name = format!("{prefix}.{field}");
        let v = ck.vector::<T>(&name)?;
        v.first().copied().filter(|_| v.len() == 1).ok_or_else(|| bad_meta(&name, "one value"))
    };
    let bn = BatchNormParams {
        gamma: ck.vector(&format!("{prefix}.gamma"))?,
        beta: ck.vector(&format!("{prefix}.beta"))?,
        running_mean: ck.vector(&format!("{prefix}.running_mean"))?,
        running_var: ck.vector(&format!("{prefix}.running_var"))?,
        eps: scalar("eps")?,
        momentum: scalar("momentum")?,
        num_batches_tracked: meta_usize(ck, &format!("{prefix}.num_batches_tracked"), 1)?[0] as u64,
    };
    bn.validate()?;
    Ok(bn)
}

fn write_conv_spec<T: Scalar>(ck: &mut Checkpoint, layer: &str, spec: &ConvSpec<T>) -> Result<()> {
    ck.put_meta(format!("{layer}.conv_spec"), &[spec.stride as f64, spec.padding as f64])?;
    Ok(())
}

fn read_conv_spec<T: Scalar>(ck: &Checkpoint, layer: &str) -> Result<ConvSpec<T>> {
    let v = meta_usize(ck, &format!("{layer}.conv_spec"), 2)?;
    Ok(ConvSpec::new(v[0], v[1]))
}

pub fn read_pattern(ck: &Checkpoint, layer: &str) -> Result<NMPattern> {
    let v = meta_usize(ck, &format!("{layer}.pattern"), 2)?;
    NMPattern::new(v[0], v[1])
}

pub fn layer_kind(ck: &Checkpoint, layer: &str) -> Result<u8> {
    let v = meta_usize(ck, &format!("{layer}.kind"), 1)?;
    Ok(v[0] as u8)
}

/// Layer prefixes that carry a `.kind` entry, in checkpoint order.
pub fn layer_names(ck: &Checkpoint) -> Vec<String> {
    ck.entries()
        .iter()
        .filter_map(|e| e.name.strip_suffix(".kind").map(str::to_string))
        .collect()
}

pub fn write_spre_block<T: Scalar>(ck: &mut Checkpoint, block: &SpReBlock<T>) -> Result<()> {
    let l = block.name();
    ck.put_meta(format!("{l}.kind"), &[KIND_SPRE as f64])?;
    write_conv_spec(ck, l, block.spec())?;
    let p = block.pattern();
    ck.put_meta(format!("{l}.pattern"), &[p.n as f64, p.m as f64])?;
    ck.put_meta(format!("{l}.variant"), &[block.variant().code() as f64])?;
    let frozen = (block.reference_mode() == ReferenceMode::Frozen) as u8 as f64;
    ck.put_meta(
        format!("{l}.options"),
        &[block.refresh_period() as f64, block.decay().as_f64(), frozen],
    )?;
    ck.put_tensor4(format!("{l}.w_main"), block.w_main())?;
    ck.put_mask(format!("{l}.b_main"), block.b_main())?;
    ck.put_mask(format!("{l}.b_unstructured"), block.b_unstructured())?;
    write_bn(ck, &format!("{l}.bn_main"), block.bn_main())?;
    if block.variant().has_extra() {
        ck.put_tensor4(format!("{l}.w_extra"), block.w_extra())?;
        ck.put_mask(format!("{l}.b_extra"), block.b_extra())?;
        write_bn(ck, &format!("{l}.bn_extra"), block.bn_extra())?;
    }
    Ok(())
}

pub fn read_spre_block<T: Scalar>(ck: &Checkpoint, layer: &str) -> Result<SpReBlock<T>> {
    let pattern = read_pattern(ck, layer)?;
    let code = meta_usize(ck, &format!("{layer}.variant"), 1)?[0];
    let variant = SpReVariant::from_code(code as u8).ok_or_else(|| bad_meta(&format!("{layer}.variant"), "variant code 0-3"))?;
    let mut opts = BlockOptions {
        variant,
        ..BlockOptions::default()
    };
    if let Some(e) = ck.get(&format!("{layer}.options")) {
        let v = e.values::<f64>()?;
        if v.len() != 3 {
            return Err(bad_meta(&e.name, "[refresh_period, decay, frozen]"));
        }
        opts.refresh_period = v[0] as usize;
        opts.decay = v[1];
        opts.reference = if v[2] != 0.0 { ReferenceMode::Frozen } else { ReferenceMode::Dynamic };
    }
    let w_main: Tensor4<T> = ck.tensor4(&format!("{layer}.w_main"))?;
    let shape = w_main.shape();
    let b_main = ck.mask(&format!("{layer}.b_main"))?;
    let b_u = match ck.get(&format!("{layer}.b_unstructured")) {
        Some(_) => Some(ck.mask(&format!("{layer}.b_unstructured"))?),
        None => None,
    };
    let bn_main = read_bn(ck, &format!("{layer}.bn_main"))?;
    let (w_extra, b_extra, bn_extra) = if variant.has_extra() {
        (
            ck.tensor4(&format!("{layer}.w_extra"))?,
            ck.mask(&format!("{layer}.b_extra"))?,
            read_bn(ck, &format!("{layer}.bn_extra"))?,
        )
    } else {
        (Tensor4::zeros(shape), Mask4::zeros(shape), BatchNormParams::new(shape.c_out))
    };
    SpReBlock::from_parts(
        layer,
        w_main,
        b_main,
        w_extra,
        b_extra,
        b_u,
        bn_main,
        bn_extra,
        pattern,
        read_conv_spec(ck, layer)?,
        opts,
    )
}

pub fn write_merged<T: Scalar>(ck: &mut Checkpoint, m: &MergedConv<T>) -> Result<()> {
    let l = &m.name;
    ck.put_meta(format!("{l}.kind"), &[KIND_MERGED as f64])?;
    ck.put_meta(format!("{l}.conv_spec"), &[m.stride as f64, m.padding as f64])?;
    ck.put_meta(format!("{l}.pattern"), &[m.pattern.n as f64, m.pattern.m as f64])?;
    ck.put_tensor4(format!("{l}.w_bar"), &m.w_bar)?;
    ck.put_vector(format!("{l}.bias_bar"), &m.bias_bar)?;
    ck.put_mask(format!("{l}.mask"), &m.mask)?;
    Ok(())
}

pub fn read_merged<T: Scalar>(ck: &Checkpoint, layer: &str) -> Result<MergedConv<T>> {
    let spec = meta_usize(ck, &format!("{layer}.conv_spec"), 2)?;
    let w_bar: Tensor4<T> = ck.tensor4(&format!("{layer}.w_bar"))?;
    let bias_bar: Vec<T> = ck.vector(&format!("{layer}.bias_bar"))?;
    if bias_bar.len() != w_bar.shape().c_out {
        return Err(bad_meta(&format!("{layer}.bias_bar"), "one bias per output channel"));
    }
    let merged = MergedConv {
        name: layer.to_string(),
        w_bar,
        bias_bar,
        mask: ck.mask(&format!("{layer}.mask"))?,
        pattern: read_pattern(ck, layer)?,
        stride: spec[0],
        padding: spec[1],
    };
    merged.check_valid()?;
    Ok(merged)
}

fn write_masked<T: Scalar>(ck: &mut Checkpoint, l: &MaskedConvBn<T>) -> Result<()> {
    let name = &l.name;
    ck.put_meta(format!("{name}.kind"), &[l.rule.code() as f64])?;
    write_conv_spec(ck, name, &l.spec)?;
    ck.put_meta(format!("{name}.sparsity"), &[l.rule.sparsity()])?;
    if let MaskRule::Nm(p) = l.rule {
        ck.put_meta(format!("{name}.pattern"), &[p.n as f64, p.m as f64])?;
    }
    ck.put_tensor4(format!("{name}.w_main"), &l.w)?;
    ck.put_mask(format!("{name}.b_main"), &l.mask)?;
    write_bn(ck, &format!("{name}.bn_main"), &l.bn)
}

fn read_masked<T: Scalar>(ck: &Checkpoint, layer: &str, kind: u8) -> Result<MaskedConvBn<T>> {
    let p = ck.meta(&format!("{layer}.sparsity")).ok().and_then(|v| v.first().copied()).unwrap_or(0.0);
    let rule = match kind {
        KIND_DENSE => MaskRule::Dense,
        KIND_MAGNITUDE => MaskRule::Magnitude(p),
        KIND_NM => MaskRule::Nm(read_pattern(ck, layer)?),
        _ => MaskRule::UniformSpatial(p),
    };
    let w: Tensor4<T> = ck.tensor4(&format!("{layer}.w_main"))?;
    let mask = match ck.get(&format!("{layer}.b_main")) {
        Some(_) => ck.mask(&format!("{layer}.b_main"))?,
        None => Mask4::ones(w.shape()),
    };
    MaskedConvBn::from_parts(
        layer,
        w,
        mask,
        read_bn(ck, &format!("{layer}.bn_main"))?,
        read_conv_spec(ck, layer)?,
        rule,
    )
}

pub fn read_layer<T: Scalar>(ck: &Checkpoint, layer: &str) -> Result<SparseLayer<T>> {
    match layer_kind(ck, layer)? {
        k @ (KIND_DENSE | KIND_MAGNITUDE | KIND_UNIFORM | KIND_NM) => read_masked(ck, layer, k).map(SparseLayer::Masked),
        KIND_SPRE => read_spre_block(ck, layer).map(SparseLayer::SpRe),
        KIND_MERGED => read_merged(ck, layer).map(SparseLayer::Merged),
        _ => Err(bad_meta(&format!("{layer}.kind"), "layer kind 0-5")),
    }
}

pub fn write_layer<T: Scalar>(ck: &mut Checkpoint, layer: &SparseLayer<T>) -> Result<()> {
    match layer {
        SparseLayer::Masked(l) => write_masked(ck, l),
        SparseLayer::SpRe(b) => write_spre_block(ck, b),
        SparseLayer::Merged(m) => write_merged(ck, m),
    }
}

/// `model.arch` = `[classes, in_channels, kernel, blocks_per_stage, input_size, widths...]`.
pub fn model_to_checkpoint<T: Scalar>(model: &TinyCnn<T>) -> Result<Checkpoint> {
    let cfg = &model.config;
    let mut ck = Checkpoint::new();
    let mut arch = vec![
        cfg.classes as f64,
        cfg.in_channels as f64,
        cfg.kernel as f64,
        cfg.blocks_per_stage as f64,
        cfg.input_size as f64,
    ];
    arch.extend(cfg.widths.iter().map(|&w| w as f64));
    ck.put_meta("model.arch", &arch)?;
    ck.put_tensor4("stem.weight", &model.stem.w)?;
    ck.put_meta("stem.conv_spec", &[model.stem.spec.stride as f64, model.stem.spec.padding as f64])?;
    write_bn(&mut ck, "stem.bn", &model.stem.bn)?;
    for layer in &model.layers {
        write_layer(&mut ck, layer)?;
    }
    let h = &model.head;
    ck.put_matrix("head.weight", h.outputs(), h.inputs(), h.weight.data())?;
    ck.put_vector("head.bias", &h.bias)?;
    Ok(ck)
}

pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<TinyCnn<T>> {
    let arch = ck.meta("model.arch")?;
    if arch.len() < 6 {
        return Err(bad_meta("model.arch", "[classes, in_channels, kernel, blocks, input_size, widths...]"));
    }
    let u = |x: f64| x as usize;
    let config = TinyCnnConfig {
        classes: u(arch[0]),
        in_channels: u(arch[1]),
        kernel: u(arch[2]),
        blocks_per_stage: u(arch[3]),
        input_size: u(arch[4]),
        widths: arch[5..].iter().map(|&x| u(x)).collect(),
    };
    config.validate(None)?;
    let stem_w: Tensor4<T> = ck.tensor4("stem.weight")?;
    let stem = MaskedConvBn::from_parts(
        "stem",
        stem_w.clone(),
        Mask4::ones(stem_w.shape()),
        read_bn(ck, "stem.bn")?,
        read_conv_spec(ck, "stem")?,
        MaskRule::Dense,
    )?;
    let expected = TinyCnn::<T>::layer_layout(&config);
    let names = layer_names(ck);
    if names.len() != expected.len() {
        return Err(bad_meta("model.arch", &format!("{} conv layers", expected.len())));
    }
    let layers = names.iter().map(|n| read_layer(ck, n)).collect::<Result<Vec<_>>>()?;
    for (layer, (name, shape, _)) in layers.iter().zip(&expected) {
        if layer.name() != name || layer.shape() != *shape {
            return Err(bad_meta(&format!("{}.kind", layer.name()), &format!("layer {name} of shape {shape}")));
        }
    }
    let hw = ck.require("head.weight")?;
    let (rows, cols) = match hw.dims[..] {
        [r, c] => (r as usize, c as usize),
        _ => return Err(bad_meta("head.weight", "rank-2 matrix")),
    };
    let head = Linear {
        weight: Matrix::from_vec(rows, cols, hw.values::<T>()?)?,
        bias: ck.vector("head.bias")?,
    };
    Ok(TinyCnn::from_parts(config, stem, layers, head))
}

/// Writes `layer,u,v,spatial_sparsity` rows, profiles in the given order and
/// locations row-major within each.
pub fn write_profiles_csv<W: Write>(out: W, profiles: &[SparsityProfile]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "u", "v", "spatial_sparsity"])?;
    for p in profiles {
        for u in 0..p.k_h {
            for v in 0..p.k_w {
                w.write_record([p.layer_name.clone(), u.to_string(), v.to_string(), p.at(u, v).to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_profiles_csv(path: impl AsRef<Path>) -> Result<Vec<(String, usize, usize, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub fn metrics_jsonl(records: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
