//! On-disk formats: a named-tensor container used for checkpoints and
//! datasets, and 8-bit portable graymaps for signals.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MTDTENS\0"
//! version  u32      1
//! count    u32      number of entries
//! entry    name_len u32, name (UTF-8), dtype u8 (1 = f64, 2 = u8),
//!          rank u32, dims u64 x rank, payload (row-major, f64 as
//!          IEEE-754 bits)
//! ```
//!
//! Every archive carries a `meta` entry of dtype u8 holding `key=value`
//! lines. Checkpoints add `schedule.betas` and one `param.<tensor>` entry per
//! denoiser tensor (names from `DenoiserParams::tensors`); categorical
//! modalities add `modality.<i>.table`. Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserParams, HeadConfig};
use crate::error::{Error, Result};
use crate::modalities::{
    EmbeddingTable, Mask, MaskSampler, Modality, ModalityDatum, ModalitySpec, Payload,
};
use crate::model::Model;
use crate::schedule::{NoiseSchedule, ScheduleKind, WeightRule};
use crate::tasks::{Example, GroundTruth, TaskKind, ToyDataset, Transform};

const MAGIC: &[u8; 8] = b"MTDTENS\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: TensorData::F64(data),
        }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            shape,
            data: TensorData::U8(data),
        }
    }
}

/// Ordered named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if tensor.shape.iter().product::<usize>() != tensor.data.len() {
            return Err(Error::Format(format!("tensor `{name}` payload does not match its shape")));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// An f64 tensor, checked against `shape`.
    pub fn f64s(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        match self.get(name) {
            Some(Tensor {
                shape: s,
                data: TensorData::F64(v),
            }) if s == shape => Ok(v),
            Some(t) => Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, expected f64 {shape:?}",
                t.shape
            ))),
            None => Err(Error::Format(format!("missing tensor `{name}`"))),
        }
    }

    pub fn u8s(&self, name: &str, shape: &[usize]) -> Result<&[u8]> {
        match self.get(name) {
            Some(Tensor {
                shape: s,
                data: TensorData::U8(v),
            }) if s == shape => Ok(v),
            Some(t) => Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, expected u8 {shape:?}",
                t.shape
            ))),
            None => Err(Error::Format(format!("missing tensor `{name}`"))),
        }
    }

    pub fn set_meta(&mut self, meta: &Meta) -> Result<()> {
        let text = meta.to_text().into_bytes();
        self.entries.retain(|(n, _)| n != "meta");
        self.insert("meta", Tensor::u8(vec![text.len()], text))
    }

    pub fn meta(&self) -> Result<Meta> {
        match self.get("meta") {
            Some(Tensor {
                data: TensorData::U8(v),
                ..
            }) => {
                let text = std::str::from_utf8(v).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
                Meta::parse(text)
            }
            _ => Err(Error::Format("archive has no metadata".into())),
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&len_u32(self.entries.len())?.to_le_bytes())?;
        for (name, t) in &self.entries {
            out.write_all(&len_u32(name.len())?.to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            let dtype: u8 = match t.data {
                TensorData::F64(_) => 1,
                TensorData::U8(_) => 2,
            };
            out.write_all(&[dtype])?;
            out.write_all(&len_u32(t.shape.len())?.to_le_bytes())?;
            for &d in &t.shape {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            match &t.data {
                TensorData::F64(v) => {
                    for x in v {
                        out.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::U8(v) => out.write_all(v)?,
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a tensor archive (bad magic)".into()));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let count = read_u32(&mut input)?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name_len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut dtype = [0u8; 1];
            input.read_exact(&mut dtype)?;
            let rank = read_u32(&mut input)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                shape.push(
                    usize::try_from(u64::from_le_bytes(b))
                        .map_err(|_| Error::Format(format!("tensor `{name}` is too large")))?,
                );
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let data = match dtype[0] {
                1 => {
                    let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?];
                    input.read_exact(&mut bytes)?;
                    TensorData::F64(
                        bytes
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                            .collect(),
                    )
                }
                2 => {
                    let mut bytes = vec![0u8; n];
                    input.read_exact(&mut bytes)?;
                    TensorData::U8(bytes)
                }
                other => return Err(Error::Format(format!("tensor `{name}` has unknown dtype {other}"))),
            };
            archive.insert(name, Tensor { shape, data })?;
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds the format limit")))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Sorted `key=value` metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Meta(BTreeMap<String, String>);

impl Meta {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("metadata is missing `{key}`")))
    }

    pub fn parse_key<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("metadata `{key}` has bad value `{raw}`")))
    }

    fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse(text: &str) -> Result<Self> {
        let mut meta = Meta::default();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
            meta.set(k, v);
        }
        Ok(meta)
    }
}

fn expect_format(meta: &Meta, format: &str) -> Result<()> {
    match meta.get("format") {
        Some(f) if f == format => Ok(()),
        Some(f) => Err(Error::Format(format!("expected a {format} file, found a {f} file"))),
        None => Err(Error::Format("archive does not declare its format".into())),
    }
}

pub fn model_to_archive(model: &Model) -> Result<Archive> {
    let cfg = model.config();
    let mut meta = Meta::default();
    meta.set("format", "checkpoint");
    meta.set("dim", cfg.dim);
    meta.set("steps", cfg.steps);
    meta.set("hidden_width", cfg.hidden_width);
    meta.set("hidden_layers", cfg.hidden_layers);
    meta.set("time_features", cfg.time_features);
    meta.set("time_embed", cfg.time_embed);
    meta.set("head_width", cfg.head_width);
    meta.set("variant", cfg.variant.name());
    meta.set("modalities", model.modalities.len());
    let rules: Vec<String> = model.schedule.rules().iter().map(WeightRule::to_string).collect();
    meta.set("schedule.rules", rules.join(","));
    if let Some(kind) = model.schedule.kind() {
        meta.set("schedule.kind", kind.name());
    }

    let mut archive = Archive::new();
    for (i, m) in model.modalities.iter().enumerate() {
        meta.set(format!("modality.{i}.kind"), m.spec.kind.name());
        meta.set(format!("modality.{i}.encoder"), m.spec.encoder.name());
        meta.set(format!("modality.{i}.head"), m.spec.head.name());
        meta.set(format!("modality.{i}.size"), m.spec.size);
        if let Some(t) = &m.table {
            meta.set(format!("modality.{i}.table_seed"), t.seed);
            archive.insert(format!("modality.{i}.table"), Tensor::f64(vec![t.classes, t.dim], t.data.clone()))?;
        }
    }
    archive.set_meta(&meta)?;
    let betas = model.schedule.betas().to_vec();
    archive.insert("schedule.betas", Tensor::f64(vec![betas.len()], betas))?;
    for (name, shape, values) in model.denoiser.params.tensors() {
        archive.insert(format!("param.{name}"), Tensor::f64(shape, values.to_vec()))?;
    }
    Ok(archive)
}

pub fn model_from_archive(archive: &Archive) -> Result<Model> {
    let meta = archive.meta()?;
    expect_format(&meta, "checkpoint")?;
    let n: usize = meta.parse_key("modalities")?;
    let mut modalities = Vec::with_capacity(n);
    for i in 0..n {
        let spec = ModalitySpec::new(
            meta.parse_key(&format!("modality.{i}.kind"))?,
            meta.parse_key(&format!("modality.{i}.encoder"))?,
            meta.parse_key(&format!("modality.{i}.head"))?,
            meta.parse_key(&format!("modality.{i}.size"))?,
        )?;
        let table = match archive.get(&format!("modality.{i}.table")) {
            Some(t) if t.shape.len() == 2 => {
                let (classes, dim) = (t.shape[0], t.shape[1]);
                Some(EmbeddingTable {
                    seed: meta.parse_key(&format!("modality.{i}.table_seed"))?,
                    classes,
                    dim,
                    data: archive.f64s(&format!("modality.{i}.table"), &[classes, dim])?.to_vec(),
                })
            }
            Some(_) => return Err(Error::Format(format!("embedding table {i} is not a matrix"))),
            None => None,
        };
        modalities.push(Modality::new(spec, table)?);
    }

    let steps: usize = meta.parse_key("steps")?;
    let rules = match meta.require("schedule.rules")? {
        "" => Vec::new(),
        text => text.split(',').map(str::parse).collect::<Result<Vec<WeightRule>>>()?,
    };
    let betas = archive.f64s("schedule.betas", &[steps])?;
    let schedule = match meta.get("schedule.kind") {
        Some(kind) => {
            let kind: ScheduleKind = kind.parse()?;
            let s = NoiseSchedule::build_with_rules(kind, steps, &rules)?;
            if s.betas() != betas {
                return Err(Error::Format("stored betas disagree with the schedule kind".into()));
            }
            s
        }
        None => NoiseSchedule::from_betas(betas, &rules)?,
    };

    let specs: Vec<ModalitySpec> = modalities.iter().map(|m| m.spec).collect();
    let config = DenoiserConfig {
        dim: meta.parse_key("dim")?,
        steps,
        hidden_width: meta.parse_key("hidden_width")?,
        hidden_layers: meta.parse_key("hidden_layers")?,
        time_features: meta.parse_key("time_features")?,
        time_embed: meta.parse_key("time_embed")?,
        head_width: meta.parse_key("head_width")?,
        variant: meta.parse_key("variant")?,
        heads: specs.iter().map(HeadConfig::from).collect(),
    };
    config.validate()?;
    let mut params = DenoiserParams::init(&config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let layout: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    for ((name, shape), dst) in layout.iter().zip(params.tensors_mut()) {
        dst.copy_from_slice(archive.f64s(&format!("param.{name}"), shape)?);
    }
    Model::new(Denoiser::from_parts(config, params)?, modalities, schedule)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    model_to_archive(model)?.save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_archive(&Archive::load(path)?)
}

pub fn dataset_to_archive(data: &ToyDataset) -> Result<Archive> {
    let n = data.len();
    let dim = data.dim;
    let mut meta = Meta::default();
    meta.set("format", "dataset");
    meta.set("task", data.kind.name());
    meta.set("seed", data.seed);
    meta.set("dim", dim);
    meta.set("examples", n);
    let mut archive = Archive::new();
    let z0: Vec<f64> = data.examples.iter().flat_map(|e| e.z0.iter().copied()).collect();
    archive.insert("z0", Tensor::f64(vec![n, dim], z0))?;

    match &data.truth {
        GroundTruth::Mixture { means, sigma } => {
            meta.set("sigma", sigma);
            let k = means.len();
            archive.insert("means", Tensor::f64(vec![k, dim], means.concat()))?;
            let labels = data
                .examples
                .iter()
                .map(|e| match e.data.first().map(|d| &d.payload) {
                    Some(Payload::Class(c)) => Ok(*c as f64),
                    _ => Err(Error::Format("mixture example without a class label".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            archive.insert("labels", Tensor::f64(vec![n], labels))?;
        }
        GroundTruth::Masked {
            height,
            width,
            sampler,
            ..
        } => {
            meta.set("height", height);
            meta.set("width", width);
            meta.set("patch", sampler.patch);
            meta.set("max_patches", sampler.max_patches);
            let mut bits = Vec::with_capacity(n * dim);
            for e in &data.examples {
                let mask = e
                    .data
                    .first()
                    .and_then(|d| d.mask.as_ref())
                    .ok_or_else(|| Error::Format("masked example without a mask".into()))?;
                bits.extend(mask.bits.iter().map(|&b| b as u8));
            }
            archive.insert("mask", Tensor::u8(vec![n, dim], bits))?;
        }
        GroundTruth::Paired {
            height,
            width,
            transform,
        } => {
            meta.set("height", height);
            meta.set("width", width);
            meta.set("transform", transform.name());
            let mut source = Vec::with_capacity(n * dim);
            for e in &data.examples {
                match e.data.first().map(|d| &d.payload) {
                    Some(Payload::Continuous(v)) => source.extend_from_slice(v),
                    _ => return Err(Error::Format("paired example without a source signal".into())),
                }
            }
            archive.insert("source", Tensor::f64(vec![n, dim], source))?;
        }
    }
    archive.set_meta(&meta)?;
    Ok(archive)
}

pub fn dataset_from_archive(archive: &Archive) -> Result<ToyDataset> {
    let meta = archive.meta()?;
    expect_format(&meta, "dataset")?;
    let kind: TaskKind = meta.parse_key("task")?;
    let n: usize = meta.parse_key("examples")?;
    let dim: usize = meta.parse_key("dim")?;
    let z0 = archive.f64s("z0", &[n, dim])?;
    let rows = |v: &[f64]| -> Vec<Vec<f64>> {
        if dim == 0 {
            vec![Vec::new(); n]
        } else {
            v.chunks(dim).map(<[f64]>::to_vec).collect()
        }
    };
    let z0 = rows(z0);
    let grid = |meta: &Meta| -> Result<(usize, usize)> {
        let (h, w): (usize, usize) = (meta.parse_key("height")?, meta.parse_key("width")?);
        if h * w != dim {
            return Err(Error::Format(format!("grid {h}x{w} does not match dimension {dim}")));
        }
        Ok((h, w))
    };
    let (examples, truth) = match kind {
        TaskKind::LabeledMixture => {
            let labels = archive.f64s("labels", &[n])?;
            let k = archive
                .get("means")
                .and_then(|t| t.shape.first().copied())
                .ok_or_else(|| Error::Format("missing tensor `means`".into()))?;
            let means = if k == 0 { Vec::new() } else { rows(archive.f64s("means", &[k, dim])?) };
            let examples = z0
                .into_iter()
                .zip(labels)
                .map(|(z0, &c)| {
                    if c < 0.0 || c.fract() != 0.0 || c as usize >= k {
                        return Err(Error::Format(format!("bad class label {c}")));
                    }
                    Ok(Example {
                        z0,
                        data: vec![ModalityDatum::class(c as usize)],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let sigma = meta.parse_key("sigma")?;
            (examples, GroundTruth::Mixture { means, sigma })
        }
        TaskKind::MaskedSignals => {
            let (height, width) = grid(&meta)?;
            let bits = archive.u8s("mask", &[n, dim])?;
            let sampler = MaskSampler {
                patch: meta.parse_key("patch")?,
                max_patches: meta.parse_key("max_patches")?,
            };
            let mut examples = Vec::with_capacity(n);
            for (k, z) in z0.iter().enumerate() {
                let mask = Mask {
                    height,
                    width,
                    bits: bits[k * dim..(k + 1) * dim].iter().map(|&b| b != 0).collect(),
                };
                examples.push(Example {
                    z0: z.clone(),
                    data: vec![ModalityDatum::masked(z, mask)?],
                });
            }
            let truth = GroundTruth::Masked {
                height,
                width,
                sampler,
                clean: z0,
            };
            (examples, truth)
        }
        TaskKind::PairedTransition => {
            let (height, width) = grid(&meta)?;
            let source = rows(archive.f64s("source", &[n, dim])?);
            let examples = z0
                .into_iter()
                .zip(source)
                .map(|(z0, s)| Example {
                    z0,
                    data: vec![ModalityDatum::continuous(s)],
                })
                .collect();
            let transform: Transform = meta.parse_key("transform")?;
            (
                examples,
                GroundTruth::Paired {
                    height,
                    width,
                    transform,
                },
            )
        }
    };
    Ok(ToyDataset {
        kind,
        seed: meta.parse_key("seed")?,
        dim,
        examples,
        truth,
    })
}

pub fn save_dataset(data: &ToyDataset, path: &Path) -> Result<()> {
    dataset_to_archive(data)?.save(path)
}

pub fn load_dataset(path: &Path) -> Result<ToyDataset> {
    dataset_from_archive(&Archive::load(path)?)
}

/// `index,class` rows for every categorical modality value.
pub fn write_labels_csv<W: Write>(data: &ToyDataset, mut out: W) -> Result<()> {
    writeln!(out, "index,modality,class")?;
    for (k, e) in data.examples.iter().enumerate() {
        for (i, d) in e.data.iter().enumerate() {
            if let Payload::Class(c) = d.payload {
                writeln!(out, "{k},{i},{c}")?;
            }
        }
    }
    Ok(())
}

/// Maps `[-1, 1]` to `0..=255` (clamped, rounded).
pub fn to_gray(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Maps `0..=maxval` to `[-1, 1]`.
pub fn from_gray(p: u16, maxval: u16) -> f64 {
    2.0 * p as f64 / maxval as f64 - 1.0
}

/// Writes a binary graymap (`P5`, maxval 255) of a row-major signal.
pub fn write_pgm<W: Write>(mut out: W, values: &[f64], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::DimensionMismatch {
            context: "graymap",
            expected: height * width,
            got: values.len(),
        });
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|&v| to_gray(v)).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Reads a binary graymap with maxval up to 255; returns `(height, width,
/// values in [-1, 1])`.
pub fn read_pgm<R: BufRead>(mut input: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut fields = Vec::new();
    let mut token = Vec::new();
    let mut in_comment = false;
    while fields.len() < 4 {
        let mut b = [0u8; 1];
        if input.read(&mut b)? == 0 {
            return Err(Error::Format("truncated graymap header".into()));
        }
        let c = b[0];
        if in_comment {
            in_comment = c != b'\n';
        } else if c == b'#' {
            in_comment = true;
        } else if c.is_ascii_whitespace() {
            if !token.is_empty() {
                fields.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(c);
        }
    }
    if fields[0] != "P5" {
        return Err(Error::Format("not a binary graymap (P5)".into()));
    }
    let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Format(format!("bad graymap field `{s}`"))) };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported graymap maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width * height];
    input.read_exact(&mut bytes)?;
    let values = bytes.iter().map(|&p| from_gray(p as u16, maxval as u16)).collect();
    Ok((height, width, values))
}

/// Tiles equally sized signals into one grid image, `columns` per row, with a
/// one-pixel separator at `-1`.
pub fn tile_grid(signals: &[Vec<f64>], height: usize, width: usize, columns: usize) -> (usize, usize, Vec<f64>) {
    if signals.is_empty() {
        return (0, 0, Vec::new());
    }
    let columns = columns.clamp(1, signals.len());
    let rows = signals.len().div_ceil(columns);
    let gh = rows * (height + 1) - 1;
    let gw = columns * (width + 1) - 1;
    let mut grid = vec![-1.0; gh * gw];
    for (k, s) in signals.iter().enumerate() {
        let (r0, c0) = ((k / columns) * (height + 1), (k % columns) * (width + 1));
        for r in 0..height {
            for c in 0..width {
                grid[(r0 + r) * gw + c0 + c] = s[r * width + c];
            }
        }
    }
    (gh, gw, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Variant;
    use crate::modalities::HeadPlacement;
    use crate::tasks::{gen_labeled_mixture, gen_masked_signals, gen_paired_transition};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixture_model() -> Model {
        let data = gen_labeled_mixture(3, 2, 0.05, 10, 1).unwrap();
        let mods = data.modalities(HeadPlacement::MidTrunk, 4).unwrap();
        let specs: Vec<_> = mods.iter().map(|m| m.spec).collect();
        let sched = NoiseSchedule::build(ScheduleKind::Cosine, 30, 1, WeightRule::TimeRatio { scale: 0.01 }).unwrap();
        let mut cfg = DenoiserConfig::new(2, 30, Variant::X, &specs);
        cfg.hidden_width = 8;
        cfg.head_width = 4;
        cfg.time_features = 4;
        cfg.time_embed = 4;
        let den = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        Model::new(den, mods, sched).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = mixture_model();
        let mut bytes = Vec::new();
        model_to_archive(&model).unwrap().write(&mut bytes).unwrap();
        let back = model_from_archive(&Archive::read(bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back.denoiser.params, model.denoiser.params);
        assert_eq!(back.denoiser.config, model.denoiser.config);
        assert_eq!(back.modalities, model.modalities);
        assert_eq!(back.schedule, model.schedule);
        let mut again = Vec::new();
        model_to_archive(&back).unwrap().write(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn custom_schedule_survives() {
        let mut model = mixture_model();
        let betas: Vec<f64> = (1..=30).map(|t| 0.001 * t as f64).collect();
        model.schedule = NoiseSchedule::from_betas(&betas, &[WeightRule::Constant(0.25)]).unwrap();
        let back = model_from_archive(&model_to_archive(&model).unwrap()).unwrap();
        assert_eq!(back.schedule, model.schedule);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = Vec::new();
        model_to_archive(&mixture_model()).unwrap().write(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::read(bad.as_slice()), Err(Error::Format(_))));
        assert!(Archive::read(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn dataset_round_trips() {
        for data in [
            gen_labeled_mixture(4, 2, 0.05, 20, 2).unwrap(),
            gen_masked_signals(8, 8, 6, MaskSampler::default(), 2).unwrap(),
            gen_paired_transition(4, 4, 5, Transform::BlurInvert, 2).unwrap(),
        ] {
            let back = dataset_from_archive(&dataset_to_archive(&data).unwrap()).unwrap();
            assert_eq!(back, data);
        }
    }

    #[test]
    fn graymap_round_trip() {
        let values: Vec<f64> = (0..=255).map(|p| from_gray(p, 255)).collect();
        let mut bytes = Vec::new();
        write_pgm(&mut bytes, &values, 16, 16).unwrap();
        let (h, w, back) = read_pgm(bytes.as_slice()).unwrap();
        assert_eq!((h, w), (16, 16));
        assert_eq!(back, values);
        assert_eq!(to_gray(-1.0), 0);
        assert_eq!(to_gray(1.0), 255);
        assert_eq!(to_gray(7.0), 255);
    }

    #[test]
    fn graymap_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let (h, w, v) = read_pgm(bytes.as_slice()).unwrap();
        assert_eq!((h, w, v), (1, 2, vec![-1.0, 1.0]));
    }

    #[test]
    fn grid_layout() {
        let a = vec![0.5; 4];
        let b = vec![0.25; 4];
        let (h, w, g) = tile_grid(&[a, b.clone(), b], 2, 2, 2);
        assert_eq!((h, w), (5, 5));
        assert_eq!(g[0], 0.5);
        assert_eq!(g[2], -1.0);
        assert_eq!(g[3], 0.25);
        assert_eq!(g[3 * 5], 0.25);
        assert_eq!(g[3 * 5 + 3], -1.0);
    }
}
