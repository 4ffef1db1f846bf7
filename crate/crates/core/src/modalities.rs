//! Modality specifications, fixed encoders into the diffusion space, and the
//! per-modality negative log-likelihoods used as decoder-head losses.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Payload already lives in the diffusion space.
    Identity,
    /// Row lookup in a frozen random table (class labels).
    EmbeddingTable,
    /// Identity on the payload with masked coordinates zeroed.
    Masker,
}

/// Where a decoder head taps the shared trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPlacement {
    /// After hidden layer `ceil(L/2)`.
    MidTrunk,
    /// After the last hidden layer.
    EndTrunk,
}

macro_rules! named_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }

        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

named_enum!(ModalityKind {
    ModalityKind::Continuous => "continuous",
    ModalityKind::Categorical => "categorical",
});
named_enum!(EncoderKind {
    EncoderKind::Identity => "identity",
    EncoderKind::EmbeddingTable => "embedding_table",
    EncoderKind::Masker => "masker",
});
named_enum!(HeadPlacement {
    HeadPlacement::MidTrunk => "mid_trunk",
    HeadPlacement::EndTrunk => "end_trunk",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    pub encoder: EncoderKind,
    pub head: HeadPlacement,
    /// Signal length for continuous modalities, class count for categorical.
    pub size: usize,
}

impl ModalitySpec {
    pub fn continuous(dim: usize, encoder: EncoderKind, head: HeadPlacement) -> Result<Self> {
        Self::new(ModalityKind::Continuous, encoder, head, dim)
    }

    pub fn categorical(classes: usize, head: HeadPlacement) -> Result<Self> {
        Self::new(
            ModalityKind::Categorical,
            EncoderKind::EmbeddingTable,
            head,
            classes,
        )
    }

    pub fn new(
        kind: ModalityKind,
        encoder: EncoderKind,
        head: HeadPlacement,
        size: usize,
    ) -> Result<Self> {
        match (kind, encoder) {
            (ModalityKind::Categorical, EncoderKind::EmbeddingTable) if size >= 2 => {}
            (ModalityKind::Categorical, EncoderKind::EmbeddingTable) => {
                return Err(Error::Config(
                    "categorical modalities need at least 2 classes".into(),
                ))
            }
            (ModalityKind::Continuous, EncoderKind::Identity | EncoderKind::Masker) if size > 0 => {}
            _ => {
                return Err(Error::Config(format!(
                    "{} modality cannot use the {} encoder",
                    kind.name(),
                    encoder.name()
                )))
            }
        }
        Ok(Self {
            kind,
            encoder,
            head,
            size,
        })
    }

    /// Length of the decoder head output (logits or reconstruction).
    pub fn head_dim(&self) -> usize {
        self.size
    }
}

/// Row-major boolean mask; `true` marks a hidden coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.masked_count() as f64 / self.bits.len() as f64
    }

    /// Marks the `patch x patch` square at `(row, col)`, clipped at the border.
    pub fn cover(&mut self, row: usize, col: usize, patch: usize) {
        for r in row..(row + patch).min(self.height) {
            for c in col..(col + patch).min(self.width) {
                self.bits[r * self.width + c] = true;
            }
        }
    }

    /// Returns `signal` with masked coordinates set to zero.
    pub fn apply(&self, signal: &[f64]) -> Result<Vec<f64>> {
        check_dim("mask", self.bits.len(), signal.len())?;
        Ok(signal
            .iter()
            .zip(&self.bits)
            .map(|(v, m)| if *m { 0.0 } else { *v })
            .collect())
    }

    /// Writes the mask as a plain-text portable bitmap (`P1`), 1 = masked.
    pub fn write_pbm<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "P1")?;
        writeln!(out, "{} {}", self.width, self.height)?;
        for row in self.bits.chunks(self.width.max(1)) {
            let line: Vec<&str> = row.iter().map(|b| if *b { "1" } else { "0" }).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_pbm<R: BufRead>(input: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in input.lines() {
            let line = line?;
            let body = line.split('#').next().unwrap_or("");
            tokens.extend(body.split_whitespace().map(str::to_owned));
        }
        let mut it = tokens.into_iter();
        if it.next().as_deref() != Some("P1") {
            return Err(Error::Format("mask is not a P1 bitmap".into()));
        }
        let mut dim = || -> Result<usize> {
            it.next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("bad bitmap header".into()))
        };
        let width = dim()?;
        let height = dim()?;
        // P1 allows pixels without separating whitespace.
        let bits: Vec<bool> = it
            .flat_map(|tok| tok.chars().collect::<Vec<_>>())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("bad bitmap pixel `{other}`"))),
            })
            .collect::<Result<_>>()?;
        if bits.len() != width * height {
            return Err(Error::Format(format!(
                "bitmap has {} pixels, header says {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }
}

/// Random patch masking: `m ~ Uniform{0..=max_patches}` squares of side
/// `patch`, top-left corners uniform over the image, clipped at the border,
/// overlaps allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSampler {
    pub patch: usize,
    pub max_patches: usize,
}

impl Default for MaskSampler {
    fn default() -> Self {
        Self {
            patch: 4,
            max_patches: 10,
        }
    }
}

impl MaskSampler {
    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.patch == 0 || self.patch > height || self.patch > width {
            return Err(Error::InvalidMask(format!(
                "patch {} does not fit a {height}x{width} signal",
                self.patch
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Result<Mask> {
        self.check(height, width)?;
        let m = rng.random_range(0..=self.max_patches);
        self.sample_with_count(height, width, m, rng)
    }

    /// Same placement rule with a fixed patch count.
    pub fn sample_with_count<R: Rng + ?Sized>(
        &self,
        height: usize,
        width: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Mask> {
        self.check(height, width)?;
        let mut mask = Mask::empty(height, width);
        for _ in 0..count {
            let row = rng.random_range(0..height);
            let col = rng.random_range(0..width);
            mask.cover(row, col, self.patch);
        }
        Ok(mask)
    }
}

/// Draws a mask with the default sampler scaled to the signal: patches a
/// quarter of the width across, at most 10 of them.
pub fn make_random_mask<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Result<Mask> {
    let sampler = MaskSampler {
        patch: (width / 4).clamp(1, 16).min(height),
        ..MaskSampler::default()
    };
    sampler.sample(height, width, rng)
}

/// Frozen embedding table mapping class indices into the diffusion space.
///
/// Rows are spread over the sphere of radius `sqrt(dim)`: seeded Gaussian
/// directions pushed apart by a fixed number of repulsion steps, so that no
/// two classes (and no class and the zero vector) share an encoding. With
/// `dim = 1` the rows are evenly spaced in `[-1, 1]` in a seeded order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub data: Vec<f64>,
}

const SPREAD_ITERS: usize = 200;

impl EmbeddingTable {
    pub fn seeded(classes: usize, dim: usize, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = if dim == 1 {
            let mut v: Vec<f64> = (0..classes)
                .map(|k| if classes == 1 { 1.0 } else { -1.0 + 2.0 * k as f64 / (classes - 1) as f64 })
                .collect();
            v.shuffle(&mut rng);
            v
        } else {
            let mut rows: Vec<Vec<f64>> = (0..classes)
                .map(|_| project_sphere((0..dim).map(|_| rng.sample(StandardNormal)).collect()))
                .collect();
            for _ in 0..SPREAD_ITERS {
                let forces: Vec<Vec<f64>> = (0..classes)
                    .map(|i| {
                        let mut f = vec![0.0; dim];
                        for j in (0..classes).filter(|&j| j != i) {
                            let d: Vec<f64> = rows[i].iter().zip(&rows[j]).map(|(a, b)| a - b).collect();
                            let r2 = d.iter().map(|x| x * x).sum::<f64>().max(1e-12);
                            let inv = 1.0 / (r2 * r2.sqrt());
                            f.iter_mut().zip(&d).for_each(|(fk, dk)| *fk += dk * inv);
                        }
                        f
                    })
                    .collect();
                for (row, f) in rows.iter_mut().zip(forces) {
                    let moved = row.iter().zip(&f).map(|(r, fk)| r + 0.05 * fk).collect();
                    *row = project_sphere(moved);
                }
            }
            let radius = (dim as f64).sqrt();
            rows.into_iter().flatten().map(|v| v * radius).collect()
        };
        Self {
            seed,
            classes,
            dim,
            data,
        }
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.data[class * self.dim..(class + 1) * self.dim]
    }

    /// CSV with a `# seed=<seed>` header line and one row per class.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# seed={}", self.seed)?;
        for k in 0..self.classes {
            let row: Vec<String> = self.row(k).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut seed = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# seed=") {
                seed = Some(
                    rest.parse()
                        .map_err(|_| Error::Format("bad embedding seed".into()))?,
                );
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("embedding row: {e}")))?;
            rows.push(row);
        }
        let seed = seed.ok_or_else(|| Error::Format("embedding table lacks a seed header".into()))?;
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Format("ragged or empty embedding table".into()));
        }
        Ok(Self {
            seed,
            classes: rows.len(),
            dim,
            data: rows.concat(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Continuous(Vec<f64>),
    Class(usize),
    /// Class probabilities; used when a categorical estimate is kept soft.
    Soft(Vec<f64>),
}

/// One sample of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDatum {
    pub payload: Payload,
    pub mask: Option<Mask>,
}

impl ModalityDatum {
    pub fn continuous(values: Vec<f64>) -> Self {
        Self {
            payload: Payload::Continuous(values),
            mask: None,
        }
    }

    pub fn class(index: usize) -> Self {
        Self {
            payload: Payload::Class(index),
            mask: None,
        }
    }

    /// A masked signal; masked coordinates of `values` are zeroed.
    pub fn masked(values: &[f64], mask: Mask) -> Result<Self> {
        let payload = Payload::Continuous(mask.apply(values)?);
        Ok(Self {
            payload,
            mask: Some(mask),
        })
    }
}

/// A modality spec together with its frozen encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Modality {
    pub spec: ModalitySpec,
    pub table: Option<EmbeddingTable>,
}

impl Modality {
    pub fn new(spec: ModalitySpec, table: Option<EmbeddingTable>) -> Result<Self> {
        match (spec.encoder, &table) {
            (EncoderKind::EmbeddingTable, Some(t)) if t.classes == spec.size => {}
            (EncoderKind::EmbeddingTable, _) => {
                return Err(Error::Config(
                    "embedding encoder needs a table with one row per class".into(),
                ))
            }
            (_, None) => {}
            (_, Some(_)) => {
                return Err(Error::Config(format!(
                    "{} encoder takes no table",
                    spec.encoder.name()
                )))
            }
        }
        Ok(Self { spec, table })
    }

    pub fn encode(&self, datum: &ModalityDatum, dim: usize) -> Result<Vec<f64>> {
        encode(&self.spec, datum, self.table.as_ref(), dim)
    }
}

fn project_sphere(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Maps a datum into the diffusion space of dimension `dim`.
pub fn encode(
    spec: &ModalitySpec,
    datum: &ModalityDatum,
    table: Option<&EmbeddingTable>,
    dim: usize,
) -> Result<Vec<f64>> {
    match (spec.encoder, &datum.payload) {
        (EncoderKind::Identity, Payload::Continuous(v)) => {
            check_dim("identity encoder", dim, v.len())?;
            Ok(v.clone())
        }
        (EncoderKind::Masker, Payload::Continuous(v)) => {
            check_dim("masker encoder", dim, v.len())?;
            match &datum.mask {
                Some(mask) => mask.apply(v),
                None => Ok(v.clone()),
            }
        }
        (EncoderKind::EmbeddingTable, payload) => {
            let table = table.ok_or_else(|| Error::Config("missing embedding table".into()))?;
            check_dim("embedding table width", dim, table.dim)?;
            match payload {
                Payload::Class(k) => {
                    if *k >= table.classes {
                        return Err(Error::ClassOutOfRange {
                            index: *k,
                            classes: table.classes,
                        });
                    }
                    Ok(table.row(*k).to_vec())
                }
                Payload::Soft(p) => {
                    check_dim("class probabilities", table.classes, p.len())?;
                    let mut out = vec![0.0; dim];
                    for (k, pk) in p.iter().enumerate() {
                        for (o, v) in out.iter_mut().zip(table.row(k)) {
                            *o += pk * v;
                        }
                    }
                    Ok(out)
                }
                Payload::Continuous(_) => Err(Error::Config(
                    "embedding encoder expects a class payload".into(),
                )),
            }
        }
        (enc, _) => Err(Error::Config(format!(
            "{} encoder expects a continuous payload",
            enc.name()
        ))),
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Negative log-likelihood of `datum` under the head prediction.
///
/// Categorical heads give cross-entropy of the softmaxed logits; continuous
/// heads give the mean squared error against the payload.
pub fn modality_nll(spec: &ModalitySpec, prediction: &[f64], datum: &ModalityDatum) -> Result<f64> {
    modality_nll_grad(spec, prediction, datum).map(|(loss, _)| loss)
}

/// [`modality_nll`] together with its gradient with respect to `prediction`.
pub fn modality_nll_grad(
    spec: &ModalitySpec,
    prediction: &[f64],
    datum: &ModalityDatum,
) -> Result<(f64, Vec<f64>)> {
    check_dim("head output", spec.head_dim(), prediction.len())?;
    if prediction.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("head prediction".into()));
    }
    match spec.kind {
        ModalityKind::Categorical => {
            let target = match &datum.payload {
                Payload::Class(k) if *k < spec.size => {
                    let mut t = vec![0.0; spec.size];
                    t[*k] = 1.0;
                    t
                }
                Payload::Class(k) => {
                    return Err(Error::ClassOutOfRange {
                        index: *k,
                        classes: spec.size,
                    })
                }
                Payload::Soft(p) => {
                    check_dim("class probabilities", spec.size, p.len())?;
                    p.clone()
                }
                Payload::Continuous(_) => {
                    return Err(Error::Config("categorical head needs a class target".into()))
                }
            };
            let max = prediction.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + prediction.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let loss = target
                .iter()
                .zip(prediction)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, l)| p * (lse - l))
                .sum();
            let probs = softmax(prediction);
            let mass: f64 = target.iter().sum();
            let grad = probs
                .iter()
                .zip(&target)
                .map(|(q, p)| mass * q - p)
                .collect();
            Ok((loss, grad))
        }
        ModalityKind::Continuous => {
            let target = match &datum.payload {
                Payload::Continuous(v) => match (&datum.mask, spec.encoder) {
                    (Some(mask), EncoderKind::Masker) => mask.apply(v)?,
                    _ => v.clone(),
                },
                _ => return Err(Error::Config("continuous head needs a signal target".into())),
            };
            check_dim("head target", prediction.len(), target.len())?;
            let n = target.len() as f64;
            let loss = prediction
                .iter()
                .zip(&target)
                .map(|(p, y)| (p - y).powi(2))
                .sum::<f64>()
                / n;
            let grad = prediction
                .iter()
                .zip(&target)
                .map(|(p, y)| 2.0 * (p - y) / n)
                .collect();
            Ok((loss, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn label_spec(k: usize) -> ModalitySpec {
        ModalitySpec::categorical(k, HeadPlacement::MidTrunk).unwrap()
    }

    #[test]
    fn identity_and_masker_encoders() {
        let id = ModalitySpec::continuous(3, EncoderKind::Identity, HeadPlacement::EndTrunk).unwrap();
        let d = ModalityDatum::continuous(vec![1.0, -2.0, 0.5]);
        assert_eq!(encode(&id, &d, None, 3).unwrap(), vec![1.0, -2.0, 0.5]);

        let mk = ModalitySpec::continuous(4, EncoderKind::Masker, HeadPlacement::EndTrunk).unwrap();
        let mask = Mask {
            height: 1,
            width: 4,
            bits: vec![false, true, false, false],
        };
        let d = ModalityDatum {
            payload: Payload::Continuous(vec![1.0, 2.0, 3.0, 4.0]),
            mask: Some(mask.clone()),
        };
        let once = encode(&mk, &d, None, 4).unwrap();
        assert_eq!(once, vec![1.0, 0.0, 3.0, 4.0]);
        let again = ModalityDatum {
            payload: Payload::Continuous(once.clone()),
            mask: Some(mask),
        };
        assert_eq!(encode(&mk, &again, None, 4).unwrap(), once);
    }

    #[test]
    fn embedding_lookup_and_errors() {
        let table = EmbeddingTable::seeded(5, 3, 11);
        let spec = label_spec(5);
        let e = encode(&spec, &ModalityDatum::class(3), Some(&table), 3).unwrap();
        assert_eq!(e, table.row(3));
        assert!(matches!(
            encode(&spec, &ModalityDatum::class(5), Some(&table), 3),
            Err(Error::ClassOutOfRange { index: 5, classes: 5 })
        ));
        assert!(encode(&spec, &ModalityDatum::class(1), Some(&table), 4).is_err());
        let mut soft = vec![0.0; 5];
        soft[2] = 1.0;
        let d = ModalityDatum {
            payload: Payload::Soft(soft),
            mask: None,
        };
        assert_eq!(encode(&spec, &d, Some(&table), 3).unwrap(), table.row(2));
    }

    #[test]
    fn spec_validation() {
        assert!(ModalitySpec::categorical(1, HeadPlacement::MidTrunk).is_err());
        assert!(ModalitySpec::new(
            ModalityKind::Categorical,
            EncoderKind::Identity,
            HeadPlacement::MidTrunk,
            4
        )
        .is_err());
        assert!(ModalitySpec::new(
            ModalityKind::Continuous,
            EncoderKind::EmbeddingTable,
            HeadPlacement::MidTrunk,
            4
        )
        .is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let spec = label_spec(4);
        let uniform = modality_nll(&spec, &[0.0; 4], &ModalityDatum::class(2)).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-15);
        assert!((uniform - 1.3862944).abs() < 1e-7);
        let sharp = modality_nll(&spec, &[0.0, 0.0, 3.0, 0.0], &ModalityDatum::class(2)).unwrap();
        assert!(sharp < uniform && sharp > 0.0);
        assert!(modality_nll(&spec, &[f64::NAN, 0.0, 0.0, 0.0], &ModalityDatum::class(0)).is_err());
    }

    #[test]
    fn mse_is_zero_at_target() {
        let spec = ModalitySpec::continuous(3, EncoderKind::Identity, HeadPlacement::EndTrunk).unwrap();
        let d = ModalityDatum::continuous(vec![0.1, 0.2, 0.3]);
        assert_eq!(modality_nll(&spec, &[0.1, 0.2, 0.3], &d).unwrap(), 0.0);
        let l = modality_nll(&spec, &[0.0, 0.2, 0.3], &d).unwrap();
        assert!((l - 0.01 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nll_gradients_match_differences() {
        let spec = label_spec(3);
        let logits = [0.3, -0.2, 1.1];
        let d = ModalityDatum::class(1);
        let (_, g) = modality_nll_grad(&spec, &logits, &d).unwrap();
        for k in 0..3 {
            let mut up = logits;
            let mut dn = logits;
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (modality_nll(&spec, &up, &d).unwrap() - modality_nll(&spec, &dn, &d).unwrap()) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_patch_mask_is_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = MaskSampler::default();
        let m = s.sample_with_count(16, 16, 0, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 0);
        assert!(s.sample(3, 16, &mut rng).is_err());
    }

    #[test]
    fn mask_fraction_bounded_by_patch_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = MaskSampler {
            patch: 16,
            max_patches: 10,
        };
        for _ in 0..200 {
            let m = s.sample_with_count(64, 64, 10, &mut rng).unwrap();
            assert!(m.fraction() <= 10.0 * 256.0 / 4096.0);
        }
    }

    #[test]
    fn pbm_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = MaskSampler::default().sample_with_count(6, 9, 3, &mut rng).unwrap();
        let mut buf = Vec::new();
        m.write_pbm(&mut buf).unwrap();
        assert_eq!(Mask::read_pbm(buf.as_slice()).unwrap(), m);
        assert!(Mask::read_pbm("P1\n2 2\n1 0 1\n".as_bytes()).is_err());
    }

    #[test]
    fn embedding_rows_are_spread() {
        let t = EmbeddingTable::seeded(8, 2, 1);
        let mut min = f64::MAX;
        for a in 0..8 {
            let norm = t.row(a).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 2f64.sqrt()).abs() < 1e-12);
            for b in a + 1..8 {
                let d: f64 = t.row(a).iter().zip(t.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                min = min.min(d.sqrt());
            }
        }
        // a regular octagon on this circle has side 2 sqrt(2) sin(pi / 8) ~ 1.08
        assert!(min > 1.0, "{min}");
        let line = EmbeddingTable::seeded(3, 1, 4);
        let mut v = line.data.clone();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_csv_round_trip() {
        let t = EmbeddingTable::seeded(4, 2, 77);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(EmbeddingTable::read_csv(buf.as_slice()).unwrap(), t);
        assert_eq!(EmbeddingTable::seeded(4, 2, 77), t);
    }
}
