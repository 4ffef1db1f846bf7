//! Synthetic datasets with known ground truth.
//!
//! * labeled mixture: 2-D-style points from `K` separated Gaussians paired
//!   with their component label (joint point/label generation);
//! * masked signals: structured `H x W` signals paired with randomly
//!   patch-masked copies (masked training and constrained restoration);
//! * paired transition: source signals paired with a fixed known transform
//!   of themselves (translation).
//!
//! Every dataset is a pure function of its parameters and seed.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::modalities::{
    EmbeddingTable, EncoderKind, HeadPlacement, MaskSampler, Modality, ModalityDatum, ModalitySpec,
};

/// One training pair: the diffusion data `z_0` and the modality data `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub z0: Vec<f64>,
    pub data: Vec<ModalityDatum>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    LabeledMixture,
    MaskedSignals,
    PairedTransition,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LabeledMixture => "labeled_mixture",
            TaskKind::MaskedSignals => "masked_signals",
            TaskKind::PairedTransition => "paired_transition",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled_mixture" => Ok(TaskKind::LabeledMixture),
            "masked_signals" => Ok(TaskKind::MaskedSignals),
            "paired_transition" => Ok(TaskKind::PairedTransition),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Known source-to-target map of the transition task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// 3x3 box blur (edge-clamped) followed by `-0.8 x + 0.1`.
    BlurInvert,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::BlurInvert => "blur_invert",
        }
    }

    pub fn apply(self, signal: &[f64], height: usize, width: usize) -> Vec<f64> {
        match self {
            Transform::Identity => signal.to_vec(),
            Transform::BlurInvert => box_blur(signal, height, width)
                .into_iter()
                .map(|v| (-0.8 * v + 0.1).clamp(-1.0, 1.0))
                .collect(),
        }
    }
}

impl std::str::FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Transform::Identity),
            "blur_invert" => Ok(Transform::BlurInvert),
            other => Err(Error::Config(format!("unknown transform `{other}`"))),
        }
    }
}

fn box_blur(signal: &[f64], height: usize, width: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, height as isize - 1) as usize;
        let c = c.clamp(0, width as isize - 1) as usize;
        signal[r * width + c]
    };
    let mut out = Vec::with_capacity(signal.len());
    for r in 0..height as isize {
        for c in 0..width as isize {
            let mut acc = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    acc += at(r + dr, c + dc);
                }
            }
            out.push(acc / 9.0);
        }
    }
    out
}

/// Generative parameters retained for tests and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Mixture {
        means: Vec<Vec<f64>>,
        sigma: f64,
    },
    Masked {
        height: usize,
        width: usize,
        sampler: MaskSampler,
        /// Clean signals, one per example (identical to the `z0`s).
        clean: Vec<Vec<f64>>,
    },
    Paired {
        height: usize,
        width: usize,
        transform: Transform,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub kind: TaskKind,
    pub seed: u64,
    pub dim: usize,
    pub examples: Vec<Example>,
    pub truth: GroundTruth,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Modality wiring used for this task.
    ///
    /// `label_head` picks the trunk tap of categorical heads; `table_seed`
    /// seeds the frozen label embedding.
    pub fn modalities(&self, label_head: HeadPlacement, table_seed: u64) -> Result<Vec<Modality>> {
        match &self.truth {
            GroundTruth::Mixture { means, .. } => {
                let classes = means.len().max(2);
                let spec = ModalitySpec::categorical(classes, label_head)?;
                let table = EmbeddingTable::seeded(classes, self.dim, table_seed);
                Ok(vec![Modality::new(spec, Some(table))?])
            }
            GroundTruth::Masked { .. } => {
                let spec = ModalitySpec::continuous(self.dim, EncoderKind::Masker, HeadPlacement::EndTrunk)?;
                Ok(vec![Modality::new(spec, None)?])
            }
            GroundTruth::Paired { .. } => {
                let spec =
                    ModalitySpec::continuous(self.dim, EncoderKind::Identity, HeadPlacement::EndTrunk)?;
                Ok(vec![Modality::new(spec, None)?])
            }
        }
    }

    /// Signal grid shape for image-like tasks.
    pub fn grid(&self) -> Option<(usize, usize)> {
        match self.truth {
            GroundTruth::Mixture { .. } => None,
            GroundTruth::Masked { height, width, .. } | GroundTruth::Paired { height, width, .. } => {
                Some((height, width))
            }
        }
    }
}

/// Component means on a ring (first two coordinates) whose adjacent spacing
/// exceeds `20 sigma` by 10%, with a random phase.
fn ring_means(classes: usize, dim: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let gap = 22.0 * sigma;
    let phase = rng.random_range(0.0..2.0 * PI);
    if classes == 1 {
        return vec![(0..dim).map(|_| rng.random_range(-0.5..0.5)).collect()];
    }
    (0..classes)
        .map(|k| {
            let mut m = vec![0.0; dim];
            if dim == 1 {
                m[0] = gap * (k as f64 - (classes - 1) as f64 / 2.0);
            } else {
                let radius = (gap / (2.0 * (PI / classes as f64).sin())).max(gap);
                let angle = phase + 2.0 * PI * k as f64 / classes as f64;
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

pub fn gen_labeled_mixture(
    classes: usize,
    dim: usize,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<ToyDataset> {
    if classes == 0 || dim == 0 || !(sigma > 0.0) {
        return Err(Error::Config("mixture needs classes, dim and sigma > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = ring_means(classes, dim, sigma, &mut rng);
    let examples = (0..n)
        .map(|_| {
            let k = rng.random_range(0..classes);
            let z0 = means[k]
                .iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Example {
                z0,
                data: vec![ModalityDatum::class(k)],
            }
        })
        .collect();
    Ok(ToyDataset {
        kind: TaskKind::LabeledMixture,
        seed,
        dim,
        examples,
        truth: GroundTruth::Mixture { means, sigma },
    })
}

/// A structured signal in `[-1, 1]`: a random linear ramp plus one disk or
/// rectangle of constant offset.
pub fn structured_signal<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Vec<f64> {
    let level = rng.random_range(-0.3..0.3);
    let slope = rng.random_range(0.2..0.6);
    let theta = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (theta.cos(), theta.sin());
    let offset = rng.random_range(0.4..0.8) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let cx = rng.random_range(-0.5..0.5);
    let cy = rng.random_range(-0.5..0.5);
    let size = rng.random_range(0.3..0.55);
    let disk = rng.random_bool(0.5);

    let coord = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = coord(r, height);
        for c in 0..width {
            let x = coord(c, width);
            let mut v = level + slope * (x * dx + y * dy);
            let inside = if disk {
                (x - cx).powi(2) + (y - cy).powi(2) <= size * size
            } else {
                (x - cx).abs() <= size && (y - cy).abs() <= 0.7 * size
            };
            if inside {
                v += offset;
            }
            out.push(v.clamp(-1.0, 1.0));
        }
    }
    out
}

pub fn gen_masked_signals(
    height: usize,
    width: usize,
    n: usize,
    sampler: MaskSampler,
    seed: u64,
) -> Result<ToyDataset> {
    if height == 0 || width == 0 {
        return Err(Error::Config("signal grid must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    for _ in 0..n {
        let signal = structured_signal(height, width, &mut rng);
        let mask = sampler.sample(height, width, &mut rng)?;
        examples.push(Example {
            z0: signal.clone(),
            data: vec![ModalityDatum::masked(&signal, mask)?],
        });
        clean.push(signal);
    }
    Ok(ToyDataset {
        kind: TaskKind::MaskedSignals,
        seed,
        dim: height * width,
        examples,
        truth: GroundTruth::Masked {
            height,
            width,
            sampler,
            clean,
        },
    })
}

/// Source/target pairs `(s, transform(s))`; `z0` is the target and the
/// modality is the source.
pub fn gen_paired_transition(
    height: usize,
    width: usize,
    n: usize,
    transform: Transform,
    seed: u64,
) -> Result<ToyDataset> {
    if height == 0 || width == 0 {
        return Err(Error::Config("signal grid must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| {
            let source = structured_signal(height, width, &mut rng);
            Example {
                z0: transform.apply(&source, height, width),
                data: vec![ModalityDatum::continuous(source)],
            }
        })
        .collect();
    Ok(ToyDataset {
        kind: TaskKind::PairedTransition,
        seed,
        dim: height * width,
        examples,
        truth: GroundTruth::Paired {
            height,
            width,
            transform,
        },
    })
}
