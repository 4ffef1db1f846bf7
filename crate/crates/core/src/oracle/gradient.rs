//! Central finite differences against the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{CheckReport, Suite};
use crate::denoiser::{Denoiser, DenoiserConfig, Variant};
use crate::error::Result;
use crate::modalities::{EmbeddingTable, EncoderKind, HeadPlacement, Modality, ModalityDatum, ModalityKind, ModalitySpec};
use crate::model::Model;
use crate::schedule::{NoiseSchedule, ScheduleKind, WeightRule};
use crate::tasks::Example;
use crate::training::{batch_loss, forward_loss, prepare_batch};

const DIM: usize = 3;
const CLASSES: usize = 3;
const STEP: f64 = 1e-5;
const LAMBDA: f64 = 0.1;

/// A small network layout for the gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCase {
    pub variant: Variant,
    pub heads: &'static [(ModalityKind, HeadPlacement)],
}

impl GradientCase {
    pub const STANDARD: [GradientCase; 5] = [
        GradientCase {
            variant: Variant::U,
            heads: &[(ModalityKind::Categorical, HeadPlacement::MidTrunk)],
        },
        GradientCase {
            variant: Variant::U,
            heads: &[(ModalityKind::Continuous, HeadPlacement::EndTrunk)],
        },
        GradientCase {
            variant: Variant::X,
            heads: &[
                (ModalityKind::Categorical, HeadPlacement::MidTrunk),
                (ModalityKind::Continuous, HeadPlacement::EndTrunk),
            ],
        },
        GradientCase {
            variant: Variant::X,
            heads: &[(ModalityKind::Categorical, HeadPlacement::EndTrunk)],
        },
        GradientCase {
            variant: Variant::X,
            heads: &[(ModalityKind::Continuous, HeadPlacement::MidTrunk)],
        },
    ];

    fn label(&self) -> String {
        let heads: Vec<String> = self
            .heads
            .iter()
            .map(|(k, p)| format!("{}@{}", k.name(), p.name()))
            .collect();
        format!("{} [{}]", self.variant.name(), heads.join(", "))
    }
}

/// Builds a randomized net for `case` (every parameter perturbed, so that
/// zero-initialized layers carry signal) and a fixed training batch.
pub fn gradient_fixture(case: &GradientCase, seed: u64) -> Result<(Model, crate::training::TrainBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mods = case
        .heads
        .iter()
        .enumerate()
        .map(|(i, &(kind, placement))| match kind {
            ModalityKind::Categorical => Modality::new(
                ModalitySpec::categorical(CLASSES, placement)?,
                Some(EmbeddingTable::seeded(CLASSES, DIM, seed + i as u64)),
            ),
            ModalityKind::Continuous => {
                Modality::new(ModalitySpec::continuous(DIM, EncoderKind::Identity, placement)?, None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let specs: Vec<_> = mods.iter().map(|m| m.spec).collect();
    let steps = 10;
    let sched = NoiseSchedule::build(ScheduleKind::Cosine, steps, mods.len(), WeightRule::TimeRatio { scale: 1.0 })?;
    let mut cfg = DenoiserConfig::new(DIM, steps, case.variant, &specs);
    cfg.hidden_width = 6;
    cfg.hidden_layers = 3;
    cfg.time_features = 4;
    cfg.time_embed = 4;
    cfg.head_width = 5;
    let mut den = Denoiser::new(cfg, &mut rng)?;
    let jitter = Normal::new(0.0, 0.05).expect("finite std");
    for tensor in den.params.tensors_mut() {
        tensor.iter_mut().for_each(|v| *v += jitter.sample(&mut rng));
    }
    let model = Model::new(den, mods, sched)?;

    let examples: Vec<Example> = (0..4)
        .map(|_| Example {
            z0: (0..DIM).map(|_| rng.sample(StandardNormal)).collect(),
            data: case
                .heads
                .iter()
                .map(|(k, _)| match k {
                    ModalityKind::Categorical => ModalityDatum::class(rng.random_range(0..CLASSES)),
                    ModalityKind::Continuous => {
                        ModalityDatum::continuous((0..DIM).map(|_| rng.sample(StandardNormal)).collect())
                    }
                })
                .collect(),
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let dropout = if case.variant == Variant::X { 0.3 } else { 0.0 };
    let batch = prepare_batch(&model, &refs, dropout, &mut rng)?;
    Ok((model, batch))
}

/// Largest relative error `|g - g_fd| / max(|g_fd|, floor)` over every
/// parameter, with step `1e-5`. The floor is `1e-3` of the largest
/// `|g_fd|`, below which central differences carry only rounding noise. With `corrupt` the analytic gradient is
/// taken at a different loss weight, which must be detected.
pub fn gradient_check(case: &GradientCase, seed: u64, corrupt: bool) -> Result<CheckReport> {
    let (mut model, batch) = gradient_fixture(case, seed)?;
    let lambda_analytic = if corrupt { 1.5 * LAMBDA } else { LAMBDA };
    let (_, grads, cache) = forward_loss(&model, &batch, lambda_analytic)?;
    let analytic: Vec<Vec<f64>> = model
        .denoiser
        .backward(&cache, &grads)?
        .tensors()
        .into_iter()
        .map(|(_, _, v)| v.to_vec())
        .collect();

    let mut pairs = Vec::new();
    for (k, g) in analytic.iter().enumerate() {
        for (j, &ga) in g.iter().enumerate() {
            let orig = model.denoiser.params.tensors_mut()[k][j];
            model.denoiser.params.tensors_mut()[k][j] = orig + STEP;
            let up = batch_loss(&model, &batch, LAMBDA)?.total();
            model.denoiser.params.tensors_mut()[k][j] = orig - STEP;
            let down = batch_loss(&model, &batch, LAMBDA)?.total();
            model.denoiser.params.tensors_mut()[k][j] = orig;
            pairs.push((ga, (up - down) / (2.0 * STEP)));
        }
    }
    let floor = 1e-3 * pairs.iter().map(|(_, fd)| fd.abs()).fold(0.0, f64::max);
    let worst = pairs
        .iter()
        .map(|(ga, fd)| (ga - fd).abs() / fd.abs().max(floor))
        .fold(0.0, f64::max);
    let params = model.denoiser.params.num_params();
    let name = if corrupt {
        format!("analytic at 1.5x lambda, {} ({params} params)", case.label())
    } else {
        format!("finite differences, {} ({params} params)", case.label())
    };
    let report = CheckReport::new(Suite::Gradient, name, worst, 1e-4);
    Ok(if corrupt { report.into_control() } else { report })
}
