//! Declarative experiment settings: which toy task, how the model is built,
//! how it is trained and sampled. The tuned presets are the settings used by
//! the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserConfig, Variant};
use crate::error::{Error, Result};
use crate::inference::SamplerConfig;
use crate::modalities::{HeadPlacement, MaskSampler};
use crate::model::Model;
use crate::schedule::{NoiseSchedule, ScheduleKind, WeightRule};
use crate::tasks::{gen_labeled_mixture, gen_masked_signals, gen_paired_transition, TaskKind, ToyDataset, Transform};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum TaskParams {
    Mixture { classes: usize, dim: usize, sigma: f64 },
    Masked { height: usize, width: usize, sampler: MaskSampler },
    Paired { height: usize, width: usize, transform: Transform },
}

impl TaskParams {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskParams::Mixture { .. } => TaskKind::LabeledMixture,
            TaskParams::Masked { .. } => TaskKind::MaskedSignals,
            TaskParams::Paired { .. } => TaskKind::PairedTransition,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub variant: Variant,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub weights: WeightRule,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_features: usize,
    pub time_embed: usize,
    pub head_width: usize,
    pub label_head: HeadPlacement,
    pub init_seed: u64,
    pub table_seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            variant: Variant::X,
            schedule: ScheduleKind::Cosine,
            steps: 100,
            weights: WeightRule::TimeRatio { scale: 0.01 },
            hidden_width: 256,
            hidden_layers: 3,
            time_features: 64,
            time_embed: 64,
            head_width: 128,
            label_head: HeadPlacement::MidTrunk,
            init_seed: 0,
            table_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub task: TaskParams,
    pub examples: usize,
    pub data_seed: u64,
    pub model: ModelSettings,
    pub train: TrainConfig,
    /// Range the sampler clamps the implied clean signal to.
    pub clip_z0: Option<(f64, f64)>,
}

impl Setup {
    /// Tuned settings for each toy task.
    pub fn preset(kind: TaskKind) -> Self {
        let train = TrainConfig {
            steps: 5000,
            batch: 64,
            lr: 1e-3,
            seed: 1,
            cond_dropout: 0.1,
            clip_norm: Some(0.5),
            ..TrainConfig::default()
        };
        match kind {
            TaskKind::LabeledMixture => Self {
                task: TaskParams::Mixture {
                    classes: 8,
                    dim: 2,
                    sigma: 0.05,
                },
                examples: 4096,
                data_seed: 7,
                model: ModelSettings {
                    hidden_width: 128,
                    ..ModelSettings::default()
                },
                train: TrainConfig { lr: 2e-3, ..train },
                clip_z0: None,
            },
            TaskKind::MaskedSignals => Self {
                task: TaskParams::Masked {
                    height: 16,
                    width: 16,
                    sampler: MaskSampler::default(),
                },
                examples: 4096,
                data_seed: 7,
                model: ModelSettings {
                    hidden_width: 512,
                    label_head: HeadPlacement::EndTrunk,
                    ..ModelSettings::default()
                },
                train,
                clip_z0: Some((-1.0, 1.0)),
            },
            TaskKind::PairedTransition => Self {
                task: TaskParams::Paired {
                    height: 8,
                    width: 8,
                    transform: Transform::BlurInvert,
                },
                examples: 4096,
                data_seed: 7,
                model: ModelSettings {
                    hidden_width: 256,
                    label_head: HeadPlacement::EndTrunk,
                    ..ModelSettings::default()
                },
                train,
                clip_z0: Some((-1.0, 1.0)),
            },
        }
    }

    pub fn dataset(&self) -> Result<ToyDataset> {
        match self.task {
            TaskParams::Mixture { classes, dim, sigma } => {
                gen_labeled_mixture(classes, dim, sigma, self.examples, self.data_seed)
            }
            TaskParams::Masked { height, width, sampler } => {
                gen_masked_signals(height, width, self.examples, sampler, self.data_seed)
            }
            TaskParams::Paired {
                height,
                width,
                transform,
            } => gen_paired_transition(height, width, self.examples, transform, self.data_seed),
        }
    }

    /// A freshly initialized model wired for `data`.
    pub fn model_for(&self, data: &ToyDataset) -> Result<Model> {
        if data.kind != self.task.kind() {
            return Err(Error::Config(format!(
                "dataset holds a {} task, settings describe {}",
                data.kind.name(),
                self.task.kind().name()
            )));
        }
        let m = &self.model;
        let mods = data.modalities(m.label_head, m.table_seed)?;
        let specs: Vec<_> = mods.iter().map(|x| x.spec).collect();
        let schedule = NoiseSchedule::build(m.schedule, m.steps, mods.len(), m.weights)?;
        let mut cfg = DenoiserConfig::new(data.dim, m.steps, m.variant, &specs);
        cfg.hidden_width = m.hidden_width;
        cfg.hidden_layers = m.hidden_layers;
        cfg.time_features = m.time_features;
        cfg.time_embed = m.time_embed;
        cfg.head_width = m.head_width;
        let den = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(m.init_seed))?;
        Model::new(den, mods, schedule)
    }

    /// Sampler options for this task with the given seed.
    pub fn sampler(&self, base: SamplerConfig) -> SamplerConfig {
        SamplerConfig {
            clip_z0: self.clip_z0,
            ..base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build() {
        for kind in [TaskKind::LabeledMixture, TaskKind::MaskedSignals, TaskKind::PairedTransition] {
            let mut s = Setup::preset(kind);
            s.examples = 4;
            let data = s.dataset().unwrap();
            let model = s.model_for(&data).unwrap();
            assert_eq!(model.dim(), data.dim);
            assert_eq!(model.modalities.len(), 1);
        }
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let mut s = Setup::preset(TaskKind::LabeledMixture);
        s.examples = 4;
        let data = s.dataset().unwrap();
        let other = Setup::preset(TaskKind::PairedTransition);
        assert!(matches!(other.model_for(&data), Err(Error::Config(_))));
    }
}
