//! Multi-task diffusion: a denoising diffusion model whose forward process
//! aggregates encoded data from several modalities, trained jointly with
//! per-modality prediction heads on a shared trunk.

pub mod archive;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod inference;
pub mod modalities;
pub mod model;
pub mod oracle;
pub mod schedule;
pub mod setup;
pub mod tasks;
pub mod training;

pub use denoiser::{Denoiser, DenoiserConfig, DenoiserOutput, Variant};
pub use diffusion::{EncodedBundle, LatentState, NoiseScaling, Posterior};
pub use error::{Error, Result};
pub use inference::{restore, sample, SampleMode, SampleOutput, SamplerConfig};
pub use modalities::{
    EncoderKind, HeadPlacement, Mask, MaskSampler, Modality, ModalityDatum, ModalityKind,
    ModalitySpec, Payload,
};
pub use model::Model;
pub use schedule::{NoiseSchedule, ScheduleKind, WeightRule};
pub use setup::{ModelSettings, Setup, TaskParams};
pub use tasks::{Example, TaskKind, ToyDataset, Transform};
pub use training::{TrainConfig, TrainMetrics, Trainer};
