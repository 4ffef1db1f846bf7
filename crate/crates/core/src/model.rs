//! A trained denoiser together with its modalities and noise schedule.

use crate::denoiser::{Denoiser, DenoiserConfig, Variant};
use crate::diffusion::EncodedBundle;
use crate::error::{check_dim, Error, Result};
use crate::modalities::{Modality, ModalityDatum, ModalitySpec};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct Model {
    pub denoiser: Denoiser,
    pub modalities: Vec<Modality>,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(denoiser: Denoiser, modalities: Vec<Modality>, schedule: NoiseSchedule) -> Result<Self> {
        let cfg = &denoiser.config;
        check_dim("schedule modality count", modalities.len(), schedule.modalities())?;
        check_dim("denoiser head count", modalities.len(), cfg.heads.len())?;
        if cfg.steps != schedule.steps() {
            return Err(Error::Config(format!(
                "denoiser built for T={} but schedule has T={}",
                cfg.steps,
                schedule.steps()
            )));
        }
        for (m, h) in modalities.iter().zip(&cfg.heads) {
            check_dim("head output", m.spec.head_dim(), h.out_dim)?;
        }
        Ok(Self {
            denoiser,
            modalities,
            schedule,
        })
    }

    pub fn dim(&self) -> usize {
        self.denoiser.config.dim
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn variant(&self) -> Variant {
        self.denoiser.variant()
    }

    pub fn specs(&self) -> Vec<ModalitySpec> {
        self.modalities.iter().map(|m| m.spec).collect()
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.denoiser.config
    }

    /// Encodes one datum per modality into a fully active bundle.
    pub fn encode(&self, data: &[ModalityDatum]) -> Result<EncodedBundle> {
        check_dim("modality data", self.modalities.len(), data.len())?;
        let dim = self.dim();
        let enc = self
            .modalities
            .iter()
            .zip(data)
            .map(|(m, d)| m.encode(d, dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedBundle::new(enc))
    }
}
