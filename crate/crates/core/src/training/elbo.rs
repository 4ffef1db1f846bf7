//! Single-sample evaluation of the variational bound.

use std::f64::consts::PI;

use rand::Rng;

use crate::diffusion::{marginal_sample, posterior_params, posterior_params_eps, standard_normal, LatentState};
use crate::error::{check_dim, Result};
use crate::modalities::{modality_nll, ModalityDatum};
use crate::model::Model;

/// Which noise estimate drives the reverse means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsSource {
    Model,
    /// The true noise used to draw `z_t`; a perfect predictor.
    Exact,
}

/// Bound terms: prior KL, per-step posterior KLs, modality NLLs and the
/// reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.l0 + self.l1 + self.l2 + self.l3
    }
}

/// One Monte Carlo draw of the bound for `(z0, data)`.
///
/// Draws `D` standard normals per step for `t = 1..=T` and forms `z_t` from
/// the aggregated marginal. The reconstruction term uses a Gaussian decoder
/// with variance `1 - alpha_1`, since the posterior variance vanishes at
/// `t = 1`.
pub fn elbo_eval<R: Rng + ?Sized>(
    model: &Model,
    z0: &[f64],
    data: &[ModalityDatum],
    source: EpsSource,
    rng: &mut R,
) -> Result<ElboTerms> {
    let sched = &model.schedule;
    let dim = model.dim();
    let steps = sched.steps();
    check_dim("elbo z0", dim, z0.len())?;
    let bundle = model.encode(data)?;

    let terminal = crate::diffusion::marginal_mean(z0, &bundle, steps, sched)?;
    let var_t = 1.0 - sched.alpha_bar(steps);
    let l0 = 0.5
        * terminal
            .iter()
            .map(|m| var_t + m * m - 1.0 - var_t.ln())
            .sum::<f64>();

    let (mut l1, mut l2, mut l3) = (0.0, 0.0, 0.0);
    for t in 1..=steps {
        let noise = standard_normal(rng, dim);
        let zt: LatentState = marginal_sample(z0, &bundle, t, sched, &noise)?;
        let out = model.denoiser.forward(&zt, Some(&bundle))?;
        let eps_hat = match source {
            EpsSource::Model => out.eps_hat.clone(),
            EpsSource::Exact => noise,
        };
        for ((m, pred), datum) in model.modalities.iter().zip(&out.head_outputs).zip(data) {
            l2 += modality_nll(&m.spec, pred, datum)?;
        }
        let model_mean = posterior_params_eps(&zt, &eps_hat, &bundle, sched)?.mean;
        if t == 1 {
            let var = sched.beta(1);
            let sq: f64 = z0.iter().zip(&model_mean).map(|(x, m)| (x - m).powi(2)).sum();
            l3 = 0.5 * sq / var + 0.5 * dim as f64 * (2.0 * PI * var).ln();
        } else {
            let post = posterior_params(z0, &zt, &bundle, sched)?;
            let sq: f64 = post
                .mean
                .iter()
                .zip(&model_mean)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            l1 += sq / (2.0 * post.var);
        }
    }
    Ok(ElboTerms { l0, l1, l2, l3 })
}
