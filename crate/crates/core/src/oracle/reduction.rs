//! Single-task reductions: without aggregation the model must coincide with
//! a plain DDPM on identical random streams.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::reference::{self, RefAdam, RefSchedule};
use super::{CheckReport, Suite};
use crate::denoiser::{Denoiser, DenoiserConfig, Variant};
use crate::diffusion::{marginal_sample, posterior_params, posterior_params_eps, EncodedBundle};
use crate::error::Result;
use crate::inference::{sample_chains, SampleMode, SamplerConfig};
use crate::modalities::{EncoderKind, HeadPlacement, Modality, ModalityDatum, ModalitySpec};
use crate::model::Model;
use crate::schedule::{NoiseSchedule, ScheduleKind, WeightRule};
use crate::tasks::Example;
use crate::training::{elbo_eval, EpsSource, OptimizerKind, TrainConfig, Trainer};

const DIM: usize = 4;
const STEPS: usize = 20;
const TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionCase {
    /// No modalities at all.
    NoModalities,
    /// One conditioning modality whose aggregation weights are all zero.
    ZeroWeights,
}

impl ReductionCase {
    fn label(self) -> &'static str {
        match self {
            ReductionCase::NoModalities => "N=0",
            ReductionCase::ZeroWeights => "w=0",
        }
    }
}

fn small_model(n: usize, rule: WeightRule, seed: u64) -> Result<Model> {
    let sched = NoiseSchedule::build(ScheduleKind::Cosine, STEPS, n, rule)?;
    let mods = (0..n)
        .map(|_| {
            ModalitySpec::continuous(DIM, EncoderKind::Identity, HeadPlacement::EndTrunk)
                .and_then(|s| Modality::new(s, None))
        })
        .collect::<Result<Vec<_>>>()?;
    let specs: Vec<_> = mods.iter().map(|m| m.spec).collect();
    let variant = if n == 0 { Variant::U } else { Variant::X };
    let mut cfg = DenoiserConfig::new(DIM, STEPS, variant, &specs);
    cfg.hidden_width = 16;
    cfg.time_features = 8;
    cfg.time_embed = 8;
    cfg.head_width = 8;
    let den = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Model::new(den, mods, sched)
}

fn case_model(case: ReductionCase, seed: u64) -> Result<Model> {
    match case {
        ReductionCase::NoModalities => small_model(0, WeightRule::Zero, seed),
        ReductionCase::ZeroWeights => small_model(1, WeightRule::Zero, seed),
    }
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Marginal, posterior, training-step and sampler agreement with a DDPM.
pub fn ddpm_reduction_check(case: ReductionCase, seed: u64) -> Result<Vec<CheckReport>> {
    let model = case_model(case, seed)?;
    let sched = &model.schedule;
    let rs = RefSchedule::new(sched.betas());
    let n = sched.modalities();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = case.label();

    let (mut marg, mut post, mut post_eps) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let t = rng.random_range(1..=STEPS);
        let z0 = normals(&mut rng, DIM);
        let eps = normals(&mut rng, DIM);
        let bundle = EncodedBundle::new((0..n).map(|_| normals(&mut rng, DIM)).collect());
        let zt = marginal_sample(&z0, &bundle, t, sched, &eps)?;
        marg = marg.max(max_abs(&zt.z, &reference::marginal(&rs, &z0, t, &eps)));
        let p = posterior_params(&z0, &zt, &bundle, sched)?;
        let (m, v) = reference::posterior(&rs, &z0, &zt.z, t);
        post = post.max(max_abs(&p.mean, &m)).max((p.var - v).abs());
        let p = posterior_params_eps(&zt, &eps, &bundle, sched)?;
        let (m, v) = reference::posterior_from_eps(&rs, &zt.z, t, &eps);
        post_eps = post_eps.max(max_abs(&p.mean, &m)).max((p.var - v).abs());
    }

    let data: Vec<Example> = (0..32)
        .map(|_| Example {
            z0: normals(&mut rng, DIM),
            data: (0..n).map(|_| ModalityDatum::continuous(normals(&mut rng, DIM))).collect(),
        })
        .collect();
    let cfg = TrainConfig {
        lambda: 0.0,
        batch: 8,
        lr: 1e-3,
        optimizer: OptimizerKind::Adam,
        seed,
        cond_dropout: 0.0,
        clip_norm: None,
        steps: 3,
    };
    let mut reference_model = model.clone();
    let mut trainer = Trainer::new(model.clone(), cfg.clone())?;
    let mut ref_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = RefAdam::default();
    let mut loss_dev = 0.0f64;
    for _ in 0..cfg.steps {
        let m = trainer.train_step(&data)?;
        let l = reference::train_step(&mut reference_model, &rs, &data, cfg.batch, cfg.lr, &mut adam, &mut ref_rng)?;
        loss_dev = loss_dev.max((m.mse_loss - l).abs()).max((m.total_loss - l).abs());
    }
    let trained = trainer.into_model();
    let mut param_dev = 0.0f64;
    for ((_, _, a), (_, _, b)) in trained
        .denoiser
        .params
        .tensors()
        .iter()
        .zip(reference_model.denoiser.params.tensors().iter())
    {
        param_dev = param_dev.max(max_abs(a, b));
    }

    let chains = 3;
    let given: Vec<Vec<Option<ModalityDatum>>> = (0..chains)
        .map(|_| (0..n).map(|_| Some(ModalityDatum::continuous(normals(&mut rng, DIM)))).collect())
        .collect();
    let mut scfg = if n == 0 {
        SamplerConfig::unconditional(seed)
    } else {
        SamplerConfig::new(SampleMode::Conditional, (0..n).collect(), seed)
    };
    scfg.record_trajectory = true;
    let outs = sample_chains(&model, &scfg, &given)?;
    let cond = (n > 0).then(|| {
        let mut c = Array2::zeros((chains, DIM));
        for (b, g) in given.iter().enumerate() {
            for d in g.iter().flatten() {
                if let crate::modalities::Payload::Continuous(v) = &d.payload {
                    for (dst, x) in c.row_mut(b).iter_mut().zip(v) {
                        *dst += x;
                    }
                }
            }
        }
        c
    });
    let paths = reference::sample(&model, &rs, chains, seed, cond.as_ref(), false)?;
    let wrong = reference::sample(&model, &rs, chains, seed, cond.as_ref(), true)?;
    let traj_dev = |paths: &[Vec<Vec<f64>>]| {
        let mut worst = 0.0f64;
        for (o, p) in outs.iter().zip(paths) {
            if o.trajectory.len() != p.len() {
                return f64::INFINITY;
            }
            for (a, b) in o.trajectory.iter().zip(p) {
                worst = worst.max(max_abs(a, b));
            }
        }
        worst
    };

    Ok(vec![
        CheckReport::new(Suite::Reduction, format!("marginal ({label})"), marg, TOL),
        CheckReport::new(Suite::Reduction, format!("posterior, clean form ({label})"), post, TOL),
        CheckReport::new(Suite::Reduction, format!("posterior, noise form ({label})"), post_eps, TOL),
        CheckReport::new(Suite::Reduction, format!("training loss, 3 steps ({label})"), loss_dev, TOL),
        CheckReport::new(Suite::Reduction, format!("parameters after 3 steps ({label})"), param_dev, TOL),
        CheckReport::new(Suite::Reduction, format!("sampler trajectories ({label})"), traj_dev(&paths), TOL),
        CheckReport::new(
            Suite::Reduction,
            format!("sampler vs beta_t-variance DDPM ({label})"),
            traj_dev(&wrong),
            TOL,
        )
        .into_control(),
    ])
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Without modalities the bound has no modality term and its other terms
/// equal a DDPM bound evaluated on the same draws.
pub fn elbo_reduction_check(seed: u64) -> Result<Vec<CheckReport>> {
    let model = small_model(0, WeightRule::Zero, seed)?;
    let rs = RefSchedule::new(model.schedule.betas());
    let z0 = normals(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xe1b0), DIM);
    let terms = elbo_eval(&model, &z0, &[], EpsSource::Model, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (l0, l1, l3) = reference::elbo(&model, &rs, &z0, &mut ChaCha8Rng::seed_from_u64(seed), false)?;
    let (_, bad_l1, _) = reference::elbo(&model, &rs, &z0, &mut ChaCha8Rng::seed_from_u64(seed), true)?;
    Ok(vec![
        CheckReport::new(Suite::Elbo, "modality term is zero (N=0)", terms.l2.abs(), f64::MIN_POSITIVE),
        CheckReport::new(Suite::Elbo, "L0 vs DDPM (N=0)", rel(terms.l0, l0), 1e-10),
        CheckReport::new(Suite::Elbo, "L1 vs DDPM (N=0)", rel(terms.l1, l1), 1e-10),
        CheckReport::new(Suite::Elbo, "L3 vs DDPM (N=0)", rel(terms.l3, l3), 1e-10),
        CheckReport::new(Suite::Elbo, "L1 vs DDPM with beta_t variance (N=0)", rel(terms.l1, bad_l1), 1e-10)
            .into_control(),
    ])
}

/// With the true noise in place of the prediction, every posterior KL term
/// vanishes.
pub fn exact_eps_check(seed: u64) -> Result<Vec<CheckReport>> {
    let model = small_model(2, WeightRule::TimeRatio { scale: 1.0 }, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe1b1);
    let z0 = normals(&mut rng, DIM);
    let data: Vec<ModalityDatum> = (0..2).map(|_| ModalityDatum::continuous(normals(&mut rng, DIM))).collect();
    let exact = elbo_eval(&model, &z0, &data, EpsSource::Exact, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let learned = elbo_eval(&model, &z0, &data, EpsSource::Model, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(vec![
        CheckReport::new(Suite::Elbo, "L1 with exact noise (N=2)", exact.l1, 1e-10),
        CheckReport::new(Suite::Elbo, "L1 with untrained predictor (N=2)", learned.l1, 1e-10).into_control(),
    ])
}
