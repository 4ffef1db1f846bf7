//! Ancestral sampling with missing-modality bootstrapping.
//!
//! Starting from `z_T ~ N(0, I)`, every step runs the denoiser, refreshes the
//! estimates of the missing modalities from their heads, and takes one
//! reverse step whose aggregation term uses the given data plus the current
//! estimates. Given modalities are never modified.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{DenoiserInput, Variant};
use crate::diffusion::{marginal_mean, reverse_step, reverse_step_clipped, standard_normal, EncodedBundle, LatentState, NoiseScaling};
use crate::error::{check_dim, Error, Result};
use crate::modalities::{argmax, softmax, EncoderKind, Mask, ModalityDatum, ModalityKind, Payload};
use crate::model::Model;
use crate::tasks::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Unconditional,
    Conditional,
    Restore,
}

impl SampleMode {
    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Unconditional => "unconditional",
            SampleMode::Conditional => "conditional",
            SampleMode::Restore => "restore",
        }
    }
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditional" => Ok(SampleMode::Unconditional),
            "conditional" => Ok(SampleMode::Conditional),
            "restore" => Ok(SampleMode::Restore),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

/// How a categorical estimate is re-encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CategoricalUpdate {
    #[default]
    Argmax,
    /// Expected embedding under the predicted class probabilities.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub mode: SampleMode,
    /// Indices of the modalities supplied by the caller.
    pub fixed: Vec<usize>,
    pub seed: u64,
    pub scaling: NoiseScaling,
    pub categorical: CategoricalUpdate,
    /// Exponential averaging of missing-modality estimates; `None` replaces
    /// them outright each step.
    pub ema: Option<f64>,
    /// Clamp the implied clean signal to this range before each step;
    /// `None` uses the plain noise-form update.
    pub clip_z0: Option<(f64, f64)>,
    /// Keep the latent of every step (`z_T` first, `z_0` last).
    pub record_trajectory: bool,
}

impl SamplerConfig {
    pub fn new(mode: SampleMode, fixed: Vec<usize>, seed: u64) -> Self {
        Self {
            mode,
            fixed,
            seed,
            scaling: NoiseScaling::StdDev,
            categorical: CategoricalUpdate::Argmax,
            ema: None,
            clip_z0: None,
            record_trajectory: false,
        }
    }

    pub fn unconditional(seed: u64) -> Self {
        Self::new(SampleMode::Unconditional, Vec::new(), seed)
    }

    fn validate(&self, modalities: usize) -> Result<()> {
        match self.mode {
            SampleMode::Unconditional if !self.fixed.is_empty() => {
                return Err(Error::Config("unconditional mode takes no fixed modalities".into()))
            }
            SampleMode::Conditional | SampleMode::Restore if self.fixed.is_empty() => {
                return Err(Error::Config(format!(
                    "{} mode needs at least one fixed modality",
                    self.mode.name()
                )))
            }
            _ => {}
        }
        if let Some(&i) = self.fixed.iter().find(|&&i| i >= modalities) {
            return Err(Error::Config(format!("fixed modality {i} does not exist")));
        }
        if let Some(a) = self.ema {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config("ema decay must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub z0: Vec<f64>,
    pub modalities: Vec<ModalityDatum>,
    /// Top class probability of each categorical head at the last step.
    pub confidences: Vec<Option<f64>>,
    pub trajectory: Vec<Vec<f64>>,
}

/// Running estimate of one missing modality.
#[derive(Debug, Clone)]
enum Estimate {
    Continuous(Vec<f64>),
    Probs(Vec<f64>),
}

impl Estimate {
    fn datum(&self, rule: CategoricalUpdate) -> ModalityDatum {
        match self {
            Estimate::Continuous(v) => ModalityDatum::continuous(v.clone()),
            Estimate::Probs(p) => match rule {
                CategoricalUpdate::Argmax => ModalityDatum::class(argmax(p)),
                CategoricalUpdate::Soft => ModalityDatum {
                    payload: Payload::Soft(p.clone()),
                    mask: None,
                },
            },
        }
    }

    fn blend(&mut self, fresh: Vec<f64>, ema: Option<f64>) {
        let cur = match self {
            Estimate::Continuous(v) | Estimate::Probs(v) => v,
        };
        match ema {
            None => *cur = fresh,
            Some(a) => cur
                .iter_mut()
                .zip(fresh)
                .for_each(|(c, f)| *c = a * *c + (1.0 - a) * f),
        }
    }
}

/// Samples one chain per entry of `given`; each entry lists one optional
/// datum per modality and must supply exactly `cfg.fixed`.
///
/// RNG order (one ChaCha8 stream from `cfg.seed`): `z_T` for every chain,
/// then per chain the initial draw of each missing modality in index order
/// (continuous: standard normals; categorical: one uniform class), then for
/// `t = T..=2` the reverse-step noise of every chain.
pub fn sample_chains(
    model: &Model,
    cfg: &SamplerConfig,
    given: &[Vec<Option<ModalityDatum>>],
) -> Result<Vec<SampleOutput>> {
    let n_mod = model.modalities.len();
    cfg.validate(n_mod)?;
    if cfg.mode == SampleMode::Restore && model.variant() == Variant::U {
        return Err(Error::Config("restoration needs an X-variant model".into()));
    }
    for g in given {
        check_dim("given modalities", n_mod, g.len())?;
        for (i, d) in g.iter().enumerate() {
            if d.is_some() != cfg.fixed.contains(&i) {
                return Err(Error::Config(format!(
                    "given data must cover exactly the fixed modalities (mismatch at {i})"
                )));
            }
        }
    }
    let chains = given.len();
    if chains == 0 {
        return Ok(Vec::new());
    }

    let dim = model.dim();
    let sched = &model.schedule;
    let steps = sched.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut z: Vec<Vec<f64>> = (0..chains).map(|_| standard_normal(&mut rng, dim)).collect();
    let mut estimates: Vec<Vec<Option<Estimate>>> = Vec::with_capacity(chains);
    for g in given {
        let row = model
            .modalities
            .iter()
            .zip(g)
            .map(|(m, d)| match (d, m.spec.kind) {
                (Some(_), _) => None,
                (None, ModalityKind::Continuous) => {
                    Some(Estimate::Continuous(standard_normal(&mut rng, m.spec.size)))
                }
                (None, ModalityKind::Categorical) => {
                    let mut p = vec![0.0; m.spec.size];
                    p[rng.random_range(0..m.spec.size)] = 1.0;
                    Some(Estimate::Probs(p))
                }
            })
            .collect();
        estimates.push(row);
    }

    // Encodings of the given data and the conditioning input they imply.
    let fixed_enc: Vec<Vec<Option<Vec<f64>>>> = given
        .iter()
        .map(|g| {
            model
                .modalities
                .iter()
                .zip(g)
                .map(|(m, d)| d.as_ref().map(|d| m.encode(d, dim)).transpose())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let cond = match model.variant() {
        Variant::U => None,
        Variant::X => {
            let mut c = Array2::zeros((chains, dim));
            for (b, encs) in fixed_enc.iter().enumerate() {
                for e in encs.iter().flatten() {
                    for (dst, v) in c.row_mut(b).iter_mut().zip(e) {
                        *dst += v;
                    }
                }
            }
            Some(c)
        }
    };

    let mut trajectory: Vec<Vec<Vec<f64>>> = vec![Vec::new(); chains];
    if cfg.record_trajectory {
        for (tr, zb) in trajectory.iter_mut().zip(&z) {
            tr.push(zb.clone());
        }
    }
    let mut confidences = vec![vec![None; n_mod]; chains];

    for t in (1..=steps).rev() {
        let mut zt = Array2::zeros((chains, dim));
        for (b, zb) in z.iter().enumerate() {
            zt.row_mut(b).assign(&ndarray::ArrayView1::from(zb));
        }
        let ts = vec![t; chains];
        let out = model.denoiser.forward_batch(&DenoiserInput {
            z: zt.view(),
            t: &ts,
            cond: cond.as_ref().map(|c| c.view()),
        })?;
        let noise: Vec<Vec<f64>> = if t > 1 {
            (0..chains).map(|_| standard_normal(&mut rng, dim)).collect()
        } else {
            vec![Vec::new(); chains]
        };

        for b in 0..chains {
            let mut enc = Vec::with_capacity(n_mod);
            for (i, m) in model.modalities.iter().enumerate() {
                let head = out.heads[i].row(b).to_vec();
                if m.spec.kind == ModalityKind::Categorical {
                    let p = softmax(&head);
                    confidences[b][i] = Some(p.iter().cloned().fold(0.0, f64::max));
                }
                match &mut estimates[b][i] {
                    Some(est) => {
                        let fresh = match m.spec.kind {
                            ModalityKind::Categorical => softmax(&head),
                            ModalityKind::Continuous => head,
                        };
                        est.blend(fresh, cfg.ema);
                        enc.push(m.encode(&est.datum(cfg.categorical), dim)?);
                    }
                    None => enc.push(fixed_enc[b][i].clone().expect("fixed modality encoded")),
                }
            }
            let bundle = EncodedBundle::new(enc);
            let state = LatentState::new(std::mem::take(&mut z[b]), t);
            let eps_hat = out.eps.row(b).to_vec();
            let next = match cfg.clip_z0 {
                None => reverse_step(&state, &eps_hat, &bundle, sched, &noise[b], cfg.scaling)?,
                Some(range) => {
                    reverse_step_clipped(&state, &eps_hat, &bundle, sched, &noise[b], cfg.scaling, range)?
                }
            };
            if next.z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("latent at t={}", t - 1)));
            }
            z[b] = next.z;
            if cfg.record_trajectory {
                trajectory[b].push(z[b].clone());
            }
        }
    }

    Ok(z
        .into_iter()
        .zip(estimates)
        .zip(given)
        .zip(confidences)
        .zip(trajectory)
        .map(|((((z0, est), g), conf), trajectory)| SampleOutput {
            z0,
            modalities: est
                .iter()
                .zip(g)
                .map(|(e, d)| match (e, d) {
                    (_, Some(d)) => d.clone(),
                    (Some(e), None) => e.datum(cfg.categorical),
                    (None, None) => unreachable!("every modality is given or estimated"),
                })
                .collect(),
            confidences: conf,
            trajectory,
        })
        .collect())
}

/// Draws `n` chains sharing the same given data.
pub fn sample(
    model: &Model,
    cfg: &SamplerConfig,
    given: &[Option<ModalityDatum>],
    n: usize,
) -> Result<Vec<SampleOutput>> {
    sample_chains(model, cfg, &vec![given.to_vec(); n])
}

/// Restored signal plus its consistency with the observed coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Restoration {
    pub signal: Vec<f64>,
    /// MSE over observed coordinates against the input signal.
    pub unmasked_mse: Option<f64>,
    /// MSE over hidden coordinates against the input signal.
    pub masked_mse: Option<f64>,
    /// True when the mask hid everything and plain generation was run.
    pub from_scratch: bool,
}

/// MSE of `pred` against `reference` split into (hidden, observed)
/// coordinates; `None` for an empty region.
pub fn region_mse(pred: &[f64], reference: &[f64], mask: &Mask) -> Result<(Option<f64>, Option<f64>)> {
    check_dim("restored signal", reference.len(), pred.len())?;
    check_dim("mask", reference.len(), mask.len())?;
    let (mut hid, mut obs, mut nh, mut no) = (0.0, 0.0, 0usize, 0usize);
    for ((p, r), &m) in pred.iter().zip(reference).zip(&mask.bits) {
        let e = (p - r).powi(2);
        if m {
            hid += e;
            nh += 1;
        } else {
            obs += e;
            no += 1;
        }
    }
    let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok((avg(hid, nh), avg(obs, no)))
}

fn masker_index(model: &Model) -> Result<usize> {
    model
        .modalities
        .iter()
        .position(|m| m.spec.encoder == EncoderKind::Masker)
        .ok_or_else(|| Error::Config("model has no masked-signal modality".into()))
}

/// Restores each `(signal, mask)` pair; the signal's hidden coordinates are
/// discarded before conditioning.
///
/// `opts` supplies the seed and step options; its mode and fixed set are
/// replaced. Items with a complete mask are generated from scratch in a
/// separate unconditional batch.
pub fn restore_batch(
    model: &Model,
    items: &[(Vec<f64>, Mask)],
    opts: &SamplerConfig,
) -> Result<Vec<Restoration>> {
    if model.variant() == Variant::U {
        return Err(Error::Config("restoration needs an X-variant model".into()));
    }
    let idx = masker_index(model)?;
    let dim = model.dim();
    let n_mod = model.modalities.len();
    let mut conditioned = Vec::new();
    let mut scratch = Vec::new();
    for (k, (signal, mask)) in items.iter().enumerate() {
        check_dim("signal", dim, signal.len())?;
        check_dim("mask", dim, mask.len())?;
        if mask.masked_count() == mask.len() {
            scratch.push(k);
        } else {
            let mut g = vec![None; n_mod];
            g[idx] = Some(ModalityDatum::masked(signal, mask.clone())?);
            conditioned.push((k, g));
        }
    }

    let mut out: Vec<Option<Vec<f64>>> = vec![None; items.len()];
    if !conditioned.is_empty() {
        let cfg = SamplerConfig {
            mode: SampleMode::Restore,
            fixed: vec![idx],
            ..opts.clone()
        };
        let given: Vec<_> = conditioned.iter().map(|(_, g)| g.clone()).collect();
        for ((k, _), s) in conditioned.iter().zip(sample_chains(model, &cfg, &given)?) {
            out[*k] = Some(s.z0);
        }
    }
    if !scratch.is_empty() {
        let cfg = SamplerConfig {
            mode: SampleMode::Unconditional,
            fixed: Vec::new(),
            ..opts.clone()
        };
        let given = vec![vec![None; n_mod]; scratch.len()];
        for (k, s) in scratch.iter().zip(sample_chains(model, &cfg, &given)?) {
            out[*k] = Some(s.z0);
        }
    }

    items
        .iter()
        .zip(out)
        .map(|((signal, mask), restored)| {
            let restored = restored.expect("every item sampled");
            let (masked_mse, unmasked_mse) = region_mse(&restored, signal, mask)?;
            Ok(Restoration {
                signal: restored,
                unmasked_mse,
                masked_mse,
                from_scratch: mask.masked_count() == mask.len(),
            })
        })
        .collect()
}

pub fn restore(model: &Model, signal: &[f64], mask: &Mask, opts: &SamplerConfig) -> Result<Restoration> {
    let mut r = restore_batch(model, &[(signal.to_vec(), mask.clone())], opts)?;
    Ok(r.remove(0))
}

/// Top-1 accuracy of categorical head `modality` on noiseless `z_1`.
///
/// Each `z_1` is the forward mean at `t = 1` with every modality aggregated;
/// the conditioning input omits the predicted modality.
pub fn label_accuracy(model: &Model, examples: &[Example], modality: usize) -> Result<f64> {
    let m = model
        .modalities
        .get(modality)
        .ok_or_else(|| Error::Config(format!("modality {modality} does not exist")))?;
    if m.spec.kind != ModalityKind::Categorical {
        return Err(Error::Config(format!("modality {modality} is not categorical")));
    }
    if examples.is_empty() {
        return Err(Error::Config("label accuracy needs at least one example".into()));
    }
    let dim = model.dim();
    let n = examples.len();
    let mut z = Array2::zeros((n, dim));
    let mut cond = Array2::zeros((n, dim));
    let mut truth = Vec::with_capacity(n);
    for (b, ex) in examples.iter().enumerate() {
        let mut bundle = model.encode(&ex.data)?;
        let z1 = marginal_mean(&ex.z0, &bundle, 1, &model.schedule)?;
        z.row_mut(b).assign(&ndarray::ArrayView1::from(&z1));
        bundle.active[modality] = false;
        cond.row_mut(b).assign(&ndarray::ArrayView1::from(&bundle.active_sum(dim)));
        match ex.data[modality].payload {
            Payload::Class(c) => truth.push(c),
            _ => return Err(Error::Config("label accuracy needs hard class labels".into())),
        }
    }
    let ts = vec![1; n];
    let out = model.denoiser.forward_batch(&DenoiserInput {
        z: z.view(),
        t: &ts,
        cond: (model.variant() == Variant::X).then(|| cond.view()),
    })?;
    let hits = truth
        .iter()
        .enumerate()
        .filter(|&(b, &c)| argmax(&out.heads[modality].row(b).to_vec()) == c)
        .count();
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, DenoiserConfig};
    use crate::modalities::{HeadPlacement, ModalitySpec, Modality, EmbeddingTable};
    use crate::schedule::{NoiseSchedule, ScheduleKind, WeightRule};

    fn label_model(variant: Variant) -> Model {
        let spec = ModalitySpec::categorical(4, HeadPlacement::EndTrunk).unwrap();
        let table = EmbeddingTable::seeded(4, 3, 1);
        let sched = NoiseSchedule::build(ScheduleKind::Cosine, 10, 1, WeightRule::TimeRatio { scale: 0.01 })
            .unwrap();
        let mut cfg = DenoiserConfig::new(3, 10, variant, &[spec]);
        cfg.hidden_width = 8;
        cfg.time_features = 4;
        cfg.time_embed = 4;
        cfg.head_width = 4;
        let den = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        Model::new(den, vec![Modality::new(spec, Some(table)).unwrap()], sched).unwrap()
    }

    #[test]
    fn zero_heads_give_uniform_confidence() {
        let model = label_model(Variant::U);
        let out = sample(&model, &SamplerConfig::unconditional(3), &[None], 4).unwrap();
        for s in out {
            assert!((s.confidences[0].unwrap() - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_modalities_are_untouched() {
        let model = label_model(Variant::X);
        let cfg = SamplerConfig::new(SampleMode::Conditional, vec![0], 1);
        let out = sample(&model, &cfg, &[Some(ModalityDatum::class(2))], 3).unwrap();
        assert!(out.iter().all(|s| s.modalities[0] == ModalityDatum::class(2)));
    }

    #[test]
    fn sampling_is_deterministic() {
        let model = label_model(Variant::X);
        let cfg = SamplerConfig::unconditional(9);
        assert_eq!(
            sample(&model, &cfg, &[None], 5).unwrap(),
            sample(&model, &cfg, &[None], 5).unwrap()
        );
    }

    #[test]
    fn config_errors() {
        let model = label_model(Variant::X);
        let cond = SamplerConfig::new(SampleMode::Conditional, vec![], 0);
        assert!(sample(&model, &cond, &[None], 1).is_err());
        let uncond = SamplerConfig::unconditional(0);
        assert!(sample(&model, &uncond, &[Some(ModalityDatum::class(0))], 1).is_err());
        let bad = SamplerConfig::new(SampleMode::Conditional, vec![0], 0);
        assert!(sample(&model, &bad, &[None], 1).is_err());
        assert!(sample(&model, &uncond, &[None], 0).unwrap().is_empty());
    }

    #[test]
    fn restore_rejects_u_variant() {
        let model = label_model(Variant::U);
        let mask = Mask::empty(1, 3);
        assert!(restore(&model, &[0.0; 3], &mask, &SamplerConfig::unconditional(0)).is_err());
    }

    #[test]
    fn region_split() {
        let mut mask = Mask::empty(1, 4);
        mask.bits[0] = true;
        let (hid, obs) = region_mse(&[1.0, 0.0, 0.0, 2.0], &[0.0; 4], &mask).unwrap();
        assert_eq!(hid, Some(1.0));
        assert_eq!(obs, Some(4.0 / 3.0));
        let (hid, _) = region_mse(&[0.0; 4], &[0.0; 4], &Mask::empty(1, 4)).unwrap();
        assert_eq!(hid, None);
    }
}
