//! Gaussian algebra of the aggregated forward process.
//!
//! The forward transition mixes the encoded modalities into the mean:
//!
//! ```text
//! q(z_t | z_{t-1}, X) = N( sqrt(a_t) * (z_{t-1} + sum_i w_t^i e_i), (1 - a_t) I )
//! ```
//!
//! which gives the closed-form marginal
//! `N(sqrt(abar_t) z_0 + sum_i tilde_alpha_t^i e_i, (1 - abar_t) I)` and a
//! Gaussian posterior `q(z_{t-1} | z_0, z_t, X)` with variance `beta_tilde_t`.
//! All functions here are pure; noise is always passed in by the caller.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;

/// A point in the diffusion space together with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Vec<f64>, t: usize) -> Self {
        Self { z, t }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Encoded modality data `e_i = E_i(x_i)` with an activity mask.
///
/// Inactive entries contribute nothing to any aggregation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedBundle {
    pub enc: Vec<Vec<f64>>,
    pub active: Vec<bool>,
}

impl EncodedBundle {
    /// Bundle with every modality active.
    pub fn new(enc: Vec<Vec<f64>>) -> Self {
        let active = vec![true; enc.len()];
        Self { enc, active }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.enc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enc.is_empty()
    }

    /// Sum of the active encodings; zero vector of length `dim` if none.
    pub fn active_sum(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (e, _) in self.enc.iter().zip(&self.active).filter(|(_, a)| **a) {
            for (o, v) in out.iter_mut().zip(e) {
                *o += v;
            }
        }
        out
    }

    fn validate(&self, sched: &NoiseSchedule, dim: usize) -> Result<()> {
        check_dim("bundle modality count", sched.modalities(), self.enc.len())?;
        check_dim("bundle activity mask", self.enc.len(), self.active.len())?;
        for e in &self.enc {
            check_dim("modality encoding", dim, e.len())?;
        }
        Ok(())
    }

    /// Accumulates `sum_i coeff(i) * e_i` over active modalities into `out`.
    fn accumulate(&self, out: &mut [f64], mut coeff: impl FnMut(usize) -> f64) {
        for (i, (e, &on)) in self.enc.iter().zip(&self.active).enumerate() {
            if !on {
                continue;
            }
            let c = coeff(i);
            if c == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(e) {
                *o += c * v;
            }
        }
    }
}

/// Gaussian with isotropic covariance `var * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub var: f64,
}

/// How the reverse update scales its fresh noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseScaling {
    /// `+ sqrt(beta_tilde_t) * noise`, matching the posterior variance.
    #[default]
    StdDev,
    /// `+ beta_tilde_t * noise`, the inference listing taken literally.
    LiteralVariance,
}

fn check_step(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t == 0 || t > sched.steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    Ok(())
}

/// Draws a standard-normal vector of length `dim`.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// One forward transition `z_{t-1} -> z_t`.
pub fn forward_transition_sample(
    prev: &LatentState,
    bundle: &EncodedBundle,
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<LatentState> {
    let t = prev.t + 1;
    check_step(t, sched)?;
    let dim = prev.dim();
    check_dim("transition noise", dim, noise.len())?;
    bundle.validate(sched, dim)?;

    let mut mean = prev.z.clone();
    bundle.accumulate(&mut mean, |i| sched.weight(t, i));
    let scale = sched.alpha(t).sqrt();
    let sd = sched.beta(t).sqrt();
    let z = mean
        .iter()
        .zip(noise)
        .map(|(m, n)| scale * m + sd * n)
        .collect();
    Ok(LatentState::new(z, t))
}

/// Samples `z_t ~ q(z_t | z_0, X)` using the supplied standard-normal noise.
///
/// The noise is the regression target of the noise-prediction network.
pub fn marginal_sample(
    z0: &[f64],
    bundle: &EncodedBundle,
    t: usize,
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<LatentState> {
    check_step(t, sched)?;
    let dim = z0.len();
    check_dim("marginal noise", dim, noise.len())?;
    bundle.validate(sched, dim)?;

    let a = sched.alpha_bar(t).sqrt();
    let s = (1.0 - sched.alpha_bar(t)).sqrt();
    let mut z: Vec<f64> = z0.iter().zip(noise).map(|(x, n)| a * x + s * n).collect();
    bundle.accumulate(&mut z, |i| sched.tilde_alpha(t, i));
    Ok(LatentState::new(z, t))
}

/// [`marginal_sample`] drawing its own noise; returns the state and the noise.
pub fn marginal_sample_with_rng<R: Rng + ?Sized>(
    z0: &[f64],
    bundle: &EncodedBundle,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(LatentState, Vec<f64>)> {
    let noise = standard_normal(rng, z0.len());
    let state = marginal_sample(z0, bundle, t, sched, &noise)?;
    Ok((state, noise))
}

/// Mean of `q(z_t | z_0, X)` without noise.
pub fn marginal_mean(
    z0: &[f64],
    bundle: &EncodedBundle,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let zeros = vec![0.0; z0.len()];
    marginal_sample(z0, bundle, t, sched, &zeros).map(|s| s.z)
}

fn check_posterior(t: usize, sched: &NoiseSchedule) -> Result<()> {
    check_step(t, sched)?;
    if 1.0 - sched.alpha_bar(t) == 0.0 {
        return Err(Error::DegeneratePosterior(t));
    }
    Ok(())
}

/// Posterior `q(z_{t-1} | z_0, z_t, X)` from the clean signal.
pub fn posterior_params(
    z0: &[f64],
    zt: &LatentState,
    bundle: &EncodedBundle,
    sched: &NoiseSchedule,
) -> Result<Posterior> {
    let t = zt.t;
    check_posterior(t, sched)?;
    let dim = zt.dim();
    check_dim("posterior z0", dim, z0.len())?;
    bundle.validate(sched, dim)?;

    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let denom = 1.0 - ab;
    let c_zt = a.sqrt() * (1.0 - ab_prev);
    let c_z0 = beta * ab_prev.sqrt();

    let mut num: Vec<f64> = zt
        .z
        .iter()
        .zip(z0)
        .map(|(z, x)| c_zt * z + c_z0 * x)
        .collect();
    bundle.accumulate(&mut num, |i| {
        beta * sched.tilde_alpha(t, i) / a.sqrt() - denom * sched.weight(t, i)
    });
    let mean = num.into_iter().map(|v| v / denom).collect();
    Ok(Posterior {
        mean,
        var: sched.beta_tilde(t),
    })
}

/// Posterior parameters written in terms of the noise `eps` inside `z_t`.
pub fn posterior_params_eps(
    zt: &LatentState,
    eps: &[f64],
    bundle: &EncodedBundle,
    sched: &NoiseSchedule,
) -> Result<Posterior> {
    let t = zt.t;
    check_posterior(t, sched)?;
    let dim = zt.dim();
    check_dim("posterior eps", dim, eps.len())?;
    bundle.validate(sched, dim)?;

    let inv_sqrt_a = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mut mean: Vec<f64> = zt
        .z
        .iter()
        .zip(eps)
        .map(|(z, e)| inv_sqrt_a * (z - coef * e))
        .collect();
    bundle.accumulate(&mut mean, |i| -sched.weight(t, i));
    Ok(Posterior {
        mean,
        var: sched.beta_tilde(t),
    })
}

/// One ancestral step `z_t -> z_{t-1}` given a noise estimate.
///
/// At `t = 1` the step is deterministic and `noise` is ignored.
pub fn reverse_step(
    zt: &LatentState,
    eps_hat: &[f64],
    bundle: &EncodedBundle,
    sched: &NoiseSchedule,
    noise: &[f64],
    scaling: NoiseScaling,
) -> Result<LatentState> {
    let post = posterior_params_eps(zt, eps_hat, bundle, sched)?;
    perturb(post, zt.t, noise, scaling)
}

fn perturb(post: Posterior, t: usize, noise: &[f64], scaling: NoiseScaling) -> Result<LatentState> {
    let mut z = post.mean;
    if t > 1 {
        check_dim("reverse noise", z.len(), noise.len())?;
        let scale = match scaling {
            NoiseScaling::StdDev => post.var.sqrt(),
            NoiseScaling::LiteralVariance => post.var,
        };
        for (v, n) in z.iter_mut().zip(noise) {
            *v += scale * n;
        }
    }
    Ok(LatentState::new(z, t - 1))
}

/// The clean signal implied by `z_t` and a noise estimate, inverting the
/// marginal: `(z_t - sqrt(1 - abar_t) eps - sum_i tilde_alpha_t^i e_i) / sqrt(abar_t)`.
pub fn predict_z0(
    zt: &LatentState,
    eps: &[f64],
    bundle: &EncodedBundle,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let t = zt.t;
    check_step(t, sched)?;
    let dim = zt.dim();
    check_dim("z0 prediction eps", dim, eps.len())?;
    bundle.validate(sched, dim)?;
    let s = (1.0 - sched.alpha_bar(t)).sqrt();
    let mut num: Vec<f64> = zt.z.iter().zip(eps).map(|(z, e)| z - s * e).collect();
    bundle.accumulate(&mut num, |i| -sched.tilde_alpha(t, i));
    let a = sched.alpha_bar(t).sqrt();
    Ok(num.into_iter().map(|v| v / a).collect())
}

/// [`reverse_step`] through the clean-signal form of the posterior, with the
/// implied `z_0` clamped to `[lo, hi]` first. Without effective clamping it
/// agrees with [`reverse_step`] up to rounding.
pub fn reverse_step_clipped(
    zt: &LatentState,
    eps_hat: &[f64],
    bundle: &EncodedBundle,
    sched: &NoiseSchedule,
    noise: &[f64],
    scaling: NoiseScaling,
    (lo, hi): (f64, f64),
) -> Result<LatentState> {
    let z0: Vec<f64> = predict_z0(zt, eps_hat, bundle, sched)?
        .into_iter()
        .map(|v| v.clamp(lo, hi))
        .collect();
    let post = posterior_params(&z0, zt, bundle, sched)?;
    perturb(post, zt.t, noise, scaling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScheduleKind, WeightRule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_step(alpha: f64, w: WeightRule) -> NoiseSchedule {
        NoiseSchedule::from_betas(&[1.0 - alpha], &[w]).unwrap()
    }

    #[test]
    fn identity_transition() {
        let s = NoiseSchedule::from_betas(&[0.0], &[]).unwrap();
        let prev = LatentState::new(vec![0.3, -1.2], 0);
        let next = forward_transition_sample(&prev, &EncodedBundle::empty(), &s, &[0.0, 0.0]).unwrap();
        assert_eq!(next.z, prev.z);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn transition_aggregates_weighted_encoding() {
        let s = one_step(0.81, WeightRule::Constant(1.0));
        let prev = LatentState::new(vec![0.0, 0.0], 0);
        let b = EncodedBundle::new(vec![vec![1.0, 0.0]]);
        let next = forward_transition_sample(&prev, &b, &s, &[0.0, 0.0]).unwrap();
        assert!((next.z[0] - 0.9).abs() < 1e-15);
        assert_eq!(next.z[1], 0.0);
    }

    #[test]
    fn marginal_zero_noise_examples() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 10, 0, WeightRule::Zero).unwrap();
        let z = marginal_sample(&[2.0], &EncodedBundle::empty(), 7, &s, &[0.0]).unwrap();
        assert_eq!(z.z[0], s.alpha_bar(7).sqrt() * 2.0);

        // alpha_1 = 0.25 with w_1 = 1 gives abar = 0.25 and tilde_alpha = 0.5.
        let s = one_step(0.25, WeightRule::Constant(1.0));
        let b = EncodedBundle::new(vec![vec![1.0]]);
        let z = marginal_sample(&[2.0], &b, 1, &s, &[0.0]).unwrap();
        assert!((z.z[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn beta_tilde_spot_value() {
        // alpha_1 = 0.8, alpha_2 = 0.9 -> abar_1 = 0.8, abar_2 = 0.72.
        let s = NoiseSchedule::from_betas(&[0.2, 0.1], &[]).unwrap();
        assert!((s.beta_tilde(2) - 0.1 * 0.2 / 0.28).abs() < 1e-12);
        assert!((s.beta_tilde(2) - 0.0714286).abs() < 1e-7);
    }

    #[test]
    fn eps_form_shift_by_weighted_encoding() {
        let s = NoiseSchedule::from_betas(&[0.1, 0.1], &[WeightRule::Constant(0.5)]).unwrap();
        let zt = LatentState::new(vec![0.4, -0.7], 2);
        let eps = [0.2, 0.1];
        let with = posterior_params_eps(&zt, &eps, &EncodedBundle::new(vec![vec![1.0, 0.0]]), &s).unwrap();
        let mut off = EncodedBundle::new(vec![vec![1.0, 0.0]]);
        off.active[0] = false;
        let without = posterior_params_eps(&zt, &eps, &off, &s).unwrap();
        assert!((with.mean[0] - (without.mean[0] - 0.5)).abs() < 1e-15);
        assert_eq!(with.mean[1], without.mean[1]);
    }

    #[test]
    fn two_posterior_forms_agree() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 40, 2, WeightRule::TimeRatio { scale: 0.2 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 1..=40 {
            let z0 = standard_normal(&mut rng, 5);
            let b = EncodedBundle::new(vec![standard_normal(&mut rng, 5), standard_normal(&mut rng, 5)]);
            let (zt, eps) = marginal_sample_with_rng(&z0, &b, t, &s, &mut rng).unwrap();
            let a = posterior_params(&z0, &zt, &b, &s).unwrap();
            let e = posterior_params_eps(&zt, &eps, &b, &s).unwrap();
            for (x, y) in a.mean.iter().zip(&e.mean) {
                assert!((x - y).abs() < 1e-10, "t={t}: {x} vs {y}");
            }
            assert_eq!(a.var, e.var);
        }
    }

    #[test]
    fn final_reverse_step_is_deterministic() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 5, 0, WeightRule::Zero).unwrap();
        let zt = LatentState::new(vec![0.5, 0.1], 1);
        let b = EncodedBundle::empty();
        let a = reverse_step(&zt, &[0.1, 0.2], &b, &s, &[9.0, 9.0], NoiseScaling::StdDev).unwrap();
        let c = reverse_step(&zt, &[0.1, 0.2], &b, &s, &[-3.0, 1.0], NoiseScaling::StdDev).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.t, 0);
    }

    #[test]
    fn errors() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 5, 1, WeightRule::Zero).unwrap();
        let b = EncodedBundle::new(vec![vec![0.0; 2]]);
        assert!(matches!(
            marginal_sample(&[0.0; 2], &b, 6, &s, &[0.0; 2]),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(matches!(
            marginal_sample(&[0.0; 3], &b, 2, &s, &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        let z0 = LatentState::new(vec![0.0; 2], 0);
        assert!(posterior_params(&[0.0; 2], &z0, &b, &s).is_err());
        let flat = NoiseSchedule::from_betas(&[0.0, 0.0], &[]).unwrap();
        let zt = LatentState::new(vec![0.0], 2);
        assert!(matches!(
            posterior_params_eps(&zt, &[0.0], &EncodedBundle::empty(), &flat),
            Err(Error::DegeneratePosterior(2))
        ));
    }

    #[test]
    fn clipped_step_matches_plain_step_without_clamping() {
        let sched = NoiseSchedule::build(ScheduleKind::Cosine, 20, 2, WeightRule::TimeRatio { scale: 0.1 })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = EncodedBundle::new(vec![standard_normal(&mut rng, 3), standard_normal(&mut rng, 3)]);
        for t in [1, 2, 10, 20] {
            let zt = LatentState::new(standard_normal(&mut rng, 3), t);
            let eps = standard_normal(&mut rng, 3);
            let noise = standard_normal(&mut rng, 3);
            let a = reverse_step(&zt, &eps, &b, &sched, &noise, NoiseScaling::StdDev).unwrap();
            let c = reverse_step_clipped(&zt, &eps, &b, &sched, &noise, NoiseScaling::StdDev, (f64::MIN, f64::MAX))
                .unwrap();
            for (x, y) in a.z.iter().zip(&c.z) {
                assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()), "t={t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn predicted_z0_inverts_marginal() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 50, 1, WeightRule::default()).unwrap();
        let b = EncodedBundle::new(vec![vec![0.5, -0.25]]);
        let z0 = [0.3, -0.7];
        let eps = [1.1, 0.4];
        let zt = marginal_sample(&z0, &b, 17, &sched, &eps).unwrap();
        let back = predict_z0(&zt, &eps, &b, &sched).unwrap();
        for (x, y) in back.iter().zip(&z0) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
