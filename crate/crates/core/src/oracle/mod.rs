//! Independent verifiers for the closed-form parts of the model.
//!
//! Each check recomputes its reference from first principles, using the
//! schedule only for its primitive `beta_t` and `w_t` sequences. Every suite
//! also runs a deliberately corrupted variant that must fail; those rows are
//! flagged as controls and pass when the underlying check rejects them.

mod gradient;
pub mod reference;
mod reduction;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{
    forward_transition_sample, marginal_mean, posterior_params, posterior_params_eps, EncodedBundle, LatentState,
};
use crate::error::{Error, Result};
use crate::modalities::MaskSampler;
use crate::schedule::{NoiseSchedule, ScheduleKind, WeightRule};

pub use gradient::{gradient_check, GradientCase};
pub use reduction::{ddpm_reduction_check, elbo_reduction_check, exact_eps_check, ReductionCase};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub suite: Suite,
    pub name: String,
    /// Whether the row's expectation holds (for controls: the check failed).
    pub passed: bool,
    /// Observed deviation or test statistic.
    pub value: f64,
    pub tolerance: f64,
    pub control: bool,
}

impl CheckReport {
    fn new(suite: Suite, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: value.is_finite() && value < tolerance,
            value,
            tolerance,
            control: false,
        }
    }

    /// Turns a check run on corrupted input into a control row.
    fn into_control(mut self) -> Self {
        self.name = format!("{} [control]", self.name);
        self.passed = !self.passed;
        self.control = true;
        self
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<11} {:<48} value={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.name,
            self.value,
            self.tolerance
        )
    }
}

/// Writes reports as CSV: `suite,name,control,passed,value,tolerance`.
pub fn write_reports_csv<W: std::io::Write>(reports: &[CheckReport], mut out: W) -> Result<()> {
    writeln!(out, "suite,name,control,passed,value,tolerance")?;
    for r in reports {
        writeln!(
            out,
            "{},\"{}\",{},{},{},{}",
            r.suite.name(),
            r.name,
            r.control,
            r.passed,
            r.value,
            r.tolerance
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Schedule,
    Reduction,
    Marginal,
    Conjugacy,
    Gradient,
    Elbo,
    Mask,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Schedule,
        Suite::Reduction,
        Suite::Marginal,
        Suite::Conjugacy,
        Suite::Gradient,
        Suite::Elbo,
        Suite::Mask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Schedule => "schedule",
            Suite::Reduction => "reduction",
            Suite::Marginal => "marginal",
            Suite::Conjugacy => "conjugacy",
            Suite::Gradient => "gradient",
            Suite::Elbo => "elbo",
            Suite::Mask => "mask",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown verification suite `{s}`")))
    }
}

/// Runs one suite with its default fixtures. A supplied schedule replaces
/// the default one in the schedule, marginal and conjugacy suites.
pub fn run_suite(suite: Suite, seed: u64, schedule: Option<&NoiseSchedule>) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    match suite {
        Suite::Schedule => match schedule {
            Some(s) => out.push(schedule_check(s, "supplied schedule")),
            None => {
                for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
                    for n in [1, 3] {
                        let s = mixed_schedule(kind, 1000, n)?;
                        out.push(schedule_check(&s, &format!("{} T=1000 N={n}", kind.name())));
                    }
                }
                let s = mixed_schedule(ScheduleKind::Cosine, 1000, 3)?.with_scaled_tilde_alpha(1.01);
                out.push(schedule_check(&s, "cosine T=1000 N=3 tilde_alpha x1.01").into_control());
            }
        },
        Suite::Marginal => {
            let own;
            let sched = match schedule {
                Some(s) => s,
                None => {
                    own = NoiseSchedule::build(ScheduleKind::Cosine, 20, 2, WeightRule::Constant(1.0))?;
                    &own
                }
            };
            let (bundle, z0) = random_fixture(sched.modalities(), 2, seed);
            let t = sched.steps().min(10);
            out.extend(mc_marginal_check(sched, &bundle, &z0, t, 200_000, seed)?);
            if schedule.is_none() {
                let bad = sched.with_scaled_tilde_alpha(1.01);
                let rows = mc_marginal_check(&bad, &bundle, &z0, t, 200_000, seed)?;
                out.extend(rows.into_iter().filter(|r| r.name.starts_with("mean")).map(|r| {
                    let mut r = r.into_control();
                    r.name = format!("tilde_alpha x1.01: {}", r.name);
                    r
                }));
            }
        }
        Suite::Conjugacy => {
            let own;
            let sched = match schedule {
                Some(s) => s,
                None => {
                    own = mixed_schedule(ScheduleKind::Cosine, 100, 2)?;
                    &own
                }
            };
            out.extend(conjugacy_check(sched, 100, &[1, 2, 8], seed)?);
            if schedule.is_none() {
                let bad = sched.with_scaled_tilde_alpha(1.01);
                out.extend(
                    conjugacy_check(&bad, 20, &[2], seed)?
                        .into_iter()
                        .filter(|r| r.name.starts_with("lemma mean"))
                        .map(CheckReport::into_control),
                );
            }
        }
        Suite::Reduction => {
            for case in [ReductionCase::NoModalities, ReductionCase::ZeroWeights] {
                out.extend(ddpm_reduction_check(case, seed)?);
            }
        }
        Suite::Gradient => {
            for (k, case) in GradientCase::STANDARD.iter().enumerate() {
                out.push(gradient_check(case, seed + k as u64, false)?);
            }
            out.push(gradient_check(&GradientCase::STANDARD[2], seed, true)?);
        }
        Suite::Elbo => {
            out.extend(elbo_reduction_check(seed)?);
            out.extend(exact_eps_check(seed)?);
        }
        Suite::Mask => {
            let sampler = MaskSampler::default();
            out.extend(mask_fraction_check(sampler, 16, 16, 10_000, seed)?);
        }
    }
    for r in out.iter_mut() {
        r.suite = suite;
    }
    Ok(out)
}

/// Runs every suite in order.
pub fn run_all(seed: u64, schedule: Option<&NoiseSchedule>) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for s in Suite::ALL {
        out.extend(run_suite(s, seed, schedule)?);
    }
    Ok(out)
}

/// Schedule with `n` modalities cycling through three distinct weight rules.
pub fn mixed_schedule(kind: ScheduleKind, steps: usize, n: usize) -> Result<NoiseSchedule> {
    let pool = [
        WeightRule::TimeRatio { scale: 1.0 },
        WeightRule::Constant(0.5),
        WeightRule::TimeRatio { scale: 0.01 },
    ];
    let rules: Vec<WeightRule> = (0..n).map(|i| pool[i % pool.len()]).collect();
    NoiseSchedule::build_with_rules(kind, steps, &rules)
}

fn random_fixture(n: usize, dim: usize, seed: u64) -> (EncodedBundle, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.sample(StandardNormal)).collect() };
    let enc = (0..n).map(|_| draw(dim)).collect();
    (EncodedBundle::new(enc), draw(dim))
}

/// Largest gap between the stored `tilde_alpha` and its unrolled sum
/// `sum_{s<=t} w_s sqrt(prod_{j=s..t} alpha_j)`.
pub fn schedule_check(sched: &NoiseSchedule, label: &str) -> CheckReport {
    let steps = sched.steps();
    let betas = sched.betas();
    let mut worst = 0.0f64;
    for i in 0..sched.modalities() {
        for t in 1..=steps {
            let mut prod = 1.0;
            let mut sum = 0.0;
            for s in (1..=t).rev() {
                prod *= 1.0 - betas[s - 1];
                sum += sched.weight(s, i) * prod.sqrt();
            }
            worst = worst.max((sum - sched.tilde_alpha(t, i)).abs());
        }
    }
    CheckReport::new(Suite::Schedule, format!("recursion vs closed form ({label})"), worst, 1e-10)
}

/// Composes `n` forward chains of `t_end` transitions from `z0` and compares
/// the empirical moments of `z_{t_end}` with the closed-form marginal.
///
/// Reports the largest mean deviation in standard errors (pass below 3) and
/// the largest relative variance error (pass below 1%).
pub fn mc_marginal_check(
    sched: &NoiseSchedule,
    bundle: &EncodedBundle,
    z0: &[f64],
    t_end: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<CheckReport>> {
    let dim = z0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut noise = vec![0.0; dim];
    for _ in 0..n {
        let mut state = LatentState::new(z0.to_vec(), 0);
        for _ in 0..t_end {
            noise.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            state = forward_transition_sample(&state, bundle, sched, &noise)?;
        }
        for k in 0..dim {
            sum[k] += state.z[k];
            sq[k] += state.z[k] * state.z[k];
        }
    }
    let expected = marginal_mean(z0, bundle, t_end, sched)?;
    let var_expected = 1.0 - sched.alpha_bar(t_end);
    let nf = n as f64;
    let (mut z_worst, mut v_worst) = (0.0f64, 0.0f64);
    for k in 0..dim {
        let mean = sum[k] / nf;
        let var = (sq[k] - nf * mean * mean) / (nf - 1.0);
        let se = (var / nf).sqrt();
        z_worst = z_worst.max((mean - expected[k]).abs() / se);
        v_worst = v_worst.max((var - var_expected).abs() / var_expected);
    }
    Ok(vec![
        CheckReport::new(Suite::Marginal, format!("mean within 3 SE (t={t_end}, n={n})"), z_worst, 3.0),
        CheckReport::new(Suite::Marginal, format!("variance within 1% (t={t_end}, n={n})"), v_worst, 0.01),
    ])
}

/// Posterior parameters against the generic Gaussian conjugacy lemma.
///
/// With prior `N(mu, Lambda^-1)` on `z_{t-1}` and likelihood
/// `N(A z_{t-1} + b, L^-1)` for `z_t`, the posterior is
/// `N(S (A^T L (z_t - b) + Lambda mu), S)` with `S = (Lambda + A^T L A)^-1`.
/// Here `mu = sqrt(abar_{t-1}) z0 + sum tilde_alpha_{t-1} e`,
/// `Lambda = I / (1 - abar_{t-1})`, `A = sqrt(alpha_t) I`,
/// `b = sqrt(alpha_t) sum w_t e` and `L = I / (1 - alpha_t)`.
///
/// Also checks that the clean-signal and noise forms of the posterior mean
/// agree on consistent `(z0, z_t, eps)` triples.
pub fn conjugacy_check(sched: &NoiseSchedule, trials: usize, dims: &[usize], seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = sched.steps();
    if steps < 2 {
        return Err(Error::Config("conjugacy check needs T >= 2".into()));
    }
    let n = sched.modalities();
    let (mut mean_dev, mut cov_dev, mut var_dev, mut form_dev) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for trial in 0..trials {
        let dim = dims[trial % dims.len()];
        let t = rng.random_range(2..=steps);
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.sample(StandardNormal)).collect() };
        let z0 = draw(dim);
        let zt = draw(dim);
        let enc: Vec<Vec<f64>> = (0..n).map(|_| draw(dim)).collect();
        let bundle = EncodedBundle::new(enc.clone());

        let agg = |coef: &dyn Fn(usize) -> f64| -> DVector<f64> {
            let mut v = DVector::zeros(dim);
            for (i, e) in enc.iter().enumerate() {
                v += DVector::from_column_slice(e) * coef(i);
            }
            v
        };
        let alpha = 1.0 - sched.betas()[t - 1];
        let ab_prev: f64 = sched.betas()[..t - 1].iter().map(|b| 1.0 - b).product();
        let mu = DVector::from_column_slice(&z0) * ab_prev.sqrt() + agg(&|i| sched.tilde_alpha(t - 1, i));
        let lambda = DMatrix::<f64>::identity(dim, dim) / (1.0 - ab_prev);
        let a = DMatrix::<f64>::identity(dim, dim) * alpha.sqrt();
        let b = agg(&|i| sched.weight(t, i)) * alpha.sqrt();
        let l = DMatrix::<f64>::identity(dim, dim) / (1.0 - alpha);
        let precision = &lambda + a.transpose() * &l * &a;
        let cov = precision
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("posterior precision".into()))?;
        let y = DVector::from_column_slice(&zt);
        let mean = &cov * (a.transpose() * &l * (y - b) + &lambda * mu);

        let state = LatentState::new(zt.clone(), t);
        let post = posterior_params(&z0, &state, &bundle, sched)?;
        for k in 0..dim {
            mean_dev = mean_dev.max((mean[k] - post.mean[k]).abs());
            for j in 0..dim {
                let target = if j == k { post.var } else { 0.0 };
                cov_dev = cov_dev.max((cov[(k, j)] - target).abs());
            }
        }
        var_dev = var_dev.max((cov[(0, 0)] - sched.beta_tilde(t)).abs());

        let ab = ab_prev * alpha;
        let shift = agg(&|i| sched.tilde_alpha(t, i));
        let eps: Vec<f64> = (0..dim)
            .map(|k| (zt[k] - ab.sqrt() * z0[k] - shift[k]) / (1.0 - ab).sqrt())
            .collect();
        let post_eps = posterior_params_eps(&state, &eps, &bundle, sched)?;
        for k in 0..dim {
            form_dev = form_dev.max((post.mean[k] - post_eps.mean[k]).abs());
        }
    }
    let label = format!("{trials} trials, dims {dims:?}");
    Ok(vec![
        CheckReport::new(Suite::Conjugacy, format!("lemma mean ({label})"), mean_dev, 1e-10),
        CheckReport::new(Suite::Conjugacy, format!("lemma covariance ({label})"), cov_dev, 1e-10),
        CheckReport::new(Suite::Conjugacy, format!("lemma variance vs beta_tilde ({label})"), var_dev, 1e-10),
        CheckReport::new(Suite::Conjugacy, format!("clean vs noise mean form ({label})"), form_dev, 1e-10),
    ])
}

/// Exact expected masked fraction of the patch sampler.
///
/// A pixel `(r, c)` is covered by one patch with probability
/// `(min(r, P-1) + 1)(min(c, P-1) + 1) / (H W)`; patches are independent, so
/// with `m` patches it stays visible with probability `(1 - p)^m`.
pub fn exact_mask_fraction(sampler: MaskSampler, height: usize, width: usize) -> f64 {
    let cells = (height * width) as f64;
    let mut total = 0.0;
    for m in 0..=sampler.max_patches {
        let mut frac = 0.0;
        for r in 0..height {
            for c in 0..width {
                let p = ((r.min(sampler.patch - 1) + 1) * (c.min(sampler.patch - 1) + 1)) as f64 / cells;
                frac += 1.0 - (1.0 - p).powi(m as i32);
            }
        }
        total += frac / cells;
    }
    total / (sampler.max_patches + 1) as f64
}

/// Brute-force replica of the placement rule, sharing only the RNG.
fn simulate_mask_fraction<R: Rng + ?Sized>(sampler: MaskSampler, height: usize, width: usize, rng: &mut R) -> f64 {
    let mut grid = vec![false; height * width];
    let m = rng.random_range(0..=sampler.max_patches);
    for _ in 0..m {
        let r0 = rng.random_range(0..height);
        let c0 = rng.random_range(0..width);
        for r in r0..height.min(r0 + sampler.patch) {
            for c in c0..width.min(c0 + sampler.patch) {
                grid[r * width + c] = true;
            }
        }
    }
    grid.iter().filter(|b| **b).count() as f64 / grid.len() as f64
}

/// Mean masked fraction of `draws` sampler masks against the exact value and
/// an independent simulation, in standard errors.
pub fn mask_fraction_check(
    sampler: MaskSampler,
    height: usize,
    width: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fracs: Vec<f64> = (0..draws)
        .map(|_| sampler.sample(height, width, &mut rng).map(|m| m.fraction()))
        .collect::<Result<_>>()?;
    let mut sim_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let sims: Vec<f64> = (0..draws)
        .map(|_| simulate_mask_fraction(sampler, height, width, &mut sim_rng))
        .collect();
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (mean, se) = stats(&fracs);
    let (sim_mean, sim_se) = stats(&sims);
    let exact = exact_mask_fraction(sampler, height, width);
    let wrong = exact_mask_fraction(
        MaskSampler {
            patch: sampler.patch + 1,
            ..sampler
        },
        height,
        width,
    );
    let joint_se = (se * se + sim_se * sim_se).sqrt();
    let label = format!("{height}x{width} P={} draws={draws}", sampler.patch);
    Ok(vec![
        CheckReport::new(Suite::Mask, format!("sampler vs exact ({label})"), (mean - exact).abs() / se, 3.0),
        CheckReport::new(
            Suite::Mask,
            format!("sampler vs simulation ({label})"),
            (mean - sim_mean).abs() / joint_se,
            3.0,
        ),
        CheckReport::new(Suite::Mask, format!("sampler vs exact, patch+1 ({label})"), (mean - wrong).abs() / se, 3.0)
            .into_control(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn exact_fraction_of_full_cover() {
        // One 4x4 patch on a 4x4 grid covers only from the origin.
        let s = MaskSampler {
            patch: 4,
            max_patches: 1,
        };
        let f = exact_mask_fraction(s, 4, 4);
        let mut brute = 0.0;
        for r0 in 0..4 {
            for c0 in 0..4 {
                brute += ((4 - r0) * (4 - c0)) as f64 / 16.0;
            }
        }
        assert!((f - 0.5 * brute / 16.0).abs() < 1e-15);
    }

    #[test]
    #[ignore = "slow; run explicitly"]
    fn print_all_suites() {
        for r in run_all(7, None).unwrap() {
            println!("{r}");
        }
    }

    #[test]
    fn control_rows_invert() {
        let r = CheckReport::new(Suite::Schedule, "x", 1.0, 0.5).into_control();
        assert!(r.passed && r.control);
    }
}
