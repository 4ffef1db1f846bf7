//! Time-indexed coefficients of the aggregated forward process.
//!
//! A [`NoiseSchedule`] owns every scalar the forward and reverse processes
//! need: the per-step retention `alpha_t`, its running product
//! `alpha_bar_t`, the posterior variance `beta_tilde_t`, the per-modality
//! aggregation weights `w_t^(i)` and the accumulated modality coefficients
//! `tilde_alpha_t^(i)`, which obey
//!
//! ```text
//! tilde_alpha_0 = 0,   tilde_alpha_t = sqrt(alpha_t) * (w_t + tilde_alpha_{t-1})
//! ```
//!
//! Timesteps are 1-based: index `t` in `1..=T` addresses a transition and
//! index `0` is the clean data.

use std::f64::consts::FRAC_PI_2;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Default endpoints of the linear beta schedule.
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;

/// Offset and beta cap of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// How a modality's aggregation weight `w_t` evolves with `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightRule {
    /// `w_t = 0`; the modality never enters the forward process.
    Zero,
    /// `w_t = c` for every step.
    Constant(f64),
    /// `w_t = scale * t / max(T - t, 1)`, small for early steps.
    TimeRatio { scale: f64 },
}

impl Default for WeightRule {
    fn default() -> Self {
        WeightRule::TimeRatio { scale: 1.0 }
    }
}

impl WeightRule {
    pub fn weight(&self, t: usize, steps: usize) -> f64 {
        match *self {
            WeightRule::Zero => 0.0,
            WeightRule::Constant(c) => c,
            WeightRule::TimeRatio { scale } => scale * modality_weight(t, steps),
        }
    }
}

impl std::fmt::Display for WeightRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightRule::Zero => write!(f, "zero"),
            WeightRule::Constant(c) => write!(f, "constant:{c}"),
            WeightRule::TimeRatio { scale } => write!(f, "time_ratio:{scale}"),
        }
    }
}

impl std::str::FromStr for WeightRule {
    type Err = Error;

    /// Parses `zero`, `constant:<c>`, `time_ratio` or `time_ratio:<scale>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad weight rule `{s}`"));
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a.parse::<f64>().map_err(|_| bad())?)),
            None => (s, None),
        };
        match (head, arg) {
            ("zero", None) => Ok(WeightRule::Zero),
            ("constant", Some(c)) => Ok(WeightRule::Constant(c)),
            ("time_ratio", a) => Ok(WeightRule::TimeRatio {
                scale: a.unwrap_or(1.0),
            }),
            _ => Err(bad()),
        }
    }
}

/// `w(t) = t / (T - t)` with the denominator floored at 1, so `w(T) = T`.
///
/// At `T = 1000` this is the `t / (1000 - t)` rule used for image-scale runs.
pub fn modality_weight(t: usize, steps: usize) -> f64 {
    let denom = steps.saturating_sub(t).max(1);
    t as f64 / denom as f64
}

fn linear_betas(steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![LINEAR_BETA_START];
    }
    let span = LINEAR_BETA_END - LINEAR_BETA_START;
    (0..steps)
        .map(|k| LINEAR_BETA_START + span * k as f64 / (steps - 1) as f64)
        .collect()
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let f = |t: f64| {
        let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
        x.cos().powi(2)
    };
    (1..=steps)
        .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(COSINE_MAX_BETA))
        .collect()
}

/// All time-indexed coefficients of the generalized forward process.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: Option<ScheduleKind>,
    rules: Vec<WeightRule>,
    /// `beta[t-1] = 1 - alpha_t`, t in 1..=T.
    beta: Vec<f64>,
    /// `alpha[t-1]`, t in 1..=T.
    alpha: Vec<f64>,
    /// `alpha_bar[t]`, t in 0..=T.
    alpha_bar: Vec<f64>,
    /// `beta_tilde[t-1]`, t in 1..=T.
    beta_tilde: Vec<f64>,
    /// `weights[i][t-1]`.
    weights: Vec<Vec<f64>>,
    /// `tilde_alpha[i][t]`, t in 0..=T.
    tilde_alpha: Vec<Vec<f64>>,
}

impl NoiseSchedule {
    /// Builds a schedule of `steps` transitions with `modalities` modalities
    /// sharing one weight rule.
    pub fn build(
        kind: ScheduleKind,
        steps: usize,
        modalities: usize,
        rule: WeightRule,
    ) -> Result<Self> {
        Self::build_with_rules(kind, steps, &vec![rule; modalities])
    }

    pub fn build_with_rules(kind: ScheduleKind, steps: usize, rules: &[WeightRule]) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("number of steps must be positive".into()));
        }
        let betas = match kind {
            ScheduleKind::Linear => linear_betas(steps),
            ScheduleKind::Cosine => cosine_betas(steps),
        };
        let mut sched = Self::from_betas(&betas, rules)?;
        sched.kind = Some(kind);
        Ok(sched)
    }

    /// Builds a schedule from an explicit beta sequence `beta_1..beta_T`.
    pub fn from_betas(betas: &[f64], rules: &[WeightRule]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("number of steps must be positive".into()));
        }
        let steps = betas.len();
        let mut alpha = Vec::with_capacity(steps);
        for (k, &b) in betas.iter().enumerate() {
            let a = 1.0 - b;
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_{} = {a} outside (0, 1]",
                    k + 1
                )));
            }
            alpha.push(a);
        }

        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for (k, &a) in alpha.iter().enumerate() {
            alpha_bar.push(alpha_bar[k] * a);
        }

        let beta_tilde = (1..=steps)
            .map(|t| {
                let denom = 1.0 - alpha_bar[t];
                if denom == 0.0 {
                    0.0
                } else {
                    betas[t - 1] * (1.0 - alpha_bar[t - 1]) / denom
                }
            })
            .collect();

        let weights: Vec<Vec<f64>> = rules
            .iter()
            .map(|r| (1..=steps).map(|t| r.weight(t, steps)).collect())
            .collect();

        let tilde_alpha = weights
            .iter()
            .map(|w| {
                let mut acc = Vec::with_capacity(steps + 1);
                acc.push(0.0);
                for t in 1..=steps {
                    acc.push(alpha[t - 1].sqrt() * (w[t - 1] + acc[t - 1]));
                }
                acc
            })
            .collect();

        Ok(Self {
            kind: None,
            rules: rules.to_vec(),
            beta: betas.to_vec(),
            alpha,
            alpha_bar,
            beta_tilde,
            weights,
            tilde_alpha,
        })
    }

    pub fn kind(&self) -> Option<ScheduleKind> {
        self.kind
    }

    pub fn rules(&self) -> &[WeightRule] {
        &self.rules
    }

    /// Number of transitions `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// Number of aggregated modalities `N`.
    pub fn modalities(&self) -> usize {
        self.weights.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `1 - alpha_t`, stored exactly as the beta the schedule was built from.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn weight(&self, t: usize, modality: usize) -> f64 {
        self.weights[modality][t - 1]
    }

    pub fn tilde_alpha(&self, t: usize, modality: usize) -> f64 {
        self.tilde_alpha[modality][t]
    }

    /// Closed-form unrolling of the `tilde_alpha` recursion:
    /// `sum_{s=1..t} w_s * sqrt(prod_{j=s..t} alpha_j)`.
    ///
    /// Independent of the stored recursion; used as its oracle.
    pub fn tilde_alpha_closed_form(&self, t: usize, modality: usize) -> f64 {
        (1..=t)
            .map(|s| {
                let prod: f64 = (s..=t).map(|j| self.alpha[j - 1]).product();
                self.weights[modality][s - 1] * prod.sqrt()
            })
            .sum()
    }

    /// Copy of this schedule with every `tilde_alpha` multiplied by `factor`.
    ///
    /// Breaks the recursion invariant on purpose; negative controls use it.
    pub fn with_scaled_tilde_alpha(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.tilde_alpha {
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
        out
    }

    /// Largest violation of the recursion invariant over all `t`, `i`.
    pub fn recursion_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (w, ta) in self.weights.iter().zip(&self.tilde_alpha) {
            worst = worst.max(ta[0].abs());
            for t in 1..=self.steps() {
                let expect = self.alpha[t - 1].sqrt() * (w[t - 1] + ta[t - 1]);
                worst = worst.max((ta[t] - expect).abs());
            }
        }
        worst
    }

    /// Writes the schedule as CSV with columns
    /// `t,alpha,alpha_bar,beta_tilde,w_1..w_N,tilde_alpha_1..tilde_alpha_N`.
    ///
    /// Floats use the shortest round-trip representation, so
    /// [`NoiseSchedule::read_csv`] restores every value bit-exactly.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.modalities();
        let mut header = String::from("t,alpha,alpha_bar,beta_tilde");
        for i in 1..=n {
            header.push_str(&format!(",w_{i}"));
        }
        for i in 1..=n {
            header.push_str(&format!(",tilde_alpha_{i}"));
        }
        writeln!(out, "{header}")?;
        for t in 1..=self.steps() {
            let mut row = format!(
                "{t},{},{},{}",
                self.alpha(t),
                self.alpha_bar(t),
                self.beta_tilde(t)
            );
            for i in 0..n {
                row.push_str(&format!(",{}", self.weight(t, i)));
            }
            for i in 0..n {
                row.push_str(&format!(",{}", self.tilde_alpha(t, i)));
            }
            writeln!(out, "{row}")?;
        }
        Ok(())
    }

    /// Loads a schedule table written by [`NoiseSchedule::write_csv`].
    ///
    /// Values are taken verbatim, not recomputed, so a tampered table keeps
    /// its defects and can be inspected with [`NoiseSchedule::recursion_residual`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty schedule table".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 4 || cols[..4] != ["t", "alpha", "alpha_bar", "beta_tilde"] {
            return Err(Error::Format("unexpected schedule header".into()));
        }
        let extra = cols.len() - 4;
        if !extra.is_multiple_of(2) {
            return Err(Error::Format("unpaired modality columns".into()));
        }
        let n = extra / 2;

        let mut alpha = Vec::new();
        let mut alpha_bar = vec![1.0];
        let mut beta_tilde = Vec::new();
        let mut weights = vec![Vec::new(); n];
        let mut tilde_alpha = vec![vec![0.0]; n];
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .trim()
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", row + 1)))?;
            if vals.len() != cols.len() || vals[0] as usize != row + 1 {
                return Err(Error::Format(format!("row {} is malformed", row + 1)));
            }
            alpha.push(vals[1]);
            alpha_bar.push(vals[2]);
            beta_tilde.push(vals[3]);
            for i in 0..n {
                weights[i].push(vals[4 + i]);
                tilde_alpha[i].push(vals[4 + n + i]);
            }
        }
        if alpha.is_empty() {
            return Err(Error::Format("schedule table has no rows".into()));
        }
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        Ok(Self {
            kind: None,
            rules: Vec::new(),
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
            weights,
            tilde_alpha,
        })
    }
}
