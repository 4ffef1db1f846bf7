//! Joint training of the noise predictor and the modality heads.
//!
//! Per example: draw `t ~ U{1..T}` and `eps ~ N(0, I)`, build `z_t` from the
//! aggregated forward marginal, then minimise
//! `mean ||eps_hat - eps||^2 + lambda * sum_i nll_i`.

mod elbo;
mod optim;

use std::io::Write;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{BatchOutput, DenoiserInput, ForwardCache, OutputGrads, Variant};
use crate::diffusion::{marginal_sample, standard_normal};
use crate::error::{check_dim, Error, Result};
use crate::modalities::{modality_nll_grad, ModalityDatum};
use crate::model::Model;
use crate::tasks::Example;

pub use elbo::{elbo_eval, ElboTerms, EpsSource};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the modality prediction losses.
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Probability of hiding each modality from the X-variant conditioning
    /// input. The forward aggregation always uses every modality.
    pub cond_dropout: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            steps: 1000,
            batch: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            cond_dropout: 0.0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Loss of one batch, split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    /// Batch-mean negative log-likelihood per modality.
    pub modality: Vec<f64>,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.mse + self.lambda * self.modality.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub step: usize,
    pub mse_loss: f64,
    pub modality_losses: Vec<f64>,
    pub total_loss: f64,
    pub grad_norm: f64,
}

/// Inputs and targets of one optimisation step.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub zt: Array2<f64>,
    pub t: Vec<usize>,
    pub cond: Option<Array2<f64>>,
    pub eps: Array2<f64>,
    pub data: Vec<Vec<ModalityDatum>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn input(&self) -> DenoiserInput<'_> {
        DenoiserInput {
            z: self.zt.view(),
            t: &self.t,
            cond: self.cond.as_ref().map(|c| c.view()),
        }
    }
}

/// Builds noisy inputs for `examples`.
///
/// RNG order: per example `t` then `D` normals; afterwards, for the X variant
/// with positive dropout, one Bernoulli draw per (example, modality).
pub fn prepare_batch<R: Rng + ?Sized>(
    model: &Model,
    examples: &[&Example],
    cond_dropout: f64,
    rng: &mut R,
) -> Result<TrainBatch> {
    let dim = model.dim();
    let steps = model.steps();
    let rows = examples.len();
    let mut zt = Array2::zeros((rows, dim));
    let mut eps = Array2::zeros((rows, dim));
    let mut ts = Vec::with_capacity(rows);
    let mut bundles = Vec::with_capacity(rows);
    for (b, ex) in examples.iter().enumerate() {
        check_dim("example z0", dim, ex.z0.len())?;
        let bundle = model.encode(&ex.data)?;
        let t = rng.random_range(1..=steps);
        let noise = standard_normal(rng, dim);
        let state = marginal_sample(&ex.z0, &bundle, t, &model.schedule, &noise)?;
        zt.row_mut(b).assign(&ndarray::ArrayView1::from(&state.z));
        eps.row_mut(b).assign(&ndarray::ArrayView1::from(&noise));
        ts.push(t);
        bundles.push(bundle);
    }

    let cond = match model.variant() {
        Variant::U => None,
        Variant::X => {
            let mut cond = Array2::zeros((rows, dim));
            for (b, mut bundle) in bundles.into_iter().enumerate() {
                if cond_dropout > 0.0 {
                    for on in bundle.active.iter_mut() {
                        *on = !rng.random_bool(cond_dropout);
                    }
                }
                cond.row_mut(b)
                    .assign(&ndarray::Array1::from(bundle.active_sum(dim)));
            }
            Some(cond)
        }
    };

    Ok(TrainBatch {
        zt,
        t: ts,
        cond,
        eps,
        data: examples.iter().map(|e| e.data.clone()).collect(),
    })
}

/// Loss terms and output gradients for already computed outputs.
pub fn loss_from_output(
    model: &Model,
    batch: &TrainBatch,
    out: &BatchOutput,
    lambda: f64,
) -> Result<(LossBreakdown, OutputGrads)> {
    let rows = batch.len();
    let dim = model.dim();
    if rows == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let n = (rows * dim) as f64;
    let diff = &out.eps - &batch.eps;
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let d_eps = diff.mapv(|d| 2.0 * d / n);

    let mut modality = Vec::with_capacity(model.modalities.len());
    let mut d_heads = Vec::with_capacity(model.modalities.len());
    for (i, m) in model.modalities.iter().enumerate() {
        let head = &out.heads[i];
        let mut grad = Array2::zeros(head.raw_dim());
        let mut total = 0.0;
        for b in 0..rows {
            let pred = head.row(b).to_vec();
            let (loss, g) = modality_nll_grad(&m.spec, &pred, &batch.data[b][i])?;
            total += loss;
            for (dst, v) in grad.row_mut(b).iter_mut().zip(g) {
                *dst = lambda * v / rows as f64;
            }
        }
        modality.push(total / rows as f64);
        d_heads.push(grad);
    }

    let breakdown = LossBreakdown {
        mse,
        modality,
        lambda,
    };
    if !breakdown.total().is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((
        breakdown,
        OutputGrads {
            eps: d_eps,
            heads: d_heads,
        },
    ))
}

/// Forward pass plus loss; keeps the cache for a backward pass.
pub fn forward_loss(
    model: &Model,
    batch: &TrainBatch,
    lambda: f64,
) -> Result<(LossBreakdown, OutputGrads, ForwardCache)> {
    let (out, cache) = model.denoiser.forward_train(&batch.input())?;
    let (loss, grads) = loss_from_output(model, batch, &out, lambda)?;
    Ok((loss, grads, cache))
}

/// Scalar training loss of a fixed batch.
pub fn batch_loss(model: &Model, batch: &TrainBatch, lambda: f64) -> Result<LossBreakdown> {
    let out = model.denoiser.forward_batch(&batch.input())?;
    loss_from_output(model, batch, &out, lambda).map(|(l, _)| l)
}

pub struct Trainer {
    pub model: Model,
    cfg: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            optimizer: Optimizer::new(cfg.optimizer),
            cfg,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the loss weight between phases, e.g. a `lambda = 0` finetune.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.lambda = lambda;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One optimisation step on a batch drawn uniformly with replacement.
    pub fn train_step(&mut self, dataset: &[Example]) -> Result<TrainMetrics> {
        if dataset.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let examples: Vec<&Example> = (0..self.cfg.batch)
            .map(|_| dataset.choose(&mut self.rng).expect("non-empty"))
            .collect();
        let batch = prepare_batch(&self.model, &examples, self.cfg.cond_dropout, &mut self.rng)?;
        self.step_on_batch(&batch)
    }

    pub fn step_on_batch(&mut self, batch: &TrainBatch) -> Result<TrainMetrics> {
        let (loss, grads, cache) = forward_loss(&self.model, batch, self.cfg.lambda)?;
        let mut g = self.model.denoiser.backward(&cache, &grads)?;
        let grad_norm = g.squared_norm().sqrt();
        if let Some(clip) = self.cfg.clip_norm {
            if grad_norm > clip {
                let scale = clip / grad_norm;
                for tensor in g.tensors_mut() {
                    tensor.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        self.optimizer
            .apply(&mut self.model.denoiser.params, &g, self.cfg.lr);
        if !self.model.denoiser.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", self.step + 1)));
        }
        self.step += 1;
        Ok(TrainMetrics {
            step: self.step,
            total_loss: loss.total(),
            mse_loss: loss.mse,
            modality_losses: loss.modality,
            grad_norm,
        })
    }

    /// Runs `steps` steps, handing each step's metrics to `on_step`.
    pub fn run(
        &mut self,
        dataset: &[Example],
        steps: usize,
        mut on_step: impl FnMut(&TrainMetrics),
    ) -> Result<Vec<TrainMetrics>> {
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.train_step(dataset)?;
            on_step(&m);
            history.push(m);
        }
        Ok(history)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Mean total loss over the `window` steps ending at `step` (1-based).
pub fn smoothed_loss(history: &[TrainMetrics], step: usize, window: usize) -> Option<f64> {
    if step == 0 || step > history.len() || window == 0 {
        return None;
    }
    let lo = step.saturating_sub(window);
    let slice = &history[lo..step];
    Some(slice.iter().map(|m| m.total_loss).sum::<f64>() / slice.len() as f64)
}

/// CSV header for metrics of a model with `modalities` heads.
pub fn metrics_csv_header(modalities: usize) -> String {
    let mut header = vec!["step".to_string(), "mse_loss".to_string()];
    header.extend((1..=modalities).map(|i| format!("modality_{i}")));
    header.push("total_loss".into());
    header.push("grad_norm".into());
    header.join(",")
}

/// One CSV row; floats use the shortest round-trip representation.
pub fn metrics_csv_row(m: &TrainMetrics) -> String {
    let mut row = vec![m.step.to_string(), m.mse_loss.to_string()];
    row.extend(m.modality_losses.iter().map(f64::to_string));
    row.push(m.total_loss.to_string());
    row.push(m.grad_norm.to_string());
    row.join(",")
}

/// Writes metrics as CSV: `step,mse_loss,modality_<i>...,total_loss,grad_norm`.
pub fn write_metrics_csv<W: Write>(history: &[TrainMetrics], mut out: W) -> Result<()> {
    let modalities = history.first().map_or(0, |m| m.modality_losses.len());
    writeln!(out, "{}", metrics_csv_header(modalities))?;
    for m in history {
        writeln!(out, "{}", metrics_csv_row(m))?;
    }
    Ok(())
}
