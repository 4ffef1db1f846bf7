//! A plain single-task DDPM written directly from its textbook formulas.
//!
//! Only the beta sequence is taken from the schedule under test; every
//! derived coefficient is recomputed here. The noise predictor is whatever
//! denoiser the caller supplies, treated as a black box.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{DenoiserInput, DenoiserParams};
use crate::error::Result;
use crate::model::Model;
use crate::tasks::Example;

#[derive(Debug, Clone)]
pub struct RefSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl RefSchedule {
    pub fn new(betas: &[f64]) -> Self {
        let mut alpha_bar = vec![1.0];
        for b in betas {
            let last = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(last * (1.0 - b));
        }
        Self {
            beta: betas.to_vec(),
            alpha_bar,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// `beta_tilde_t`, or `beta_t` when `use_beta` is set.
    fn reverse_var(&self, t: usize, use_beta: bool) -> f64 {
        if use_beta {
            self.beta(t)
        } else {
            self.beta(t) * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
        }
    }
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn marginal(rs: &RefSchedule, z0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let a = rs.alpha_bar[t].sqrt();
    let s = (1.0 - rs.alpha_bar[t]).sqrt();
    z0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Posterior mean and variance from `(z0, z_t)`.
pub fn posterior(rs: &RefSchedule, z0: &[f64], zt: &[f64], t: usize) -> (Vec<f64>, f64) {
    let ab = rs.alpha_bar[t];
    let ab_prev = rs.alpha_bar[t - 1];
    let c0 = ab_prev.sqrt() * rs.beta(t) / (1.0 - ab);
    let ct = rs.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = z0.iter().zip(zt).map(|(x, z)| c0 * x + ct * z).collect();
    (mean, rs.reverse_var(t, false))
}

/// Posterior mean and variance from `(z_t, eps)`.
pub fn posterior_from_eps(rs: &RefSchedule, zt: &[f64], t: usize, eps: &[f64]) -> (Vec<f64>, f64) {
    let c = rs.beta(t) / (1.0 - rs.alpha_bar[t]).sqrt();
    let inv = 1.0 / rs.alpha(t).sqrt();
    let mean = zt.iter().zip(eps).map(|(z, e)| inv * (z - c * e)).collect();
    (mean, rs.reverse_var(t, false))
}

/// Bound terms `(L0, L1, L3)` of a DDPM for one `z0`, drawing `D` normals
/// per step for `t = 1..=T` from `rng`. `use_beta` swaps the posterior
/// variance for `beta_t` in `L1`.
pub fn elbo<R: Rng + ?Sized>(
    model: &Model,
    rs: &RefSchedule,
    z0: &[f64],
    rng: &mut R,
    use_beta: bool,
) -> Result<(f64, f64, f64)> {
    let steps = rs.steps();
    let dim = z0.len();
    let ab_t = rs.alpha_bar[steps];
    let l0 = z0
        .iter()
        .map(|x| {
            let m = ab_t.sqrt() * x;
            0.5 * ((1.0 - ab_t) + m * m - 1.0 - (1.0 - ab_t).ln())
        })
        .sum();
    let (mut l1, mut l3) = (0.0, 0.0);
    for t in 1..=steps {
        let eps = normals(rng, dim);
        let zt = marginal(rs, z0, t, &eps);
        let eps_hat = predict(model, std::slice::from_ref(&zt), t, None)?.remove(0);
        let (mu, _) = posterior_from_eps(rs, &zt, t, &eps_hat);
        if t == 1 {
            let var = rs.beta(1);
            let sq: f64 = z0.iter().zip(&mu).map(|(x, m)| (x - m).powi(2)).sum();
            l3 = 0.5 * sq / var + 0.5 * dim as f64 * (2.0 * PI * var).ln();
        } else {
            let (target, _) = posterior(rs, z0, &zt, t);
            let var = rs.reverse_var(t, use_beta);
            let sq: f64 = target.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum();
            l1 += sq / (2.0 * var);
        }
    }
    Ok((l0, l1, l3))
}

fn predict(model: &Model, z: &[Vec<f64>], t: usize, cond: Option<&Array2<f64>>) -> Result<Vec<Vec<f64>>> {
    let dim = model.dim();
    let mut zt = Array2::zeros((z.len(), dim));
    for (b, row) in z.iter().enumerate() {
        zt.row_mut(b).assign(&ndarray::ArrayView1::from(row));
    }
    let ts = vec![t; z.len()];
    let out = model.denoiser.forward_batch(&DenoiserInput {
        z: zt.view(),
        t: &ts,
        cond: cond.map(|c| c.view()),
    })?;
    Ok(out.eps.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// Ancestral sampling of `chains` trajectories (`z_T` first).
///
/// Draws `z_T` for every chain, then the step noise of every chain for
/// `t = T..=2`. `cond` is passed through to an X-variant denoiser.
pub fn sample(
    model: &Model,
    rs: &RefSchedule,
    chains: usize,
    seed: u64,
    cond: Option<&Array2<f64>>,
    use_beta: bool,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let dim = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<Vec<f64>> = (0..chains).map(|_| normals(&mut rng, dim)).collect();
    let mut paths: Vec<Vec<Vec<f64>>> = z.iter().map(|v| vec![v.clone()]).collect();
    for t in (1..=rs.steps()).rev() {
        let eps_hat = predict(model, &z, t, cond)?;
        for b in 0..chains {
            let (mut next, _) = posterior_from_eps(rs, &z[b], t, &eps_hat[b]);
            if t > 1 {
                let sd = rs.reverse_var(t, use_beta).sqrt();
                for v in next.iter_mut() {
                    *v += sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
            z[b] = next;
            paths[b].push(z[b].clone());
        }
    }
    Ok(paths)
}

/// Adam with bias correction, kept separate from the training module.
#[derive(Debug, Clone, Default)]
pub struct RefAdam {
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RefAdam {
    fn update(&mut self, params: &mut DenoiserParams, grads: &DenoiserParams, lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let g: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, v)| v.to_vec()).collect();
        if self.m.is_empty() {
            self.m = g.iter().map(|x| vec![0.0; x.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            for j in 0..p.len() {
                self.m[k][j] = b1 * self.m[k][j] + (1.0 - b1) * g[k][j];
                self.v[k][j] = b2 * self.v[k][j] + (1.0 - b2) * g[k][j] * g[k][j];
                let m_hat = self.m[k][j] / (1.0 - b1.powi(self.step));
                let v_hat = self.v[k][j] / (1.0 - b2.powi(self.step));
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One DDPM training step on a batch drawn with replacement: per example
/// `t ~ U{1..T}` and `D` normals, loss `mean ||eps_hat - eps||^2`.
/// Conditioning, when the denoiser takes it, is the sum of the example's
/// encodings. Returns the loss.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    rs: &RefSchedule,
    data: &[Example],
    batch: usize,
    lr: f64,
    adam: &mut RefAdam,
    rng: &mut R,
) -> Result<f64> {
    let dim = model.dim();
    let picked: Vec<&Example> = (0..batch)
        .map(|_| data.choose(rng).expect("non-empty data"))
        .collect();
    let mut zt = Array2::zeros((batch, dim));
    let mut eps = Array2::zeros((batch, dim));
    let mut ts = Vec::with_capacity(batch);
    for (b, ex) in picked.iter().enumerate() {
        let t = rng.random_range(1..=rs.steps());
        let e = normals(rng, dim);
        zt.row_mut(b).assign(&ndarray::Array1::from(marginal(rs, &ex.z0, t, &e)));
        eps.row_mut(b).assign(&ndarray::Array1::from(e));
        ts.push(t);
    }
    let cond = model.denoiser.params.cond.as_ref().map(|_| {
        let mut c = Array2::zeros((batch, dim));
        for (b, ex) in picked.iter().enumerate() {
            for (m, d) in model.modalities.iter().zip(&ex.data) {
                let e = m.encode(d, dim).expect("encodable example");
                for (dst, v) in c.row_mut(b).iter_mut().zip(e) {
                    *dst += v;
                }
            }
        }
        c
    });
    let input = DenoiserInput {
        z: zt.view(),
        t: &ts,
        cond: cond.as_ref().map(|c| c.view()),
    };
    let (out, cache) = model.denoiser.forward_train(&input)?;
    let n = (batch * dim) as f64;
    let diff = &out.eps - &eps;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grads = crate::denoiser::OutputGrads {
        eps: diff.mapv(|d| 2.0 * d / n),
        heads: out.heads.iter().map(|h| Array2::zeros(h.raw_dim())).collect(),
    };
    let g = model.denoiser.backward(&cache, &grads)?;
    adam.update(&mut model.denoiser.params, &g, lr);
    Ok(loss)
}
