use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use mtdiff::diffusion::standard_normal;
use mtdiff::inference::{label_accuracy, restore_batch, sample, sample_chains};
use mtdiff::modalities::ModalityDatum;
use mtdiff::tasks::{structured_signal, GroundTruth};
use mtdiff::training::{elbo_eval, EpsSource};
use mtdiff::{Example, Model, SampleMode, SamplerConfig, Setup, TaskParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RawConfig, RunConfig};
use crate::files::{create_dir, load_checkpoint, write_rows};
use crate::{resolve_out_dir, Outcome};

/// Examples scored by the bound.
const ELBO_EXAMPLES: usize = 8;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training config; without it the task's preset is assumed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Test items (per class for the labeled mixture).
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<Outcome> {
    if args.n == 0 {
        bail!("--n must be positive");
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let setup = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_raw(&RawConfig::parse(&text)?)?.setup
        }
        None => match ckpt.task {
            Some(kind) => Setup::preset(kind),
            None => bail!("checkpoint records no task; pass --config"),
        },
    };
    if ckpt.task.is_some_and(|k| k != setup.task.kind()) {
        bail!("checkpoint and config describe different tasks");
    }
    let model = &ckpt.model;
    let sampler = SamplerConfig {
        clip_z0: ckpt.clip_z0,
        ..SamplerConfig::unconditional(args.seed)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (mut rows, examples) = match &setup.task {
        TaskParams::Mixture { .. } => mixture(model, &setup, &sampler, args.n, &mut rng)?,
        TaskParams::Masked { height, width, sampler: masks } => {
            let items: Vec<_> = (0..args.n)
                .map(|_| -> Result<_> {
                    let s = structured_signal(*height, *width, &mut rng);
                    let m = masks.sample_with_count(*height, *width, 5, &mut rng)?;
                    Ok((s, m))
                })
                .collect::<Result<_>>()?;
            let restored = restore_batch(model, &items, &sampler)?;
            let (mut num, mut den, mut unmasked, mut frac) = (0.0, 0.0, 0.0, 0.0);
            for ((s, m), r) in items.iter().zip(&restored) {
                num += mse(&r.signal, s);
                den += mse(&m.apply(s)?, s);
                unmasked += r.unmasked_mse.unwrap_or(0.0);
                frac += m.fraction();
            }
            let n = args.n as f64;
            let rows = vec![
                ("masked_fraction".to_string(), frac / n),
                ("restored_mse".into(), num / n),
                ("masked_input_mse".into(), den / n),
                ("restoration_ratio".into(), num / den),
                ("unmasked_mse".into(), unmasked / n),
            ];
            let examples = items
                .into_iter()
                .map(|(s, m)| -> Result<_> {
                    Ok(Example {
                        data: vec![ModalityDatum::masked(&s, m)?],
                        z0: s,
                    })
                })
                .collect::<Result<_>>()?;
            (rows, examples)
        }
        TaskParams::Paired {
            height,
            width,
            transform,
        } => {
            let sources: Vec<_> = (0..args.n).map(|_| structured_signal(*height, *width, &mut rng)).collect();
            let targets: Vec<_> = sources.iter().map(|s| transform.apply(s, *height, *width)).collect();
            let given: Vec<_> = sources
                .iter()
                .map(|s| vec![Some(ModalityDatum::continuous(s.clone()))])
                .collect();
            let cfg = SamplerConfig {
                mode: SampleMode::Conditional,
                fixed: vec![0],
                ..sampler.clone()
            };
            let out = sample_chains(model, &cfg, &given)?;
            let err: f64 = out.iter().zip(&targets).map(|(o, t)| mse(&o.z0, t)).sum::<f64>() / args.n as f64;
            let all: Vec<f64> = targets.iter().flatten().copied().collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
            let rows = vec![
                ("target_mse".to_string(), err),
                ("target_variance".into(), var),
                ("mse_variance_ratio".into(), err / var),
            ];
            let examples = sources
                .into_iter()
                .zip(targets)
                .map(|(s, t)| Example {
                    z0: t,
                    data: vec![ModalityDatum::continuous(s)],
                })
                .collect();
            (rows, examples)
        }
    };

    let scored = &examples[..examples.len().min(ELBO_EXAMPLES)];
    let mut terms = [0.0; 4];
    for ex in scored {
        let e = elbo_eval(model, &ex.z0, &ex.data, EpsSource::Model, &mut rng)?;
        for (acc, v) in terms.iter_mut().zip([e.l0, e.l1, e.l2, e.l3]) {
            *acc += v / scored.len() as f64;
        }
    }
    for (name, v) in ["elbo_l0", "elbo_l1", "elbo_l2", "elbo_l3"].into_iter().zip(terms) {
        rows.push((name.into(), v));
    }

    let out_dir = resolve_out_dir(args.out);
    create_dir(&out_dir)?;
    for (k, v) in &rows {
        println!("{k:<24} {v:.6}");
    }
    write_rows(
        &out_dir.join("eval.csv"),
        "metric,value",
        rows.iter().map(|(k, v)| format!("{k},{v}")),
    )?;
    Ok(Outcome::Success)
}

/// Class-conditional means and label-head accuracy on fresh draws around
/// the true component means.
fn mixture(
    model: &Model,
    setup: &Setup,
    sampler: &SamplerConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(String, f64)>, Vec<Example>)> {
    let data = setup.dataset()?;
    let GroundTruth::Mixture { means, sigma } = &data.truth else {
        bail!("dataset carries no mixture means");
    };
    let mut rows = Vec::new();
    let mut within = 0usize;
    let mut worst = 0.0f64;
    for (k, mu) in means.iter().enumerate() {
        let cfg = SamplerConfig {
            mode: SampleMode::Conditional,
            fixed: vec![0],
            seed: sampler.seed + k as u64,
            ..sampler.clone()
        };
        let out = sample(model, &cfg, &[Some(ModalityDatum::class(k))], n)?;
        let mut centre = vec![0.0; mu.len()];
        for s in &out {
            for (c, v) in centre.iter_mut().zip(&s.z0) {
                *c += v / n as f64;
            }
        }
        let d = centre.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        within += usize::from(d < 0.1);
        worst = worst.max(d);
        rows.push((format!("class_{k}_mean_distance"), d));
    }
    rows.push(("classes_within_0.1".into(), within as f64));
    rows.push(("worst_mean_distance".into(), worst));

    let examples: Vec<Example> = (0..n * means.len())
        .map(|j| {
            let k = j % means.len();
            let z0 = means[k]
                .iter()
                .zip(standard_normal(rng, means[k].len()))
                .map(|(m, e)| m + sigma * e)
                .collect();
            Example {
                z0,
                data: vec![ModalityDatum::class(k)],
            }
        })
        .collect();
    rows.push(("label_accuracy_t1".into(), label_accuracy(model, &examples, 0)?));
    Ok((rows, examples))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}
