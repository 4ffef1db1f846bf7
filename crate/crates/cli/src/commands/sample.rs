use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Result};
use mtdiff::archive::{tile_grid, write_pgm};
use mtdiff::inference::sample_chains;
use mtdiff::{Payload, SampleMode, SampleOutput, SamplerConfig};

use crate::config::parse_range;
use crate::files::{create, create_dir, load_checkpoint, read_conditions, write_rows};
use crate::{resolve_out_dir, Outcome};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// unconditional | conditional
    #[arg(long, default_value = "unconditional")]
    mode: SampleMode,
    /// Samples per condition.
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Conditions for the fixed modality: a class index or comma-separated
    /// values per line, or a `.pgm` signal.
    #[arg(long)]
    condition: Option<PathBuf>,
    /// Index of the modality the conditions apply to.
    #[arg(long, default_value_t = 0)]
    fixed: usize,
    /// Clamp range for the implied clean signal, `lo,hi` or `none`;
    /// defaults to the range stored in the checkpoint.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<Outcome> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = &ckpt.model;
    let n_mod = model.modalities.len();

    let given: Vec<(Option<usize>, Vec<Option<_>>)> = match args.mode {
        SampleMode::Restore => bail!("restoration takes a signal and mask; use `mtdiff restore`"),
        SampleMode::Unconditional => {
            if args.condition.is_some() {
                bail!("--condition needs --mode conditional");
            }
            vec![(None, vec![None; n_mod]); args.n]
        }
        SampleMode::Conditional => {
            let Some(path) = &args.condition else {
                bail!("conditional sampling needs --condition FILE");
            };
            let Some(m) = model.modalities.get(args.fixed) else {
                bail!("modality {} does not exist; the model has {n_mod}", args.fixed);
            };
            let conds = read_conditions(path, m.spec.kind, m.spec.size)?;
            let mut g = Vec::with_capacity(conds.len() * args.n);
            for (c, d) in conds.into_iter().enumerate() {
                let mut row = vec![None; n_mod];
                row[args.fixed] = Some(d);
                g.extend(std::iter::repeat_n((Some(c), row), args.n));
            }
            g
        }
    };
    let fixed = match args.mode {
        SampleMode::Conditional => vec![args.fixed],
        _ => Vec::new(),
    };
    let clip_z0 = match &args.clip {
        Some(v) => parse_range(v)?,
        None => ckpt.clip_z0,
    };
    let cfg = SamplerConfig {
        clip_z0,
        ..SamplerConfig::new(args.mode, fixed, args.seed)
    };

    let out_dir = resolve_out_dir(args.out);
    create_dir(&out_dir)?;
    let chains: Vec<_> = given.iter().map(|(_, g)| g.clone()).collect();
    let samples = sample_chains(model, &cfg, &chains)?;

    let mut written = Vec::new();
    if !samples.is_empty() {
        let dim = model.dim();
        let mut header = String::from("sample_id,condition");
        for j in 1..=dim {
            write!(header, ",z_{j}")?;
        }
        let rows = samples.iter().zip(&given).enumerate().map(|(k, (s, (c, _)))| {
            let mut r = format!("{k},{}", c.map(|c| c.to_string()).unwrap_or_default());
            for v in &s.z0 {
                let _ = write!(r, ",{v}");
            }
            r
        });
        write_rows(&out_dir.join("samples.csv"), &header, rows)?;
        written.push("samples.csv".to_string());

        if let Some((h, w)) = ckpt.grid.filter(|&(h, w)| h * w == dim) {
            let signals: Vec<_> = samples.iter().map(|s| s.z0.clone()).collect();
            let columns = (signals.len() as f64).sqrt().ceil() as usize;
            let (gh, gw, grid) = tile_grid(&signals, h, w, columns);
            write_pgm(create(&out_dir.join("grid.pgm"))?, &grid, gh, gw)?;
            written.push("grid.pgm".to_string());
        }

        for i in (0..n_mod).filter(|i| !cfg.fixed.contains(i)) {
            if let Some(rows) = label_rows(&samples, i) {
                let name = if n_mod == 1 { "labels.csv".to_string() } else { format!("labels_{i}.csv") };
                write_rows(&out_dir.join(&name), "sample_id,class,confidence", rows)?;
                written.push(name);
            }
        }
    }

    let mut manifest = String::new();
    for name in &written {
        writeln!(manifest, "{name}")?;
    }
    std::fs::write(out_dir.join("manifest.txt"), manifest)?;

    println!(
        "{} samples ({} mode, seed {}) -> {}",
        samples.len(),
        args.mode.name(),
        args.seed,
        out_dir.display()
    );
    if !samples.is_empty() {
        let (mean, sd) = moments(samples.iter().flat_map(|s| s.z0.iter().copied()));
        println!("sample values: mean {mean:.4}, sd {sd:.4}");
    }
    Ok(Outcome::Success)
}

fn label_rows(samples: &[SampleOutput], i: usize) -> Option<Vec<String>> {
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| match (&s.modalities[i].payload, s.confidences[i]) {
            (Payload::Class(c), conf) => Some(format!("{k},{c},{}", conf.map(|p| p.to_string()).unwrap_or_default())),
            _ => None,
        })
        .collect()
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut ss) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        s += v;
        ss += v * v;
    }
    let mean = s / n as f64;
    (mean, (ss / n as f64 - mean * mean).max(0.0).sqrt())
}
