use std::path::PathBuf;

use anyhow::{bail, Result};
use mtdiff::inference::restore;
use mtdiff::{SampleMode, SamplerConfig};

use crate::config::parse_range;
use crate::files::{create_dir, load_checkpoint, read_mask, read_signal, write_rows, write_signal};
use crate::{resolve_out_dir, Outcome};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Signal as a binary graymap (P5).
    #[arg(long)]
    signal: PathBuf,
    /// Mask as a plain bitmap (P1); set pixels are hidden.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clamp range, `lo,hi` or `none`; defaults to the checkpoint's.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<Outcome> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (h, w, signal) = read_signal(&args.signal)?;
    let mask = read_mask(&args.mask)?;
    if (mask.height, mask.width) != (h, w) {
        bail!("mask is {}x{} but signal is {h}x{w}", mask.width, mask.height);
    }
    if let Some((gh, gw)) = ckpt.grid {
        if (gh, gw) != (h, w) {
            bail!("signal is {w}x{h} but the model works on {gw}x{gh}");
        }
    }
    if h * w != ckpt.model.dim() {
        bail!("signal has {} values, model expects {}", h * w, ckpt.model.dim());
    }

    let clip_z0 = match &args.clip {
        Some(v) => parse_range(v)?,
        None => ckpt.clip_z0,
    };
    let opts = SamplerConfig {
        clip_z0,
        ..SamplerConfig::new(SampleMode::Restore, Vec::new(), args.seed)
    };
    let r = restore(&ckpt.model, &signal, &mask, &opts)?;

    let out_dir = resolve_out_dir(args.out);
    create_dir(&out_dir)?;
    write_signal(&out_dir.join("restored.pgm"), &r.signal, h, w)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    write_rows(
        &out_dir.join("restore_report.csv"),
        "masked_fraction,masked_mse,unmasked_mse,from_scratch",
        [format!(
            "{},{},{},{}",
            mask.fraction(),
            fmt(r.masked_mse),
            fmt(r.unmasked_mse),
            r.from_scratch
        )],
    )?;

    if r.from_scratch {
        println!("mask hides every pixel; generated from scratch");
    }
    println!(
        "masked {:.1}%  masked mse {}  unmasked mse {}",
        100.0 * mask.fraction(),
        r.masked_mse.map_or("-".into(), |v| format!("{v:.5}")),
        r.unmasked_mse.map_or("-".into(), |v| format!("{v:.5}")),
    );
    println!("wrote {}", out_dir.join("restored.pgm").display());
    Ok(Outcome::Success)
}
