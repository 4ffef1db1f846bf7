use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use mtdiff::archive;
use mtdiff::training::{metrics_csv_header, metrics_csv_row, smoothed_loss, Trainer};

use crate::config::{RawConfig, RunConfig};
use crate::files::{create, create_dir, save_checkpoint};
use crate::{resolve_out_dir, Outcome};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Run configuration (key = value lines).
    pub config: PathBuf,
    /// Overrides `train.lambda` from the config.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Output directory; overrides `paths.out_dir` and the environment.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the generated dataset (`dataset.mtd`, plus `labels.csv`
    /// for labeled tasks).
    #[arg(long)]
    pub save_dataset: bool,
}

pub fn run(args: Args) -> Result<Outcome> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut raw = RawConfig::parse(&text).with_context(|| format!("in {}", args.config.display()))?;
    if let Some(l) = args.lambda {
        raw.set("train.lambda", l);
    }
    let cfg = RunConfig::from_raw(&raw).with_context(|| format!("in {}", args.config.display()))?;
    let out_dir = resolve_out_dir(args.out.or(cfg.out_dir.clone()));
    create_dir(&out_dir)?;
    let place = |p: &Option<PathBuf>, default: &str| match p {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => out_dir.join(p),
        None => out_dir.join(default),
    };
    let checkpoint_path = place(&cfg.checkpoint, "checkpoint.mtd");
    let metrics_path = place(&cfg.metrics, "metrics.csv");

    let setup = &cfg.setup;
    let data = match &cfg.dataset {
        Some(p) => {
            let d = archive::load_dataset(p).with_context(|| format!("reading dataset {}", p.display()))?;
            if d.kind != setup.task.kind() {
                bail!("dataset {} holds a {} task, config says {}", p.display(), d.kind.name(), setup.task.kind().name());
            }
            d
        }
        None => setup.dataset()?,
    };
    if data.is_empty() {
        bail!("the dataset has no examples");
    }
    if args.save_dataset {
        archive::save_dataset(&data, &out_dir.join("dataset.mtd"))?;
        if setup.task.kind() == mtdiff::TaskKind::LabeledMixture {
            archive::write_labels_csv(&data, create(&out_dir.join("labels.csv"))?)?;
        }
    }

    let model = setup.model_for(&data)?;
    model.schedule.write_csv(create(&out_dir.join("schedule.csv"))?)?;
    let steps = setup.train.steps;
    let mut trainer = Trainer::new(model, setup.train.clone())?;
    let mut history = Vec::with_capacity(steps);
    let mut metrics = create(&metrics_path)?;
    writeln!(metrics, "{}", metrics_csv_header(trainer.model.modalities.len()))?;
    let report_every = (steps / 10).max(1);
    for _ in 0..steps {
        let m = trainer.train_step(&data.examples)?;
        if m.step % report_every == 0 {
            eprintln!("step {:>6}  loss {:.5}", m.step, m.total_loss);
        }
        if let Some(k) = cfg.checkpoint_every {
            if m.step % k == 0 && m.step < steps {
                save_checkpoint(&trainer.model, setup, &out_dir.join(format!("checkpoint_{:06}.mtd", m.step)))?;
            }
        }
        writeln!(metrics, "{}", metrics_csv_row(&m))?;
        history.push(m);
    }
    metrics.flush()?;
    save_checkpoint(&trainer.model, setup, &checkpoint_path)?;

    println!("trained {steps} steps on {} examples ({})", data.len(), setup.task.kind().name());
    if let (Some(first), Some(last)) = (smoothed_loss(&history, 100.min(steps), 100), smoothed_loss(&history, steps, 100)) {
        println!("smoothed loss: {first:.5} at step {} -> {last:.5} at step {steps}", 100.min(steps));
    }
    println!("checkpoint: {}", checkpoint_path.display());
    println!("metrics:    {}", metrics_path.display());
    Ok(Outcome::Success)
}
