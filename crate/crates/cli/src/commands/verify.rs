use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{Context, Result};
use mtdiff::oracle::{run_suite, write_reports_csv, Suite};
use mtdiff::NoiseSchedule;

use crate::files::{create, create_dir};
use crate::{resolve_out_dir, Outcome};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Suites to run (repeatable or comma-separated); all by default.
    /// schedule | reduction | marginal | conjugacy | gradient | elbo | mask
    #[arg(long, value_delimiter = ',')]
    suite: Vec<Suite>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Schedule table (CSV as written by `train`) to check instead of the
    /// built-in fixtures.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Report path; defaults to `verify.csv` in the output directory.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<Outcome> {
    let schedule = args
        .schedule
        .as_ref()
        .map(|p| -> Result<_> {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            NoiseSchedule::read_csv(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
        })
        .transpose()?;
    let suites = if args.suite.is_empty() { Suite::ALL.to_vec() } else { args.suite };

    let mut reports = Vec::new();
    for s in suites {
        reports.extend(run_suite(s, args.seed, schedule.as_ref())?);
    }
    for r in &reports {
        println!("{r}");
    }

    let csv = match args.csv {
        Some(p) => p,
        None => {
            let dir = resolve_out_dir(args.out);
            create_dir(&dir)?;
            dir.join("verify.csv")
        }
    };
    write_reports_csv(&reports, create(&csv)?)?;

    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(if failed == 0 { Outcome::Success } else { Outcome::VerificationFailed })
}
