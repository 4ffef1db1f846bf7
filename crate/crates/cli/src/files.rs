//! Checkpoint envelopes and the plain-file inputs and outputs of the CLI.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use mtdiff::archive::{self, Archive};
use mtdiff::modalities::{Mask, ModalityDatum};
use mtdiff::{Model, ModalityKind, Setup, TaskKind, TaskParams};

use crate::config::parse_range;

/// A model plus the task facts needed to present its outputs.
pub struct Checkpoint {
    pub model: Model,
    pub task: Option<TaskKind>,
    pub grid: Option<(usize, usize)>,
    /// Sampler clamp range recorded at training time.
    pub clip_z0: Option<(f64, f64)>,
}

pub fn save_checkpoint(model: &Model, setup: &Setup, path: &Path) -> Result<()> {
    let mut a = archive::model_to_archive(model)?;
    let mut meta = a.meta()?;
    meta.set("task.kind", setup.task.kind().name());
    if let TaskParams::Masked { height, width, .. } | TaskParams::Paired { height, width, .. } = setup.task {
        meta.set("task.height", height);
        meta.set("task.width", width);
    }
    meta.set("sample.clip_z0", format_range(setup.clip_z0));
    a.set_meta(&meta)?;
    a.save(path).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let a = Archive::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let model = archive::model_from_archive(&a)?;
    let meta = a.meta()?;
    let task = meta.get("task.kind").map(str::parse).transpose()?;
    let grid = match (meta.get("task.height"), meta.get("task.width")) {
        (Some(_), Some(_)) => Some((meta.parse_key("task.height")?, meta.parse_key("task.width")?)),
        _ => None,
    };
    let clip_z0 = match meta.get("sample.clip_z0") {
        Some(v) => parse_range(v)?,
        None => None,
    };
    Ok(Checkpoint {
        model,
        task,
        grid,
        clip_z0,
    })
}

pub fn format_range(r: Option<(f64, f64)>) -> String {
    match r {
        Some((lo, hi)) => format!("{lo},{hi}"),
        None => "none".into(),
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn read_signal(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    archive::read_pgm(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Mask::read_pbm(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

pub fn write_signal(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    let mut out = create(path)?;
    archive::write_pgm(&mut out, values, height, width)?;
    Ok(())
}

/// Reads the conditions for one modality.
///
/// A `.pgm` file is one continuous signal. Otherwise the file is text with
/// one condition per line (an optional non-numeric header line is skipped):
/// a class index for categorical modalities, comma-separated values for
/// continuous ones.
pub fn read_conditions(path: &Path, kind: ModalityKind, size: usize) -> Result<Vec<ModalityDatum>> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let out = if is_pgm {
        if kind != ModalityKind::Continuous {
            bail!("a graymap can only condition a continuous modality");
        }
        let (_, _, v) = read_signal(path)?;
        vec![ModalityDatum::continuous(v)]
    } else {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut rows = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let first = line.split(',').next().unwrap_or("").trim();
            if no == 0 && first.parse::<f64>().is_err() {
                continue;
            }
            let d = match kind {
                ModalityKind::Categorical => {
                    let c: usize = first
                        .parse()
                        .map_err(|_| anyhow!("{}:{}: bad class `{first}`", path.display(), no + 1))?;
                    ModalityDatum::class(c)
                }
                ModalityKind::Continuous => ModalityDatum::continuous(
                    line.split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| anyhow!("{}:{}: {e}", path.display(), no + 1))?,
                ),
            };
            rows.push(d);
        }
        rows
    };
    if out.is_empty() {
        bail!("{} holds no conditions", path.display());
    }
    for d in &out {
        match &d.payload {
            mtdiff::Payload::Class(c) if *c >= size => {
                bail!("class {c} out of range for {size} classes")
            }
            mtdiff::Payload::Continuous(v) if v.len() != size => {
                bail!("condition has {} values, modality expects {size}", v.len())
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Writes `header` then one comma-joined row per entry.
pub fn write_rows(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{header}")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    out.flush()?;
    Ok(())
}
