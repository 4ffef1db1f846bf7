//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! task.kind = labeled_mixture      # labeled_mixture | masked_signals | paired_transition
//! model.variant = X
//! schedule.kind = cosine
//! schedule.steps = 100
//! train.lambda = 0.1
//! train.lr = 0.002
//! train.steps = 5000
//! train.batch = 64
//! train.seed = 1
//! paths.out_dir = runs/mixture
//! ```
//!
//! The keys above are required. Everything else defaults to the tuned preset
//! of the chosen task; see [`KEYS`] for the full list.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use mtdiff::modalities::MaskSampler;
use mtdiff::training::OptimizerKind;
use mtdiff::{Setup, TaskKind, TaskParams};

pub const REQUIRED: [&str; 9] = [
    "task.kind",
    "model.variant",
    "schedule.kind",
    "schedule.steps",
    "train.lambda",
    "train.lr",
    "train.steps",
    "train.batch",
    "train.seed",
];

pub const KEYS: [&str; 34] = [
    "task.kind",
    "task.examples",
    "task.seed",
    "task.classes",
    "task.dim",
    "task.sigma",
    "task.height",
    "task.width",
    "task.patch",
    "task.max_patches",
    "task.transform",
    "model.variant",
    "model.hidden_width",
    "model.hidden_layers",
    "model.time_features",
    "model.time_embed",
    "model.head_width",
    "model.label_head",
    "model.init_seed",
    "model.table_seed",
    "schedule.kind",
    "schedule.steps",
    "schedule.weights",
    "train.lambda",
    "train.lr",
    "train.steps",
    "train.batch",
    "train.seed",
    "train.optimizer",
    "train.cond_dropout",
    "train.clip_norm",
    "train.checkpoint_every",
    "sample.clip_z0",
    "paths.out_dir",
];

/// Optional path keys, accepted in addition to [`KEYS`].
pub const PATH_KEYS: [&str; 3] = ["paths.checkpoint", "paths.metrics", "paths.dataset"];

#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", no + 1))?;
            let key = k.trim().to_owned();
            if !KEYS.contains(&key.as_str()) && !PATH_KEYS.contains(&key.as_str()) {
                bail!("line {}: unknown key `{key}`", no + 1);
            }
            if values.insert(key.clone(), v.trim().to_owned()).is_some() {
                bail!("line {}: duplicate key `{key}`", no + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_owned(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("key `{key}`: bad value `{v}`: {e}")))
            .transpose()
    }

    fn apply<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub setup: Setup,
    pub checkpoint_every: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        if let Some(missing) = REQUIRED.iter().find(|k| raw.get(k).is_none()) {
            bail!("missing required key `{missing}`");
        }
        let kind: TaskKind = raw.parsed("task.kind")?.expect("required");
        let mut s = Setup::preset(kind);

        raw.apply("task.examples", &mut s.examples)?;
        raw.apply("task.seed", &mut s.data_seed)?;
        match &mut s.task {
            TaskParams::Mixture { classes, dim, sigma } => {
                raw.apply("task.classes", classes)?;
                raw.apply("task.dim", dim)?;
                raw.apply("task.sigma", sigma)?;
            }
            TaskParams::Masked { height, width, sampler } => {
                raw.apply("task.height", height)?;
                raw.apply("task.width", width)?;
                let MaskSampler { patch, max_patches } = sampler;
                raw.apply("task.patch", patch)?;
                raw.apply("task.max_patches", max_patches)?;
            }
            TaskParams::Paired {
                height,
                width,
                transform,
            } => {
                raw.apply("task.height", height)?;
                raw.apply("task.width", width)?;
                raw.apply("task.transform", transform)?;
            }
        }
        let foreign: &[&str] = match s.task {
            TaskParams::Mixture { .. } => &["task.height", "task.width", "task.patch", "task.max_patches", "task.transform"],
            TaskParams::Masked { .. } => &["task.classes", "task.dim", "task.sigma", "task.transform"],
            TaskParams::Paired { .. } => &["task.classes", "task.dim", "task.sigma", "task.patch", "task.max_patches"],
        };
        if let Some(k) = foreign.iter().find(|k| raw.get(k).is_some()) {
            bail!("key `{k}` does not apply to task `{}`", kind.name());
        }

        let m = &mut s.model;
        raw.apply("model.variant", &mut m.variant)?;
        raw.apply("model.hidden_width", &mut m.hidden_width)?;
        raw.apply("model.hidden_layers", &mut m.hidden_layers)?;
        raw.apply("model.time_features", &mut m.time_features)?;
        raw.apply("model.time_embed", &mut m.time_embed)?;
        raw.apply("model.head_width", &mut m.head_width)?;
        raw.apply("model.label_head", &mut m.label_head)?;
        raw.apply("model.init_seed", &mut m.init_seed)?;
        raw.apply("model.table_seed", &mut m.table_seed)?;
        raw.apply("schedule.kind", &mut m.schedule)?;
        raw.apply("schedule.steps", &mut m.steps)?;
        raw.apply("schedule.weights", &mut m.weights)?;

        let t = &mut s.train;
        raw.apply("train.lambda", &mut t.lambda)?;
        raw.apply("train.lr", &mut t.lr)?;
        raw.apply("train.steps", &mut t.steps)?;
        raw.apply("train.batch", &mut t.batch)?;
        raw.apply("train.seed", &mut t.seed)?;
        raw.apply::<OptimizerKind>("train.optimizer", &mut t.optimizer)?;
        raw.apply("train.cond_dropout", &mut t.cond_dropout)?;
        if let Some(v) = raw.get("train.clip_norm") {
            t.clip_norm = parse_optional(v).with_context(|| format!("key `train.clip_norm`: bad value `{v}`"))?;
        }
        if let Some(v) = raw.get("sample.clip_z0") {
            s.clip_z0 = parse_range(v).with_context(|| format!("key `sample.clip_z0`: bad value `{v}`"))?;
        }
        t.validate()?;

        let checkpoint_every = match raw.parsed::<usize>("train.checkpoint_every")? {
            Some(0) | None => None,
            Some(k) => Some(k),
        };
        Ok(Self {
            setup: s,
            checkpoint_every,
            out_dir: raw.get("paths.out_dir").map(PathBuf::from),
            checkpoint: raw.get("paths.checkpoint").map(PathBuf::from),
            metrics: raw.get("paths.metrics").map(PathBuf::from),
            dataset: raw.get("paths.dataset").map(PathBuf::from),
        })
    }
}

/// `none` or a number.
fn parse_optional(v: &str) -> Result<Option<f64>> {
    if v == "none" {
        return Ok(None);
    }
    Ok(Some(v.parse()?))
}

/// `none` or `lo,hi`.
pub fn parse_range(v: &str) -> Result<Option<(f64, f64)>> {
    if v == "none" {
        return Ok(None);
    }
    let (lo, hi) = v.split_once(',').ok_or_else(|| anyhow!("expected `lo,hi` or `none`"))?;
    let (lo, hi): (f64, f64) = (lo.trim().parse()?, hi.trim().parse()?);
    if !(lo < hi) {
        bail!("range must satisfy lo < hi");
    }
    Ok(Some((lo, hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtdiff::{ScheduleKind, Variant, WeightRule};

    const BASE: &str = "task.kind = labeled_mixture
model.variant = X
schedule.kind = cosine
schedule.steps = 50
train.lambda = 0.1
train.lr = 0.002
train.steps = 10
train.batch = 8
train.seed = 3
";

    #[test]
    fn parses_and_fills_defaults() {
        let text = format!("{BASE}# a comment\n\nmodel.hidden_width = 32   # inline\nschedule.weights = constant:0.5\n");
        let cfg = RunConfig::from_raw(&RawConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(cfg.setup.model.hidden_width, 32);
        assert_eq!(cfg.setup.model.steps, 50);
        assert_eq!(cfg.setup.model.schedule, ScheduleKind::Cosine);
        assert_eq!(cfg.setup.model.variant, Variant::X);
        assert_eq!(cfg.setup.model.weights, WeightRule::Constant(0.5));
        assert_eq!(cfg.setup.train.batch, 8);
        assert_eq!(cfg.setup.train.clip_norm, Some(0.5));
        assert_eq!(cfg.out_dir, None);
    }

    #[test]
    fn missing_key_is_named() {
        for key in REQUIRED {
            let text: String = BASE.lines().filter(|l| !l.starts_with(key)).map(|l| format!("{l}\n")).collect();
            let err = RunConfig::from_raw(&RawConfig::parse(&text).unwrap()).unwrap_err();
            assert!(err.to_string().contains(key), "{key}: {err}");
        }
    }

    #[test]
    fn rejects_unknown_duplicate_and_foreign_keys() {
        assert!(RawConfig::parse("train.nope = 1").unwrap_err().to_string().contains("train.nope"));
        assert!(RawConfig::parse("train.lr = 1\ntrain.lr = 2").is_err());
        assert!(RawConfig::parse("just words").is_err());
        let text = format!("{BASE}task.patch = 3\n");
        assert!(RunConfig::from_raw(&RawConfig::parse(&text).unwrap()).is_err());
    }

    #[test]
    fn bad_values_are_reported() {
        let text = BASE.replace("train.lr = 0.002", "train.lr = fast");
        let err = RunConfig::from_raw(&RawConfig::parse(&text).unwrap()).unwrap_err();
        assert!(err.to_string().contains("train.lr"));
        let text = BASE.replace("train.lambda = 0.1", "train.lambda = -1");
        assert!(RunConfig::from_raw(&RawConfig::parse(&text).unwrap()).is_err());
    }

    #[test]
    fn optional_values() {
        let text = format!("{BASE}train.clip_norm = none\nsample.clip_z0 = -2, 2\ntrain.checkpoint_every = 0\n");
        let cfg = RunConfig::from_raw(&RawConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(cfg.setup.train.clip_norm, None);
        assert_eq!(cfg.setup.clip_z0, Some((-2.0, 2.0)));
        assert_eq!(cfg.checkpoint_every, None);
        assert!(parse_range("1,1").is_err());
    }
}
