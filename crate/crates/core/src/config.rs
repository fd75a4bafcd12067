//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; missing
//! keys take the desk defaults listed in [`DEFAULT_CONFIG`]. Relative paths
//! are resolved against the directory holding the config file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::blackbox::TrainConfig;
use crate::error::{Error, Result};
use crate::explainer::{ExplainerConfig, Hyper};

/// The default configuration, with one comment per key.
pub const DEFAULT_CONFIG: &str = "\
# root seed; every stage derives its own named sub-seed from it
seed = 42

# synthetic dataset
classes = 4
images_per_class = 500

# black-box classifier training
bb_epochs = 20
bb_batch_size = 64
bb_learning_rate = 0.001
bb_weight_decay = 0.00005

# explainer: concepts per class (C) and embedding dimension (Q)
concepts = 4
embedding_dim = 8
# presence threshold, percent of the per-concept maximum similarity
tau = 95
# similarity stabilizer in 1 / (epsilon + distance)
epsilon = 0.000001
# triplet margin
alpha = 1
# loss weights: cross-entropy, relevance, diversity, triplet
beta = 100
gamma = 1000
delta = 1
omega = 1
# pure batches per mixed batch
rho = 5
# use the black-box argmax instead of its probabilities as the target
one_hot_targets = false
pace_epochs = 40
pace_batch_size = 32
pace_learning_rate = 0.0001
pace_weight_decay = 0.1

# output locations; the last three default to subdirectories of workdir
workdir = work
# dataset_dir = work/dataset
# checkpoint_dir = work/checkpoints
# report_dir = work/reports
";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub classes: usize,
    pub images_per_class: usize,
    pub blackbox: TrainConfig,
    pub explainer: ExplainerConfig,
    pub workdir: PathBuf,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse(DEFAULT_CONFIG, Path::new("")).expect("default config parses")
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e| Error::Config(format!("invalid value `{raw}` for `{key}`: {e}")))
}

impl RunConfig {
    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut seed = 42u64;
        let (mut classes, mut images_per_class) = (4usize, 500usize);
        let mut bb = TrainConfig::default();
        let mut ex = ExplainerConfig::default();
        let mut workdir = PathBuf::from("work");
        let (mut dataset_dir, mut checkpoint_dir, mut report_dir) = (None, None, None);
        let mut seen = HashSet::new();

        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, raw)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            let h = &mut ex.hyper;
            match key {
                "seed" => seed = value(key, raw)?,
                "classes" => classes = value(key, raw)?,
                "images_per_class" => images_per_class = value(key, raw)?,
                "bb_epochs" => bb.epochs = value(key, raw)?,
                "bb_batch_size" => bb.batch_size = value(key, raw)?,
                "bb_learning_rate" => bb.learning_rate = value(key, raw)?,
                "bb_weight_decay" => bb.weight_decay = value(key, raw)?,
                "concepts" => ex.num_concepts = value(key, raw)?,
                "embedding_dim" => ex.dim = value(key, raw)?,
                "tau" => h.tau = value(key, raw)?,
                "epsilon" => h.epsilon = value(key, raw)?,
                "alpha" => h.alpha = value(key, raw)?,
                "beta" => h.beta = value(key, raw)?,
                "gamma" => h.gamma = value(key, raw)?,
                "delta" => h.delta = value(key, raw)?,
                "omega" => h.omega = value(key, raw)?,
                "rho" => h.rho = value(key, raw)?,
                "one_hot_targets" => h.one_hot_targets = value(key, raw)?,
                "pace_epochs" => ex.epochs = value(key, raw)?,
                "pace_batch_size" => ex.batch_size = value(key, raw)?,
                "pace_learning_rate" => ex.learning_rate = value(key, raw)?,
                "pace_weight_decay" => ex.weight_decay = value(key, raw)?,
                "workdir" => workdir = PathBuf::from(raw),
                "dataset_dir" => dataset_dir = Some(PathBuf::from(raw)),
                "checkpoint_dir" => checkpoint_dir = Some(PathBuf::from(raw)),
                "report_dir" => report_dir = Some(PathBuf::from(raw)),
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        bb.seed = seed;
        ex.seed = seed;
        let workdir = base.join(workdir);
        let cfg = RunConfig {
            seed,
            classes,
            images_per_class,
            blackbox: bb,
            explainer: ex,
            dataset_dir: dataset_dir.map_or_else(|| workdir.join("dataset"), |p| base.join(p)),
            checkpoint_dir: checkpoint_dir.map_or_else(|| workdir.join("checkpoints"), |p| base.join(p)),
            report_dir: report_dir.map_or_else(|| workdir.join("reports"), |p| base.join(p)),
            workdir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(format!("reading {}", path.display()), e),
        })?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("`classes` must be at least 2, got {}", self.classes)));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("`images_per_class` must be positive".into()));
        }
        let bb = &self.blackbox;
        if bb.batch_size == 0 {
            return Err(Error::Config("`bb_batch_size` must be positive".into()));
        }
        if !(bb.learning_rate > 0.0 && bb.learning_rate.is_finite()) {
            return Err(Error::Config("`bb_learning_rate` must be positive".into()));
        }
        if !(bb.weight_decay >= 0.0 && bb.weight_decay.is_finite()) {
            return Err(Error::Config("`bb_weight_decay` must be non-negative".into()));
        }
        let ex = &self.explainer;
        let h: &Hyper = &ex.hyper;
        let checks = [
            (ex.num_concepts >= 1, "concepts", "at least 1"),
            (ex.dim >= 1, "embedding_dim", "at least 1"),
            (ex.batch_size >= 1, "pace_batch_size", "positive"),
            (ex.learning_rate > 0.0 && ex.learning_rate.is_finite(), "pace_learning_rate", "positive"),
            (ex.weight_decay >= 0.0 && ex.weight_decay.is_finite(), "pace_weight_decay", "non-negative"),
            (h.tau > 0.0 && h.tau <= 100.0, "tau", "in (0, 100]"),
            (h.epsilon > 0.0 && h.epsilon.is_finite(), "epsilon", "positive"),
            (h.alpha >= 0.0 && h.alpha.is_finite(), "alpha", "non-negative"),
            (h.beta >= 0.0 && h.beta.is_finite(), "beta", "non-negative"),
            (h.gamma >= 0.0 && h.gamma.is_finite(), "gamma", "non-negative"),
            (h.delta >= 0.0 && h.delta.is_finite(), "delta", "non-negative"),
            (h.omega >= 0.0 && h.omega.is_finite(), "omega", "non-negative"),
            (h.rho >= 1, "rho", "at least 1"),
        ];
        if let Some((_, key, want)) = checks.iter().find(|c| !c.0) {
            return Err(Error::Config(format!("`{key}` must be {want}")));
        }
        Ok(())
    }
}
