//! Run configuration. One JSON file plus a seed fully determines a run;
//! every artifact a command writes is a pure function of the two.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sawnet_core::data::{
    load_manifest, load_split, split_dataset, synth_dataset, AugmentParams, Dataset, Split,
    SynthClass,
};
use sawnet_core::rng::{SALT_SYNTH, SALT_TEST_SPLIT};
use sawnet_core::sawnet::{EmbeddingSpec, ModelConfig, ModelSpec};
use sawnet_core::train::OptimConfig;
use sawnet_core::error::named_io;
use sawnet_core::{derive_seed, Error, Result};

/// Where the point clouds come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Analytic shapes generated on the fly, split into train/held-out.
    Synth {
        classes: Vec<SynthClass>,
        per_class: usize,
        points: usize,
        /// Fraction of clouds held out for evaluation.
        #[serde(default = "default_holdout")]
        holdout: f64,
        /// Generation seed; defaults to a stream derived from the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Mesh files listed in a manifest, each sampled to `points` points.
    /// Paths in the manifest resolve relative to the manifest file.
    Manifest { path: PathBuf, points: usize },
}

fn default_holdout() -> f64 {
    0.2
}

impl DatasetSpec {
    /// Points per cloud after sampling; every model input has this many.
    pub fn points(&self) -> usize {
        match self {
            DatasetSpec::Synth { points, .. } | DatasetSpec::Manifest { points, .. } => *points,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Synth {
                classes,
                per_class,
                points,
                holdout,
                ..
            } => {
                if classes.is_empty() {
                    return Err(Error::Config("synth dataset needs at least one class".into()));
                }
                if *per_class == 0 {
                    return Err(Error::Config("per_class must be positive".into()));
                }
                if *points == 0 {
                    return Err(Error::Config("points must be positive".into()));
                }
                if !(*holdout > 0.0 && *holdout < 1.0) {
                    return Err(Error::Config(format!(
                        "holdout must lie strictly between 0 and 1, got {holdout}"
                    )));
                }
            }
            DatasetSpec::Manifest { points, .. } => {
                if *points == 0 {
                    return Err(Error::Config("points must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Everything a run needs. Fields with defaults can be omitted from the
/// JSON; unknown fields are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Experiment id recorded in every result row. Kept to a conservative
    /// charset so the CSV never needs quoting.
    pub experiment: String,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    /// Train one of the embedding baselines instead of a trunk variant.
    #[serde(default)]
    pub embedding: Option<EmbeddingSpec>,
    /// `null` (or absent) disables train-time augmentation; `{}` enables
    /// it with the default magnitudes.
    #[serde(default)]
    pub augment: Option<AugmentParams>,
    #[serde(default)]
    pub optim: OptimConfig,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Group count for the grouped embedding baseline in `ablate`.
    #[serde(default = "default_embedding_groups")]
    pub embedding_groups: usize,
    /// Output directory; `--out` overrides.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

fn default_batch_size() -> usize {
    8
}

fn default_embedding_groups() -> usize {
    4
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| named_io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty()
            || !self
                .experiment
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
        {
            return Err(Error::Config(format!(
                "experiment id {:?} must be non-empty [A-Za-z0-9_.-]",
                self.experiment
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.embedding_groups == 0 {
            return Err(Error::Config("embedding_groups must be positive".into()));
        }
        self.dataset.validate()?;
        self.optim.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            config: self.model.clone(),
            embedding: self.embedding.clone(),
        }
    }

    fn data_seed(&self) -> u64 {
        match &self.dataset {
            DatasetSpec::Synth { seed: Some(s), .. } => *s,
            _ => derive_seed(self.seed, &[SALT_SYNTH]),
        }
    }

    /// Materializes the (train, held-out) pair this config describes.
    pub fn build_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Synth {
                classes,
                per_class,
                points,
                holdout,
                ..
            } => {
                let ds = synth_dataset(classes, *per_class, *points, self.data_seed())?;
                split_dataset(&ds, *holdout, derive_seed(self.seed, &[SALT_TEST_SPLIT]))
            }
            DatasetSpec::Manifest { path, points } => {
                let manifest = load_manifest(path)?;
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                let train = load_split(&manifest, Split::Train, base, *points, self.data_seed())?;
                let test = load_split(&manifest, Split::Test, base, *points, self.data_seed())?;
                Ok((train, test))
            }
        }
    }
}
