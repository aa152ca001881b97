//! Experiment configuration files.
//!
//! One TOML file fully describes an experiment: the dataset source,
//! preprocessing, model dimensions, trainer hyperparameters, and the seed
//! list. Every run directory receives a resolved snapshot with all defaults
//! materialized, so a logged run is reproducible from its snapshot alone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use adasit::data::{self, DatasetManifest, PrepOptions};
use adasit::metatrain::{TrainConfig, TrainMode};
use adasit::model::ModelConfig;
use adasit::similarity::SimilarityConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

/// Where the data comes from: a dataset directory/manifest on disk, or a
/// named synthetic preset generated in memory with `gen_seed`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub gen_seed: u64,
    pub max_seq_len: usize,
    pub normalize: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let prep = PrepOptions::default();
        DatasetSection {
            path: None,
            preset: None,
            gen_seed: 0,
            max_seq_len: prep.max_seq_len,
            normalize: prep.normalize,
        }
    }
}

impl DatasetSection {
    pub fn prep_options(&self) -> PrepOptions {
        PrepOptions {
            max_seq_len: self.max_seq_len,
            normalize: self.normalize,
        }
    }

    /// Loads or generates the raw (unprepared) manifest.
    pub fn load_raw(&self, config_dir: &Path) -> Result<DatasetManifest> {
        match (&self.path, &self.preset) {
            (Some(path), None) => {
                let resolved = if path.is_relative() {
                    config_dir.join(path)
                } else {
                    path.clone()
                };
                Ok(data::load_dataset(&resolved)
                    .with_context(|| format!("loading dataset from {}", resolved.display()))?)
            }
            (None, Some(preset)) => {
                let config = data::preset(preset)
                    .with_context(|| format!("unknown synthetic preset '{preset}'"))?;
                Ok(data::generate_synthetic_tasks(&config, self.gen_seed)?)
            }
            (Some(_), Some(_)) => bail!("dataset: set either 'path' or 'preset', not both"),
            (None, None) => bail!("dataset: one of 'path' or 'preset' is required"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 8,
            hidden_dim: 16,
            init_scale: 0.1,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, manifest: &DatasetManifest) -> ModelConfig {
        ModelConfig::for_vocab(
            &manifest.vocab,
            self.embed_dim,
            self.hidden_dim,
            self.init_scale,
        )
    }
}

/// Mirrors the trainer hyperparameters; the per-run seed comes from the
/// top-level seed list rather than this section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub dtr_size: usize,
    pub dval_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_batch: Option<usize>,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub similarity: SimilarityConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            mode: TrainMode::Meta,
            alpha: base.alpha,
            beta: base.beta,
            inner_steps: base.inner_steps,
            dtr_size: base.dtr_size,
            dval_size: base.dval_size,
            task_batch: base.task_batch,
            max_epochs: base.max_epochs,
            early_stop_patience: base.early_stop_patience,
            similarity: base.similarity,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            inner_steps: self.inner_steps,
            dtr_size: self.dtr_size,
            dval_size: self.dval_size,
            task_batch: self.task_batch,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            seed,
            similarity: self.similarity.clone(),
        }
    }
}

/// Parameters for the strategies the ablation sweep adds beyond the
/// configured one.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub knn_k: usize,
    pub static_tolerance: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            knn_k: 5,
            static_tolerance: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list must not be empty");
        }
        if self.name.is_empty() {
            bail!("experiment name must not be empty");
        }
        // Surface hyperparameter problems before any training starts.
        self.train.train_config(0).validate()?;
        Ok(())
    }

    /// Output directory: flag override, then the config's own `output`,
    /// then `$ADASIT_OUTPUT_ROOT/<name>`, then `runs/<name>`.
    pub fn resolve_output(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(dir) = flag {
            return dir.to_path_buf();
        }
        if let Some(dir) = &self.output {
            return dir.clone();
        }
        let root = std::env::var_os("ADASIT_OUTPUT_ROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&self.name)
    }

    /// Resolved snapshot for one seed, written into the run directory.
    pub fn snapshot_for_seed(&self, seed: u64) -> Self {
        let mut snap = self.clone();
        snap.seeds = vec![seed];
        snap
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
