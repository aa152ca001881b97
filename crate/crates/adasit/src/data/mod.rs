//! Event-sequence data model, dataset files, deterministic splits, and
//! synthetic multi-regime task generation.
//!
//! A dataset on disk is a `manifest.toml` plus one records file per task.
//! The manifest carries the vocabulary, per-task metadata (records path,
//! cached positive rate, explicit split index lists) and dataset-level
//! statistics; records files hold one episode per line in the grammar of
//! [`format`]. Everything is validated on load and loaders reject unknown
//! fields, so a manifest fully and unambiguously determines the dataset.
//!
//! All types are immutable after construction; transformations such as
//! truncation and normalization return new manifests.

pub mod format;
pub mod synthetic;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub use synthetic::{generate_synthetic_tasks, preset, RegimeConfig, SyntheticConfig};

/// Manifest filename inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("task {task_id}: {message}")]
    Invariant { task_id: String, message: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("invalid split request: {0}")]
    Split(String),
    #[error("invalid synthetic config: {0}")]
    SyntheticConfig(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One timestamped event: a type, categorical attribute codes, numeric
/// attribute measurements, and the record time in hours from episode start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_type: usize,
    pub value_c: Vec<usize>,
    pub value_n: Vec<f64>,
    pub time: f64,
}

/// One labeled episode: events in non-decreasing time order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSample {
    pub events: Vec<EventRecord>,
    pub label: bool,
}

/// Which portion of a task's samples an operation reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Disjoint, exhaustive partition of a task's sample indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndex {
    pub fn part(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Checks the partition property against a sample count.
    pub fn validate(&self, n_samples: usize) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (name, part) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            for &idx in part {
                if idx >= n_samples {
                    return Err(format!(
                        "{name} split references sample {idx} but the task has {n_samples} samples"
                    ));
                }
                if !seen.insert(idx) {
                    return Err(format!("sample {idx} appears in more than one split"));
                }
            }
        }
        if seen.len() != n_samples {
            return Err(format!(
                "splits cover {} of {} samples",
                seen.len(),
                n_samples
            ));
        }
        Ok(())
    }
}

/// One task: a disease-like cohort of labeled episodes with its split and
/// cached positive rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCorpus {
    pub task_id: String,
    pub samples: Vec<EpisodeSample>,
    pub split: SplitIndex,
    pub positive_rate: f64,
}

impl TaskCorpus {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Samples in the given split, paired with their indices.
    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = (usize, &EpisodeSample)> {
        self.split.part(split).iter().map(|&i| (i, &self.samples[i]))
    }

    fn recount_positive_rate(&self) -> f64 {
        let pos = self.samples.iter().filter(|s| s.label).count();
        pos as f64 / self.samples.len() as f64
    }
}

/// Names for event types and categorical attribute codes, plus the number of
/// numeric attribute slots. Indices into these lists are what records files
/// store, so ordering is part of the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub event_types: Vec<String>,
    pub categorical_values: Vec<String>,
    pub numeric_dims: usize,
}

impl Vocabulary {
    fn validate(&self) -> Result<(), String> {
        if self.event_types.is_empty() {
            return Err("vocabulary has no event types".to_string());
        }
        for (what, names) in [
            ("event_types", &self.event_types),
            ("categorical_values", &self.categorical_values),
        ] {
            let unique: BTreeSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(format!("duplicate names in {what}"));
            }
        }
        Ok(())
    }
}

/// Dataset-level totals, stored in the manifest and re-verified on load.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestStats {
    pub task_count: usize,
    pub sample_count: usize,
    pub positive_rate: f64,
}

/// A named collection of tasks sharing one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub vocab: Vocabulary,
    pub tasks: Vec<TaskCorpus>,
    pub stats: ManifestStats,
}

impl DatasetManifest {
    /// Builds a manifest from tasks, computing the stats block.
    pub fn from_tasks(
        name: String,
        vocab: Vocabulary,
        tasks: Vec<TaskCorpus>,
    ) -> Result<Self, DataError> {
        let stats = compute_stats(&tasks);
        let manifest = DatasetManifest {
            name,
            vocab,
            tasks,
            stats,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn task_index(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_id == task_id)
    }

    /// (task_id, positive_rate) pairs in manifest order.
    pub fn task_rates(&self) -> Vec<(String, f64)> {
        self.tasks
            .iter()
            .map(|t| (t.task_id.clone(), t.positive_rate))
            .collect()
    }

    /// Checks every invariant: vocabulary, per-event ranges and ordering,
    /// split partitions, cached rates, and the stats block.
    pub fn validate(&self) -> Result<(), DataError> {
        self.vocab.validate().map_err(|m| DataError::Dataset(m))?;
        if self.tasks.is_empty() {
            return Err(DataError::Dataset("manifest has no tasks".to_string()));
        }
        let mut ids = BTreeSet::new();
        for task in &self.tasks {
            if !ids.insert(&task.task_id) {
                return Err(DataError::Dataset(format!(
                    "duplicate task id {}",
                    task.task_id
                )));
            }
            validate_task(task, &self.vocab)?;
        }
        let expect = compute_stats(&self.tasks);
        if expect != self.stats {
            return Err(DataError::Dataset(format!(
                "stored stats {:?} disagree with recomputed {:?}",
                self.stats, expect
            )));
        }
        Ok(())
    }
}

fn compute_stats(tasks: &[TaskCorpus]) -> ManifestStats {
    let sample_count: usize = tasks.iter().map(|t| t.n_samples()).sum();
    let positives: usize = tasks
        .iter()
        .map(|t| t.samples.iter().filter(|s| s.label).count())
        .sum();
    ManifestStats {
        task_count: tasks.len(),
        sample_count,
        positive_rate: if sample_count == 0 {
            0.0
        } else {
            positives as f64 / sample_count as f64
        },
    }
}

fn validate_task(task: &TaskCorpus, vocab: &Vocabulary) -> Result<(), DataError> {
    let invariant = |message: String| DataError::Invariant {
        task_id: task.task_id.clone(),
        message,
    };
    if task.samples.is_empty() {
        return Err(invariant("task has no samples".to_string()));
    }
    for (k, sample) in task.samples.iter().enumerate() {
        validate_sample(sample, vocab).map_err(|m| invariant(format!("sample {k}: {m}")))?;
    }
    task.split
        .validate(task.samples.len())
        .map_err(invariant)?;
    let recount = task.recount_positive_rate();
    if task.positive_rate != recount {
        return Err(invariant(format!(
            "cached positive_rate {} disagrees with recount {}",
            task.positive_rate, recount
        )));
    }
    Ok(())
}

fn validate_sample(sample: &EpisodeSample, vocab: &Vocabulary) -> Result<(), String> {
    if sample.events.is_empty() {
        return Err("episode has no events".to_string());
    }
    let mut prev_time = 0.0;
    for (i, e) in sample.events.iter().enumerate() {
        if e.event_type >= vocab.event_types.len() {
            return Err(format!(
                "event {i}: event type {} outside vocabulary of {}",
                e.event_type,
                vocab.event_types.len()
            ));
        }
        for &c in &e.value_c {
            if c >= vocab.categorical_values.len() {
                return Err(format!(
                    "event {i}: categorical code {c} outside vocabulary of {}",
                    vocab.categorical_values.len()
                ));
            }
        }
        if e.value_n.len() > vocab.numeric_dims {
            return Err(format!(
                "event {i}: {} numeric values but the vocabulary declares {} slots",
                e.value_n.len(),
                vocab.numeric_dims
            ));
        }
        if e.value_n.iter().any(|v| !v.is_finite()) {
            return Err(format!("event {i}: non-finite numeric value"));
        }
        if !e.time.is_finite() || e.time < 0.0 {
            return Err(format!("event {i}: invalid time {}", e.time));
        }
        if i > 0 && e.time < prev_time {
            return Err(format!(
                "events not sorted: event {i} at time {} follows time {}",
                e.time, prev_time
            ));
        }
        prev_time = e.time;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest file representation

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    name: String,
    vocab: Vocabulary,
    stats: ManifestStats,
    tasks: Vec<TaskEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    task_id: String,
    records: String,
    positive_rate: f64,
    split: SplitIndex,
}

/// Loads and fully validates a dataset. `path` may be the manifest file or a
/// directory containing `manifest.toml`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetManifest, DataError> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let file: ManifestFile = toml::from_str(&text).map_err(|e| DataError::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut tasks = Vec::with_capacity(file.tasks.len());
    for entry in file.tasks {
        let records_path = base.join(&entry.records);
        let samples = load_records(&records_path)?;
        tasks.push(TaskCorpus {
            task_id: entry.task_id,
            samples,
            split: entry.split,
            positive_rate: entry.positive_rate,
        });
    }

    let manifest = DatasetManifest {
        name: file.name,
        vocab: file.vocab,
        tasks,
        stats: file.stats,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn load_records(path: &Path) -> Result<Vec<EpisodeSample>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample = format::parse_episode_line(line).map_err(|message| DataError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes `manifest.toml` plus one records file per task into `dir`.
pub fn save_dataset(manifest: &DatasetManifest, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut entries = Vec::with_capacity(manifest.tasks.len());
    for task in &manifest.tasks {
        let records = format!("{}.events", task.task_id);
        let records_path = dir.join(&records);
        let mut body = String::new();
        for sample in &task.samples {
            body.push_str(&format::write_episode_line(sample));
            body.push('\n');
        }
        std::fs::write(&records_path, body).map_err(io_err(&records_path))?;
        entries.push(TaskEntry {
            task_id: task.task_id.clone(),
            records,
            positive_rate: task.positive_rate,
            split: task.split.clone(),
        });
    }

    let file = ManifestFile {
        name: manifest.name.clone(),
        vocab: manifest.vocab.clone(),
        stats: manifest.stats,
        tasks: entries,
    };
    let text = toml::to_string_pretty(&file).map_err(|e| DataError::Manifest {
        path: dir.join(MANIFEST_FILE),
        message: e.to_string(),
    })?;
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Splits

/// Deterministic shuffled split with sizes `⌊r₀·n⌋ / max(1, ⌊r₁·n⌋) /
/// remainder`, so the validation part is never empty. Index lists come back
/// sorted; membership is what the seed determines.
pub fn split_task(
    n_samples: usize,
    ratios: (f64, f64, f64),
    seed_value: u64,
) -> Result<SplitIndex, DataError> {
    let (r_train, r_valid, r_test) = ratios;
    if n_samples < 3 {
        return Err(DataError::Split(format!(
            "need at least 3 samples to populate all splits, got {n_samples}"
        )));
    }
    if r_train <= 0.0 || r_valid <= 0.0 || r_test <= 0.0 {
        return Err(DataError::Split("ratios must be positive".to_string()));
    }
    if (r_train + r_valid + r_test - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!(
            "ratios must sum to 1, got {}",
            r_train + r_valid + r_test
        )));
    }

    // The nudge keeps exact products like 0.7 * 10 from flooring down due to
    // binary representation of the ratios.
    let floor_of = |r: f64| ((r * n_samples as f64) + 1e-9).floor() as usize;
    let n_train = floor_of(r_train).max(1);
    let n_valid = floor_of(r_valid).max(1);
    if n_train + n_valid >= n_samples + 1 {
        return Err(DataError::Split(format!(
            "ratios leave no room for a test split at n={n_samples}"
        )));
    }

    let mut indices: Vec<usize> = (0..n_samples).collect();
    let mut rng = seed::rng_from(seed_value);
    indices.shuffle(&mut rng);

    let mut train: Vec<usize> = indices[..n_train].to_vec();
    let mut valid: Vec<usize> = indices[n_train..n_train + n_valid].to_vec();
    let mut test: Vec<usize> = indices[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndex { train, valid, test })
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Per-dimension z-score statistics; `std` is the divisor actually applied
/// (1.0 where the training data had no variance or no observations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Computes per-dimension mean and standard deviation over the numeric
/// values of training-split samples across all tasks. Slots an event does
/// not carry contribute nothing.
pub fn compute_normalization(manifest: &DatasetManifest) -> NormalizationStats {
    let dims = manifest.vocab.numeric_dims;
    let mut count = vec![0u64; dims];
    let mut sum = vec![0.0; dims];
    let mut sum_sq = vec![0.0; dims];
    for task in &manifest.tasks {
        for (_, sample) in task.split_samples(Split::Train) {
            for e in &sample.events {
                for (j, &v) in e.value_n.iter().enumerate() {
                    count[j] += 1;
                    sum[j] += v;
                    sum_sq[j] += v * v;
                }
            }
        }
    }
    let mut mean = vec![0.0; dims];
    let mut std = vec![1.0; dims];
    for j in 0..dims {
        if count[j] == 0 {
            continue;
        }
        let n = count[j] as f64;
        mean[j] = sum[j] / n;
        let var = (sum_sq[j] / n - mean[j] * mean[j]).max(0.0);
        let s = var.sqrt();
        if s > 1e-12 {
            std[j] = s;
        }
    }
    NormalizationStats { mean, std }
}

/// Applies stored z-score statistics to every sample of every task.
pub fn apply_normalization(
    manifest: &DatasetManifest,
    stats: &NormalizationStats,
) -> DatasetManifest {
    let mut out = manifest.clone();
    for task in &mut out.tasks {
        for sample in &mut task.samples {
            for e in &mut sample.events {
                for (j, v) in e.value_n.iter_mut().enumerate() {
                    *v = (*v - stats.mean[j]) / stats.std[j];
                }
            }
        }
    }
    out
}

/// Convenience: compute statistics from the training portions, apply them
/// everywhere.
pub fn normalize_numeric(manifest: &DatasetManifest) -> (DatasetManifest, NormalizationStats) {
    let stats = compute_normalization(manifest);
    let normalized = apply_normalization(manifest, &stats);
    (normalized, stats)
}

/// Truncates every episode to its most recent `cap` events.
pub fn truncate_to_recent(manifest: &DatasetManifest, cap: usize) -> DatasetManifest {
    assert!(cap >= 1, "sequence cap must be at least 1");
    let mut out = manifest.clone();
    for task in &mut out.tasks {
        for sample in &mut task.samples {
            if sample.events.len() > cap {
                sample.events.drain(..sample.events.len() - cap);
            }
        }
    }
    out
}

/// Preprocessing applied between loading a dataset and training on it.
/// Stored in checkpoints so that evaluation reproduces the same view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepOptions {
    /// Keep at most this many (most recent) events per episode; 0 disables.
    pub max_seq_len: usize,
    /// Z-score numeric attributes using training-split statistics.
    pub normalize: bool,
}

impl Default for PrepOptions {
    fn default() -> Self {
        PrepOptions {
            max_seq_len: 64,
            normalize: true,
        }
    }
}

/// Applies [`PrepOptions`], returning the prepared manifest and the
/// normalization statistics when normalization ran.
pub fn prepare(
    manifest: &DatasetManifest,
    opts: &PrepOptions,
) -> (DatasetManifest, Option<NormalizationStats>) {
    let capped = if opts.max_seq_len > 0 {
        truncate_to_recent(manifest, opts.max_seq_len)
    } else {
        manifest.clone()
    };
    if opts.normalize {
        let (normalized, stats) = normalize_numeric(&capped);
        (normalized, Some(stats))
    } else {
        (capped, None)
    }
}
