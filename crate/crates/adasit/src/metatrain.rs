//! The training loops: initialization-shared meta-training with adaptation
//! to similar tasks, the pooled global baseline, evaluation, and
//! checkpointing.
//!
//! One meta-training epoch:
//!
//! 1. Measure neighborhoods with the configured strategy (identity while no
//!    adapted parameters exist yet).
//! 2. For each task in a batch: pool training samples from its neighborhood,
//!    draw simulation subsets `D_tr`/`D_val`, take one gradient step from
//!    the shared initialization on `D_tr`, then evaluate the gradient of the
//!    `D_val` loss at the stepped parameters. That gradient is the
//!    first-order meta-gradient: the term that would multiply it by the
//!    Hessian of the inner loss is dropped. Aggregated meta-gradients update
//!    the shared initialization.
//! 3. Re-adapt every task from the updated initialization on its own
//!    training split alone. These per-task parameters are scored against
//!    validation data and measured for similarity next epoch; pooling before
//!    this step would blur exactly the per-task gradient directions the
//!    similarity measure needs.
//!
//! Early stopping tracks pooled validation micro-AUC; the best shared
//! initialization is restored at the end and per-task parameters are
//! re-adapted from it.
//!
//! Test isolation: training reads only training splits (pooling is built
//! from training splits by construction) and validation splits (for early
//! stopping). Test splits are first touched by [`evaluate`] with
//! [`Split::Test`].
//!
//! Per-epoch randomness is derived from `(seed, epoch)`, so a run resumed
//! from a checkpoint is bit-identical to one that never stopped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    DatasetManifest, EpisodeSample, NormalizationStats, PrepOptions, Split,
};
use crate::metrics::{self, MetricsError, MetricsReport, TaskPredictions};
use crate::model::{self, ModelConfig, ModelError, ParamVector};
use crate::seed;
use crate::similarity::{self, NeighborhoodAssignment, SimilarityConfig, SimilarityError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("empty sample pool for task {0}")]
    EmptyPool(String),
    #[error("sample pool for task {task_id} has {size} sample(s); need at least 2")]
    PoolTooSmall { task_id: String, size: usize },
    #[error("non-finite meta-gradient at epoch {epoch} (task batch aborted)")]
    NonFiniteMetaGradient { epoch: usize },
    #[error("no parameters for task {0}")]
    MissingTaskParams(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that exposes a loss and its gradient over a flat parameter
/// vector. The backbone implements it; tests substitute closed-form losses
/// to pin the update algebra.
pub trait LossModel {
    fn loss(&self, params: &ParamVector, batch: &[&EpisodeSample]) -> Result<f64, ModelError>;
    fn loss_grad(
        &self,
        params: &ParamVector,
        batch: &[&EpisodeSample],
    ) -> Result<ParamVector, ModelError>;
}

/// The event-sequence backbone as a [`LossModel`].
pub struct Backbone;

impl LossModel for Backbone {
    fn loss(&self, params: &ParamVector, batch: &[&EpisodeSample]) -> Result<f64, ModelError> {
        model::loss(params, batch)
    }

    fn loss_grad(
        &self,
        params: &ParamVector,
        batch: &[&EpisodeSample],
    ) -> Result<ParamVector, ModelError> {
        model::loss_grad(params, batch)
    }
}

/// Which trainer a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Initialization-shared meta-training with similarity neighborhoods.
    Meta,
    /// One global model trained on the union of all training splits.
    Pooled,
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Inner (adaptation) learning rate.
    pub alpha: f64,
    /// Meta (outer) learning rate; also the pooled baseline's rate.
    pub beta: f64,
    /// Gradient steps for end-of-epoch per-task adaptation.
    pub inner_steps: usize,
    /// Samples drawn for the simulated adaptation step.
    pub dtr_size: usize,
    /// Samples drawn for the meta-gradient evaluation.
    pub dval_size: usize,
    /// Tasks per meta-update; `None` aggregates over all tasks at once.
    pub task_batch: Option<usize>,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub similarity: SimilarityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.0005,
            beta: 0.001,
            inner_steps: 1,
            dtr_size: 16,
            dval_size: 16,
            task_batch: None,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            similarity: SimilarityConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning rates alpha and beta must be positive".into(),
            ));
        }
        if self.dtr_size == 0 || self.dval_size == 0 {
            return Err(TrainError::InvalidConfig(
                "dtr_size and dval_size must be at least 1".into(),
            ));
        }
        if self.early_stop_patience == 0 {
            return Err(TrainError::InvalidConfig(
                "early_stop_patience must be at least 1".into(),
            ));
        }
        if self.task_batch == Some(0) {
            return Err(TrainError::InvalidConfig(
                "task_batch must be at least 1 when set".into(),
            ));
        }
        self.similarity.validate()?;
        Ok(())
    }
}

/// Reference to one sample by task and sample index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub task: usize,
    pub sample: usize,
}

/// Training-split samples pooled from a task's neighborhood. Built from
/// training splits only, so downstream draws cannot touch validation or
/// test data.
#[derive(Clone, Debug)]
pub struct ExtendedSampleSet {
    pub anchor: String,
    pub members: Vec<SampleRef>,
}

/// Pools the training splits of every neighbor of `task_index` (always
/// including the task itself).
pub fn extended_sample_set(
    manifest: &DatasetManifest,
    task_index: usize,
    assignment: &NeighborhoodAssignment,
) -> ExtendedSampleSet {
    let anchor = &manifest.tasks[task_index];
    let mut members = Vec::new();
    let neighbor_ids = assignment.neighbors_of(&anchor.task_id);
    for (t, task) in manifest.tasks.iter().enumerate() {
        let included = t == task_index
            || neighbor_ids.is_some_and(|set| set.contains(&task.task_id));
        if included {
            for &s in &task.split.train {
                members.push(SampleRef { task: t, sample: s });
            }
        }
    }
    ExtendedSampleSet {
        anchor: anchor.task_id.clone(),
        members,
    }
}

fn resolve<'a>(manifest: &'a DatasetManifest, refs: &[SampleRef]) -> Vec<&'a EpisodeSample> {
    refs.iter()
        .map(|r| &manifest.tasks[r.task].samples[r.sample])
        .collect()
}

/// Draws the two simulation subsets from a pooled sample set, disjoint and
/// without replacement. When the pool cannot fill both requests, the
/// adaptation subset is filled first but always leaves at least one sample
/// for the evaluation subset.
pub fn sample_tr_val(
    ext: &ExtendedSampleSet,
    dtr_size: usize,
    dval_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SampleRef>, Vec<SampleRef>), TrainError> {
    let n = ext.members.len();
    if n == 0 {
        return Err(TrainError::EmptyPool(ext.anchor.clone()));
    }
    if n < 2 {
        return Err(TrainError::PoolTooSmall {
            task_id: ext.anchor.clone(),
            size: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let take_tr = dtr_size.min(n - 1);
    let take_val = dval_size.min(n - take_tr);
    let d_tr = order[..take_tr].iter().map(|&i| ext.members[i]).collect();
    let d_val = order[take_tr..take_tr + take_val]
        .iter()
        .map(|&i| ext.members[i])
        .collect();
    Ok((d_tr, d_val))
}

/// Plain gradient descent from `theta` on the given batch: `steps` updates
/// of `θ ← θ − α ∇L`. One step is the simulated-adaptation case.
pub fn inner_adapt<O: LossModel>(
    theta: &ParamVector,
    d_tr: &[&EpisodeSample],
    objective: &O,
    alpha: f64,
    steps: usize,
) -> Result<ParamVector, TrainError> {
    let mut adapted = theta.clone();
    for _ in 0..steps {
        let grad = objective.loss_grad(&adapted, d_tr)?;
        adapted.axpy(-alpha, &grad);
    }
    Ok(adapted)
}

/// Per-epoch summary stored in training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub meta_loss: f64,
    pub val_auc: f64,
    pub mean_neighborhood_size: f64,
}

/// Shared initialization, per-task parameters, and training history.
///
/// `task_params` are the predictive models (adapted on neighborhood draws);
/// `similarity_params` are the own-split-adapted vectors the next epoch's
/// similarity measurement compares. Under identity neighborhoods the two
/// coincide up to the sample draw.
///
/// After training, `theta` holds the early-stopping winner (`best_theta`)
/// while `live_theta` keeps the parameters as they stood when the loop
/// halted, so a resumed run continues the exact trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub theta: ParamVector,
    pub live_theta: ParamVector,
    pub task_params: BTreeMap<String, ParamVector>,
    pub similarity_params: BTreeMap<String, ParamVector>,
    pub epoch: usize,
    pub best_theta: ParamVector,
    pub best_val_auc: Option<f64>,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

impl MetaState {
    pub fn fresh(theta: ParamVector) -> Self {
        MetaState {
            best_theta: theta.clone(),
            live_theta: theta.clone(),
            theta,
            task_params: BTreeMap::new(),
            similarity_params: BTreeMap::new(),
            epoch: 0,
            best_val_auc: None,
            epochs_since_improvement: 0,
            history: Vec::new(),
        }
    }
}

/// One meta-update over a batch of tasks. For each task: pool the
/// neighborhood, draw `D_tr`/`D_val`, adapt one step on `D_tr`, and take the
/// `D_val` gradient at the adapted parameters as that task's meta-gradient.
/// The aggregated meta-gradient steps the shared initialization; the summed
/// `D_val` losses are returned for history.
pub fn meta_step<O: LossModel>(
    state: &mut MetaState,
    manifest: &DatasetManifest,
    batch_tasks: &[usize],
    assignment: &NeighborhoodAssignment,
    config: &TrainConfig,
    objective: &O,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut aggregate = ParamVector::zeros(state.theta.layout().clone());
    let mut meta_loss = 0.0;
    for &task_index in batch_tasks {
        let ext = extended_sample_set(manifest, task_index, assignment);
        let (d_tr, d_val) = sample_tr_val(&ext, config.dtr_size, config.dval_size, rng)?;
        let tr_batch = resolve(manifest, &d_tr);
        let val_batch = resolve(manifest, &d_val);

        let adapted = inner_adapt(&state.theta, &tr_batch, objective, config.alpha, 1)?;
        let meta_grad = objective.loss_grad(&adapted, &val_batch)?;
        meta_loss += objective.loss(&adapted, &val_batch)?;
        aggregate.axpy(1.0, &meta_grad);
    }
    if aggregate.first_nonfinite_block().is_some() || !meta_loss.is_finite() {
        return Err(TrainError::NonFiniteMetaGradient { epoch: state.epoch });
    }
    state.theta.axpy(-config.beta, &aggregate);
    Ok(meta_loss)
}

/// Adapts every task from `theta` on its own training split alone, so the
/// resulting parameters encode task-specific gradient directions. These are
/// the vectors the similarity measurement compares; pooling neighbors first
/// would blur exactly the signal being measured.
pub fn adapt_all_tasks<O: LossModel>(
    theta: &ParamVector,
    manifest: &DatasetManifest,
    objective: &O,
    alpha: f64,
    steps: usize,
) -> Result<BTreeMap<String, ParamVector>, TrainError> {
    let mut out = BTreeMap::new();
    for task in &manifest.tasks {
        let batch: Vec<&EpisodeSample> =
            task.split_samples(Split::Train).map(|(_, s)| s).collect();
        let adapted = if batch.is_empty() {
            warn!(
                "task {} has an empty training split; keeping shared parameters",
                task.task_id
            );
            theta.clone()
        } else {
            inner_adapt(theta, &batch, objective, alpha, steps)?
        };
        out.insert(task.task_id.clone(), adapted);
    }
    Ok(out)
}

/// Adapts every task's predictive model from `theta` on draws from its
/// neighborhood pool: each step takes a fresh `dtr_size` draw, matching the
/// simulated adaptation the meta-objective optimizes. With identity
/// neighborhoods the pool is the task's own training split, recovering the
/// no-similarity baseline exactly.
pub fn adapt_tasks_on_neighborhoods<O: LossModel>(
    theta: &ParamVector,
    manifest: &DatasetManifest,
    assignment: &NeighborhoodAssignment,
    objective: &O,
    config: &TrainConfig,
    epoch: usize,
) -> Result<BTreeMap<String, ParamVector>, TrainError> {
    let mut out = BTreeMap::new();
    for (task_index, task) in manifest.tasks.iter().enumerate() {
        let ext = extended_sample_set(manifest, task_index, assignment);
        if ext.members.is_empty() {
            warn!(
                "task {} has an empty neighborhood pool; keeping shared parameters",
                task.task_id
            );
            out.insert(task.task_id.clone(), theta.clone());
            continue;
        }
        let mut rng = seed::rng_from(seed::derive_seed(
            config.seed,
            &["adapt", &epoch.to_string(), &task.task_id],
        ));
        let mut adapted = theta.clone();
        for _ in 0..config.inner_steps.max(1) {
            let mut order: Vec<usize> = (0..ext.members.len()).collect();
            order.shuffle(&mut rng);
            let take = config.dtr_size.min(ext.members.len());
            let refs: Vec<SampleRef> = order[..take].iter().map(|&i| ext.members[i]).collect();
            let batch = resolve(manifest, &refs);
            adapted = inner_adapt(&adapted, &batch, objective, config.alpha, 1)?;
        }
        out.insert(task.task_id.clone(), adapted);
    }
    Ok(out)
}

/// Parameter source for evaluation: one vector per task, or one shared
/// vector for the pooled baseline.
#[derive(Clone, Copy)]
pub enum TaskParams<'a> {
    PerTask(&'a BTreeMap<String, ParamVector>),
    Shared(&'a ParamVector),
}

/// Scores every sample of the chosen split of every task with that task's
/// model and builds the pooled/per-task metrics report.
pub fn evaluate(
    params: TaskParams,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<MetricsReport, TrainError> {
    let mut per_task = BTreeMap::new();
    for task in &manifest.tasks {
        let theta_i = match params {
            TaskParams::PerTask(map) => map
                .get(&task.task_id)
                .ok_or_else(|| TrainError::MissingTaskParams(task.task_id.clone()))?,
            TaskParams::Shared(theta) => theta,
        };
        let mut preds = TaskPredictions::default();
        for (_, sample) in task.split_samples(split) {
            preds.scores.push(model::forward(theta_i, sample)?);
            preds.labels.push(sample.label);
        }
        per_task.insert(task.task_id.clone(), preds);
    }
    Ok(metrics::build_report(&per_task)?)
}

/// Pooled validation micro-AUC for early stopping. A single-class pooled
/// validation set gives no ranking signal; it scores as 0.5 with a warning
/// rather than aborting the run.
fn validation_auc(
    task_params: &BTreeMap<String, ParamVector>,
    manifest: &DatasetManifest,
) -> Result<f64, TrainError> {
    match evaluate(TaskParams::PerTask(task_params), manifest, Split::Valid) {
        Ok(report) => Ok(report.micro_auc),
        Err(TrainError::Metrics(MetricsError::SingleClass(_)))
        | Err(TrainError::Metrics(MetricsError::NoPositives)) => {
            warn!("pooled validation split is single-class; scoring it as 0.5");
            Ok(0.5)
        }
        Err(e) => Err(e),
    }
}

fn epoch_rng(config: &TrainConfig, epoch: usize) -> ChaCha8Rng {
    seed::rng_from(seed::derive_seed(config.seed, &["epoch", &epoch.to_string()]))
}

/// Runs meta-training from a fresh initialization.
pub fn train(
    manifest: &DatasetManifest,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<MetaState, TrainError> {
    config.validate()?;
    model_config.validate()?;
    let theta = model::init_params(model_config, seed::derive_seed(config.seed, &["init"]))?;
    train_from_state(manifest, config, MetaState::fresh(theta))
}

/// Continues meta-training from an existing state until `max_epochs` or
/// early stop. Because per-epoch randomness depends only on `(seed, epoch)`,
/// resuming reproduces the uninterrupted run exactly.
pub fn train_from_state(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    mut state: MetaState,
) -> Result<MetaState, TrainError> {
    config.validate()?;
    let objective = Backbone;
    let rates = manifest.task_rates();

    // Rewind the end-of-training restoration: continue from the live
    // parameters, and rebuild the similarity vectors as they stood there
    // (own-split adaptation is deterministic, so this reproduces them
    // exactly).
    state.theta = state.live_theta.clone();
    if state.epoch > 0 {
        state.similarity_params =
            adapt_all_tasks(&state.theta, manifest, &objective, config.alpha, config.inner_steps)?;
    }

    while state.epoch < config.max_epochs
        && state.epochs_since_improvement < config.early_stop_patience
    {
        let epoch = state.epoch;
        let mut rng = epoch_rng(config, epoch);

        let similarity_params = if state.similarity_params.is_empty() {
            None
        } else {
            Some(&state.similarity_params)
        };
        let assignment =
            similarity::assign(&config.similarity, &rates, similarity_params, &state.theta, epoch)?;

        let mut order: Vec<usize> = (0..manifest.tasks.len()).collect();
        order.shuffle(&mut rng);
        let batch_size = config.task_batch.unwrap_or(order.len()).min(order.len()).max(1);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            epoch_loss +=
                meta_step(&mut state, manifest, chunk, &assignment, config, &objective, &mut rng)?;
        }

        state.similarity_params =
            adapt_all_tasks(&state.theta, manifest, &objective, config.alpha, config.inner_steps)?;
        state.task_params = adapt_tasks_on_neighborhoods(
            &state.theta,
            manifest,
            &assignment,
            &objective,
            config,
            epoch,
        )?;
        let val_auc = validation_auc(&state.task_params, manifest)?;
        state.history.push(EpochRecord {
            epoch,
            meta_loss: epoch_loss,
            val_auc,
            mean_neighborhood_size: assignment.mean_size(),
        });
        state.epoch += 1;

        if state.best_val_auc.is_none_or(|best| val_auc > best) {
            state.best_val_auc = Some(val_auc);
            state.best_theta = state.theta.clone();
            state.epochs_since_improvement = 0;
        } else {
            state.epochs_since_improvement += 1;
        }
    }

    state.live_theta = state.theta.clone();
    if state.epoch > 0 {
        // Restore the best initialization, re-measure neighborhoods from it,
        // and rebuild both parameter maps.
        state.theta = state.best_theta.clone();
        state.similarity_params =
            adapt_all_tasks(&state.theta, manifest, &Backbone, config.alpha, config.inner_steps)?;
        let assignment = similarity::assign(
            &config.similarity,
            &rates,
            Some(&state.similarity_params),
            &state.theta,
            state.epoch,
        )?;
        state.task_params = adapt_tasks_on_neighborhoods(
            &state.theta,
            manifest,
            &assignment,
            &Backbone,
            config,
            state.epoch,
        )?;
    }
    Ok(state)
}

/// Trains one global model on the union of all training splits with
/// mini-batch gradient descent (batch size `dtr_size`, learning rate
/// `beta`), early-stopped on pooled validation micro-AUC. The returned
/// state has the global vector in `theta` and no per-task parameters.
pub fn train_pooled(
    manifest: &DatasetManifest,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<MetaState, TrainError> {
    config.validate()?;
    model_config.validate()?;
    let theta = model::init_params(model_config, seed::derive_seed(config.seed, &["init"]))?;
    train_pooled_from_state(manifest, config, MetaState::fresh(theta))
}

/// Continues pooled training from an existing state.
pub fn train_pooled_from_state(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    mut state: MetaState,
) -> Result<MetaState, TrainError> {
    config.validate()?;
    let objective = Backbone;
    state.theta = state.live_theta.clone();
    let all_train: Vec<SampleRef> = manifest
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(t, task)| {
            task.split
                .train
                .iter()
                .map(move |&s| SampleRef { task: t, sample: s })
        })
        .collect();
    if all_train.is_empty() {
        return Err(TrainError::EmptyPool("<pooled>".to_string()));
    }

    while state.epoch < config.max_epochs
        && state.epochs_since_improvement < config.early_stop_patience
    {
        let epoch = state.epoch;
        let mut rng = epoch_rng(config, epoch);

        let mut order = all_train.clone();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.dtr_size) {
            let batch = resolve(manifest, chunk);
            epoch_loss += objective.loss(&state.theta, &batch)?;
            let grad = objective.loss_grad(&state.theta, &batch)?;
            state.theta.axpy(-config.beta, &grad);
        }
        if !epoch_loss.is_finite() {
            return Err(TrainError::NonFiniteMetaGradient { epoch });
        }

        let val_auc = match evaluate(TaskParams::Shared(&state.theta), manifest, Split::Valid) {
            Ok(report) => report.micro_auc,
            Err(TrainError::Metrics(MetricsError::SingleClass(_)))
            | Err(TrainError::Metrics(MetricsError::NoPositives)) => 0.5,
            Err(e) => return Err(e),
        };
        state.history.push(EpochRecord {
            epoch,
            meta_loss: epoch_loss,
            val_auc,
            mean_neighborhood_size: 0.0,
        });
        state.epoch += 1;

        if state.best_val_auc.is_none_or(|best| val_auc > best) {
            state.best_val_auc = Some(val_auc);
            state.best_theta = state.theta.clone();
            state.epochs_since_improvement = 0;
        } else {
            state.epochs_since_improvement += 1;
        }
    }

    state.live_theta = state.theta.clone();
    if state.epoch > 0 {
        state.theta = state.best_theta.clone();
    }
    Ok(state)
}

/// Everything needed to reproduce, resume, and evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub mode: TrainMode,
    pub dataset_name: String,
    pub model_config: ModelConfig,
    pub model_fingerprint: u64,
    pub train_config: TrainConfig,
    pub prep: PrepOptions,
    /// Normalization statistics computed from the training data, applied
    /// verbatim when evaluating on other datasets.
    pub norm_stats: Option<NormalizationStats>,
    pub task_rates: BTreeMap<String, f64>,
    pub state: MetaState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads and verifies the stored config hash against the stored config
    /// and the parameter layout.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let checkpoint: Checkpoint =
            serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if checkpoint.format_version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                checkpoint.format_version
            )));
        }
        if checkpoint.model_fingerprint != checkpoint.model_config.fingerprint() {
            return Err(TrainError::Checkpoint(
                "model config hash does not match the stored config".to_string(),
            ));
        }
        if checkpoint.state.theta.layout().fingerprint != checkpoint.model_fingerprint {
            return Err(TrainError::Checkpoint(
                "parameter layout does not match the stored model config".to_string(),
            ));
        }
        for (task_id, params) in &checkpoint.state.task_params {
            if !params.same_layout(&checkpoint.state.theta) {
                return Err(TrainError::Checkpoint(format!(
                    "task {task_id} parameters have a different layout than theta"
                )));
            }
        }
        Ok(checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_task, DatasetManifest, EventRecord, TaskCorpus, Vocabulary};
    use crate::model::Layout;
    use approx::assert_abs_diff_eq;

    /// Closed-form objective `scale * ||θ||²`; ignores the batch.
    struct QuadraticLoss {
        scale: f64,
    }

    impl LossModel for QuadraticLoss {
        fn loss(&self, params: &ParamVector, _: &[&EpisodeSample]) -> Result<f64, ModelError> {
            Ok(self.scale * params.dot(params))
        }

        fn loss_grad(
            &self,
            params: &ParamVector,
            _: &[&EpisodeSample],
        ) -> Result<ParamVector, ModelError> {
            let mut grad = params.clone();
            grad.scale(2.0 * self.scale);
            Ok(grad)
        }
    }

    fn flat(values: &[f64]) -> ParamVector {
        ParamVector::from_values(Layout::flat(values.len()), values.to_vec()).unwrap()
    }

    /// Manifest with `n_tasks` tasks of `n` constant single-event samples;
    /// labels alternate so splits stay two-class-ish.
    fn dummy_manifest(n_tasks: usize, n: usize) -> DatasetManifest {
        let vocab = Vocabulary {
            event_types: vec!["e".to_string()],
            categorical_values: vec![],
            numeric_dims: 0,
        };
        let tasks = (0..n_tasks)
            .map(|t| {
                let task_id = format!("task-{t:02}");
                let samples: Vec<EpisodeSample> = (0..n)
                    .map(|k| EpisodeSample {
                        events: vec![EventRecord {
                            event_type: 0,
                            value_c: vec![],
                            value_n: vec![],
                            time: 0.0,
                        }],
                        label: k % 3 == 0,
                    })
                    .collect();
                let positive_rate =
                    samples.iter().filter(|s| s.label).count() as f64 / n as f64;
                TaskCorpus {
                    split: split_task(n, (0.7, 0.1, 0.2), seed::task_seed(5, &task_id)).unwrap(),
                    task_id,
                    samples,
                    positive_rate,
                }
            })
            .collect();
        DatasetManifest::from_tasks("dummy".to_string(), vocab, tasks).unwrap()
    }

    fn identity_assignment(manifest: &DatasetManifest) -> NeighborhoodAssignment {
        let ids: Vec<String> = manifest.tasks.iter().map(|t| t.task_id.clone()).collect();
        similarity::neighborhood_identity(&ids, 0)
    }

    #[test]
    fn sample_tr_val_sizes() {
        let manifest = dummy_manifest(1, 13);
        let assignment = identity_assignment(&manifest);
        let ext = extended_sample_set(&manifest, 0, &assignment);
        assert_eq!(ext.members.len(), 9); // floor(0.7 * 13)

        let mut rng = seed::rng_from(1);
        let (d_tr, d_val) = sample_tr_val(&ext, 4, 4, &mut rng).unwrap();
        assert_eq!((d_tr.len(), d_val.len()), (4, 4));
        for r in &d_tr {
            assert!(!d_val.contains(r));
        }

        // Degenerate pool of 3 with requests (4, 4): adaptation subset is
        // filled first but leaves one sample for evaluation.
        let small = ExtendedSampleSet {
            anchor: "t".to_string(),
            members: ext.members[..3].to_vec(),
        };
        let (d_tr, d_val) = sample_tr_val(&small, 4, 4, &mut rng).unwrap();
        assert_eq!((d_tr.len(), d_val.len()), (2, 1));

        // Determinism under an equal rng stream.
        let a = sample_tr_val(&ext, 4, 4, &mut seed::rng_from(9)).unwrap();
        let b = sample_tr_val(&ext, 4, 4, &mut seed::rng_from(9)).unwrap();
        assert_eq!(a, b);

        let empty = ExtendedSampleSet {
            anchor: "t".to_string(),
            members: vec![],
        };
        assert!(matches!(
            sample_tr_val(&empty, 1, 1, &mut rng),
            Err(TrainError::EmptyPool(_))
        ));
    }

    #[test]
    fn extended_set_pools_neighbor_training_splits_only() {
        let manifest = dummy_manifest(3, 10);
        let ids: Vec<String> = manifest.tasks.iter().map(|t| t.task_id.clone()).collect();
        let mut assignment = similarity::neighborhood_identity(&ids, 0);
        assignment
            .neighbors
            .get_mut(&ids[0])
            .unwrap()
            .insert(ids[2].clone());

        let ext = extended_sample_set(&manifest, 0, &assignment);
        // Two tasks' training splits: 7 + 7 samples.
        assert_eq!(ext.members.len(), 14);
        for r in &ext.members {
            assert!(r.task == 0 || r.task == 2);
            assert!(
                manifest.tasks[r.task].split.train.contains(&r.sample),
                "pooled sample outside the training split"
            );
        }
    }

    #[test]
    fn inner_adapt_closed_forms_on_quadratic() {
        let objective = QuadraticLoss { scale: 1.0 };
        let theta = flat(&[1.0, 1.0]);
        let manifest = dummy_manifest(1, 10);
        let batch: Vec<&EpisodeSample> = manifest.tasks[0].samples.iter().take(2).collect();

        let one = inner_adapt(&theta, &batch, &objective, 0.1, 1).unwrap();
        assert_abs_diff_eq!(one.values()[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(one.values()[1], 0.8, epsilon = 1e-15);

        let two = inner_adapt(&theta, &batch, &objective, 0.1, 2).unwrap();
        assert_abs_diff_eq!(two.values()[0], 0.64, epsilon = 1e-15);

        let noop = inner_adapt(&theta, &batch, &objective, 0.0, 1).unwrap();
        assert_eq!(noop, theta);
    }

    #[test]
    fn meta_step_matches_hand_derivation_on_quadratic() {
        // θ = (1, 0), α = β = 0.1: adapt to 0.8θ, meta-gradient 2·(0.8, 0)
        // = (1.6, 0), update to (1 - 0.16, 0) = (0.84, 0).
        let manifest = dummy_manifest(1, 10);
        let assignment = identity_assignment(&manifest);
        let objective = QuadraticLoss { scale: 1.0 };
        let config = TrainConfig {
            alpha: 0.1,
            beta: 0.1,
            dtr_size: 4,
            dval_size: 4,
            ..TrainConfig::default()
        };
        let mut state = MetaState::fresh(flat(&[1.0, 0.0]));
        let mut rng = seed::rng_from(3);
        let meta_loss =
            meta_step(&mut state, &manifest, &[0], &assignment, &config, &objective, &mut rng)
                .unwrap();
        assert_abs_diff_eq!(state.theta.values()[0], 0.84, epsilon = 1e-10);
        assert_abs_diff_eq!(state.theta.values()[1], 0.0, epsilon = 1e-15);
        // Meta-loss is the validation loss at the adapted point: 0.64.
        assert_abs_diff_eq!(meta_loss, 0.64, epsilon = 1e-10);
    }

    #[test]
    fn meta_step_with_zero_beta_keeps_theta() {
        let manifest = dummy_manifest(2, 10);
        let assignment = identity_assignment(&manifest);
        let objective = QuadraticLoss { scale: 1.0 };
        let config = TrainConfig {
            alpha: 0.1,
            beta: 0.0,
            dtr_size: 4,
            dval_size: 4,
            ..TrainConfig::default()
        };
        let mut state = MetaState::fresh(flat(&[1.0, 2.0]));
        let before = state.theta.clone();
        let mut rng = seed::rng_from(4);
        let meta_loss =
            meta_step(&mut state, &manifest, &[0, 1], &assignment, &config, &objective, &mut rng)
                .unwrap();
        assert_eq!(state.theta, before);
        assert!(meta_loss.is_finite() && meta_loss > 0.0);
    }

    #[test]
    fn meta_step_aggregates_identical_tasks_additively() {
        // Two tasks with identical constant data: the aggregate update must
        // be exactly twice the single-task update.
        let manifest = dummy_manifest(2, 10);
        let assignment = identity_assignment(&manifest);
        let objective = QuadraticLoss { scale: 1.0 };
        let config = TrainConfig {
            alpha: 0.1,
            beta: 0.1,
            dtr_size: 4,
            dval_size: 4,
            ..TrainConfig::default()
        };

        let mut both = MetaState::fresh(flat(&[1.0, 0.5]));
        let mut rng = seed::rng_from(6);
        meta_step(&mut both, &manifest, &[0, 1], &assignment, &config, &objective, &mut rng)
            .unwrap();

        let mut single = MetaState::fresh(flat(&[1.0, 0.5]));
        let mut rng = seed::rng_from(6);
        meta_step(&mut single, &manifest, &[0], &assignment, &config, &objective, &mut rng)
            .unwrap();

        let start = flat(&[1.0, 0.5]);
        let delta_both = both.theta.sub(&start);
        let delta_single = single.theta.sub(&start);
        for (b, s) in delta_both.values().iter().zip(delta_single.values()) {
            assert_abs_diff_eq!(*b, 2.0 * s, epsilon = 1e-12);
        }
    }

    #[test]
    fn meta_loss_decreases_on_quadratic_family() {
        // Repeated meta-steps at small rates walk the quadratic meta-loss
        // down monotonically.
        let manifest = dummy_manifest(3, 10);
        let assignment = identity_assignment(&manifest);
        let objective = QuadraticLoss { scale: 1.0 };
        let config = TrainConfig {
            alpha: 0.01,
            beta: 0.01,
            dtr_size: 4,
            dval_size: 4,
            ..TrainConfig::default()
        };
        let mut state = MetaState::fresh(flat(&[1.0, -2.0, 0.5]));
        let mut rng = seed::rng_from(8);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let loss = meta_step(
                &mut state,
                &manifest,
                &[0, 1, 2],
                &assignment,
                &config,
                &objective,
                &mut rng,
            )
            .unwrap();
            assert!(loss < last, "meta-loss rose: {loss} after {last}");
            last = loss;
        }
    }

    #[test]
    fn adapt_all_tasks_produces_collinear_deltas_on_scaled_quadratics() {
        // Per-task scaling of the same quadratic gives gradients that are
        // scalar multiples: every pairwise cosine is exactly 1.
        let manifest = dummy_manifest(2, 10);
        let theta = flat(&[1.0, 1.0]);
        let a = adapt_all_tasks(&theta, &manifest, &QuadraticLoss { scale: 1.0 }, 0.1, 1).unwrap();
        let b = adapt_all_tasks(&theta, &manifest, &QuadraticLoss { scale: 3.0 }, 0.1, 1).unwrap();
        let cos = crate::similarity::cos_delta(
            &a["task-00"],
            &b["task-01"],
            &theta,
        )
        .unwrap();
        assert_abs_diff_eq!(cos, 1.0, epsilon = 1e-12);

        // steps = 0 leaves every task at theta.
        let frozen = adapt_all_tasks(&theta, &manifest, &QuadraticLoss { scale: 1.0 }, 0.1, 0)
            .unwrap();
        assert!(frozen.values().all(|p| *p == theta));

        // Identical training data gives identical adapted parameters.
        assert_eq!(a["task-00"], a["task-01"]);
    }
}
