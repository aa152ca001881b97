//! Command implementations: each writes its artifacts under a run directory
//! and prints a short summary. Outputs contain no timestamps or other
//! ambient state, so reruns with identical inputs are byte-identical.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use adasit::data::{self, DatasetManifest, Split};
use adasit::metatrain::{self, Checkpoint, TaskParams, TrainMode, CHECKPOINT_VERSION};
use adasit::metrics::MetricsReport;
use adasit::similarity::{self, SimilarityConfig};

use crate::config::ExperimentConfig;

pub struct PreparedDataset {
    pub manifest: DatasetManifest,
    pub norm_stats: Option<data::NormalizationStats>,
}

pub fn prepare_dataset(config: &ExperimentConfig, config_dir: &Path) -> Result<PreparedDataset> {
    let raw = config.dataset.load_raw(config_dir)?;
    let (manifest, norm_stats) = data::prepare(&raw, &config.dataset.prep_options());
    Ok(PreparedDataset {
        manifest,
        norm_stats,
    })
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json_pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Artifacts of one completed training run.
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub epochs: usize,
}

/// Trains one seed and writes `config.toml`, `checkpoint.json`, `train.log`
/// and the test-split `report.json` into `dir`.
pub fn run_one_training(
    config: &ExperimentConfig,
    dataset: &PreparedDataset,
    seed: u64,
    dir: &Path,
) -> Result<RunOutcome> {
    let manifest = &dataset.manifest;
    let model_config = config.model.model_config(manifest);
    let train_config = config.train.train_config(seed);

    let state = match config.train.mode {
        TrainMode::Meta => metatrain::train(manifest, &model_config, &train_config)?,
        TrainMode::Pooled => metatrain::train_pooled(manifest, &model_config, &train_config)?,
    };

    let report = match config.train.mode {
        TrainMode::Meta => {
            metatrain::evaluate(TaskParams::PerTask(&state.task_params), manifest, Split::Test)?
        }
        TrainMode::Pooled => {
            metatrain::evaluate(TaskParams::Shared(&state.theta), manifest, Split::Test)?
        }
    };

    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("config.toml"), &config.snapshot_for_seed(seed).to_toml()?)?;

    let mut log = String::new();
    for record in &state.history {
        log.push_str(&serde_json::to_string(record)?);
        log.push('\n');
    }
    write_atomic(&dir.join("train.log"), &log)?;

    let epochs = state.epoch;
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        mode: config.train.mode,
        dataset_name: manifest.name.clone(),
        model_config,
        model_fingerprint: model_config.fingerprint(),
        train_config,
        prep: config.dataset.prep_options(),
        norm_stats: dataset.norm_stats.clone(),
        task_rates: manifest.task_rates().into_iter().collect(),
        state,
    };
    checkpoint.save(dir.join("checkpoint.json"))?;
    write_atomic(&dir.join("report.json"), &to_json_pretty(&report)?)?;

    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        report,
        epochs,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

#[derive(serde::Serialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub micro_auc: Vec<f64>,
    pub micro_ap: Vec<f64>,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub ap_mean: f64,
    pub ap_std: f64,
}

impl SeedSummary {
    pub fn from_runs(seeds: &[u64], reports: &[MetricsReport]) -> Self {
        let micro_auc: Vec<f64> = reports.iter().map(|r| r.micro_auc).collect();
        let micro_ap: Vec<f64> = reports.iter().map(|r| r.micro_ap).collect();
        let (auc_mean, auc_std) = mean_std(&micro_auc);
        let (ap_mean, ap_std) = mean_std(&micro_ap);
        SeedSummary {
            seeds: seeds.to_vec(),
            micro_auc,
            micro_ap,
            auc_mean,
            auc_std,
            ap_mean,
            ap_std,
        }
    }
}

pub fn cmd_train(config: &ExperimentConfig, config_dir: &Path, out: Option<&Path>) -> Result<()> {
    let dataset = prepare_dataset(config, config_dir)?;
    let out_dir = config.resolve_output(out);

    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let dir = out_dir.join(format!("seed-{seed}"));
        let outcome = run_one_training(config, &dataset, seed, &dir)?;
        println!(
            "seed {seed}: test micro AUC {:.4}, micro AP {:.4} ({} epochs) -> {}",
            outcome.report.micro_auc,
            outcome.report.micro_ap,
            outcome.epochs,
            outcome.dir.display()
        );
        reports.push(outcome.report);
    }

    if config.seeds.len() > 1 {
        let summary = SeedSummary::from_runs(&config.seeds, &reports);
        write_atomic(&out_dir.join("summary.json"), &to_json_pretty(&summary)?)?;
        println!(
            "over {} seeds: AUC {:.4} ({:.4})  AP {:.4} ({:.4})",
            config.seeds.len(),
            summary.auc_mean,
            summary.auc_std,
            summary.ap_mean,
            summary.ap_std
        );
    }
    Ok(())
}

/// Continues a finished run from its checkpoint under the current config
/// (typically with a raised `max_epochs`). Because per-epoch randomness is
/// derived from `(seed, epoch)`, the extended run is bit-identical to one
/// trained that long without stopping.
pub fn cmd_resume(
    config: &ExperimentConfig,
    config_dir: &Path,
    checkpoint_path: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let dataset = prepare_dataset(config, config_dir)?;
    let model_config = config.model.model_config(&dataset.manifest);
    if model_config.fingerprint() != checkpoint.model_fingerprint {
        bail!(
            "checkpoint model config does not match the current config (hash {} vs {})",
            checkpoint.model_fingerprint,
            model_config.fingerprint()
        );
    }
    if checkpoint.mode != config.train.mode {
        bail!("checkpoint was trained in a different mode");
    }

    let seed = checkpoint.train_config.seed;
    let train_config = config.train.train_config(seed);
    let state = match config.train.mode {
        TrainMode::Meta => {
            metatrain::train_from_state(&dataset.manifest, &train_config, checkpoint.state)?
        }
        TrainMode::Pooled => {
            metatrain::train_pooled_from_state(&dataset.manifest, &train_config, checkpoint.state)?
        }
    };

    let report = match config.train.mode {
        TrainMode::Meta => metatrain::evaluate(
            TaskParams::PerTask(&state.task_params),
            &dataset.manifest,
            Split::Test,
        )?,
        TrainMode::Pooled => metatrain::evaluate(
            TaskParams::Shared(&state.theta),
            &dataset.manifest,
            Split::Test,
        )?,
    };

    let dir = match out {
        Some(dir) => dir.to_path_buf(),
        None => checkpoint_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("config.toml"), &config.snapshot_for_seed(seed).to_toml()?)?;
    let mut log = String::new();
    for record in &state.history {
        log.push_str(&serde_json::to_string(record)?);
        log.push('\n');
    }
    write_atomic(&dir.join("train.log"), &log)?;
    let epochs = state.epoch;
    let updated = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        mode: config.train.mode,
        dataset_name: dataset.manifest.name.clone(),
        model_config,
        model_fingerprint: model_config.fingerprint(),
        train_config,
        prep: config.dataset.prep_options(),
        norm_stats: dataset.norm_stats.clone(),
        task_rates: dataset.manifest.task_rates().into_iter().collect(),
        state,
    };
    updated.save(dir.join("checkpoint.json"))?;
    write_atomic(&dir.join("report.json"), &to_json_pretty(&report)?)?;
    println!(
        "resumed seed {seed} to {epochs} epochs: test micro AUC {:.4}, micro AP {:.4} -> {}",
        report.micro_auc,
        report.micro_ap,
        dir.display()
    );
    Ok(())
}

const ABLATION_STRATEGIES: [&str; 4] = ["identity", "static", "knn", "cosine"];

pub fn cmd_ablate(config: &ExperimentConfig, config_dir: &Path, out: Option<&Path>) -> Result<()> {
    if config.train.mode != TrainMode::Meta {
        bail!("ablate requires train.mode = \"meta\"");
    }
    let dataset = prepare_dataset(config, config_dir)?;
    let out_dir = config.resolve_output(out);

    let base_eta = match config.train.similarity {
        SimilarityConfig::Cosine { eta } => eta,
        _ => 0.7,
    };

    let mut table: BTreeMap<String, SeedSummary> = BTreeMap::new();
    for strategy in ABLATION_STRATEGIES {
        let similarity = match strategy {
            "identity" => SimilarityConfig::Identity,
            "static" => SimilarityConfig::Static {
                tolerance: config.ablate.static_tolerance,
            },
            "knn" => SimilarityConfig::Knn {
                k: config.ablate.knn_k.min(dataset.manifest.tasks.len()),
            },
            "cosine" => SimilarityConfig::Cosine { eta: base_eta },
            _ => unreachable!(),
        };
        let mut variant = config.clone();
        variant.train.similarity = similarity;
        variant.name = format!("{}-{strategy}", config.name);

        let mut reports = Vec::new();
        for &seed in &config.seeds {
            let dir = out_dir.join(strategy).join(format!("seed-{seed}"));
            let outcome = run_one_training(&variant, &dataset, seed, &dir)?;
            println!(
                "{strategy:>8} seed {seed}: test micro AUC {:.4}, micro AP {:.4} ({} epochs)",
                outcome.report.micro_auc, outcome.report.micro_ap, outcome.epochs
            );
            reports.push(outcome.report);
        }
        table.insert(
            strategy.to_string(),
            SeedSummary::from_runs(&config.seeds, &reports),
        );
    }

    write_atomic(&out_dir.join("ablation.json"), &to_json_pretty(&table)?)?;

    println!("\nstrategy        AUC              AP");
    for strategy in ABLATION_STRATEGIES {
        let s = &table[strategy];
        println!(
            "{strategy:<10} {:.4} ({:.4})  {:.4} ({:.4})",
            s.auc_mean, s.auc_std, s.ap_mean, s.ap_std
        );
    }
    Ok(())
}

pub fn cmd_gen_data(
    preset_name: Option<&str>,
    config_path: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let synth = match (preset_name, config_path) {
        (Some(name), None) => data::preset(name)
            .with_context(|| format!("unknown synthetic preset '{name}'"))?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        _ => bail!("gen-data requires exactly one of --preset or --config"),
    };
    let manifest = data::generate_synthetic_tasks(&synth, seed)?;
    data::save_dataset(&manifest, out)?;

    let per_task: Vec<usize> = manifest.tasks.iter().map(|t| t.n_samples()).collect();
    let min = per_task.iter().min().unwrap();
    let max = per_task.iter().max().unwrap();
    let mean = per_task.iter().sum::<usize>() as f64 / per_task.len() as f64;
    println!("wrote dataset '{}' to {}", manifest.name, out.display());
    println!("  tasks:            {}", manifest.stats.task_count);
    println!("  samples:          {}", manifest.stats.sample_count);
    println!("  positive rate:    {:.4}", manifest.stats.positive_rate);
    println!("  samples per task: min {min} / max {max} / mean {mean:.2}");
    Ok(())
}

fn load_prepared_for_checkpoint(
    checkpoint: &Checkpoint,
    data_path: &Path,
) -> Result<DatasetManifest> {
    let raw = data::load_dataset(data_path)?;
    let capped = if checkpoint.prep.max_seq_len > 0 {
        data::truncate_to_recent(&raw, checkpoint.prep.max_seq_len)
    } else {
        raw
    };
    // Apply the training-time statistics rather than recomputing, so the
    // model sees the same feature scale it was trained with.
    Ok(match &checkpoint.norm_stats {
        Some(stats) => data::apply_normalization(&capped, stats),
        None => capped,
    })
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    data_path: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<()> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let manifest = load_prepared_for_checkpoint(&checkpoint, data_path)?;

    let report = match checkpoint.mode {
        TrainMode::Meta => metatrain::evaluate(
            TaskParams::PerTask(&checkpoint.state.task_params),
            &manifest,
            split,
        )?,
        TrainMode::Pooled => {
            metatrain::evaluate(TaskParams::Shared(&checkpoint.state.theta), &manifest, split)?
        }
    };

    let text = to_json_pretty(&report)?;
    match out {
        Some(path) => {
            write_atomic(path, &text)?;
            println!("wrote report to {}", path.display());
        }
        None => print!("{text}"),
    }
    println!(
        "micro AUC {:.4}  micro AP {:.4}  (macro AUC {}, macro AP {})",
        report.micro_auc,
        report.micro_ap,
        report
            .macro_auc
            .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        report
            .macro_ap
            .map_or("n/a".to_string(), |v| format!("{v:.4}")),
    );
    Ok(())
}

pub fn cmd_export_model_space(checkpoint_path: &Path, out: &Path) -> Result<()> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    if checkpoint.state.similarity_params.is_empty() {
        bail!("checkpoint has no per-task parameters (pooled run or zero epochs)");
    }
    let rates: Vec<(String, f64)> = checkpoint
        .task_rates
        .iter()
        .map(|(id, r)| (id.clone(), *r))
        .collect();
    let assignment = similarity::assign(
        &checkpoint.train_config.similarity,
        &rates,
        Some(&checkpoint.state.similarity_params),
        &checkpoint.state.theta,
        checkpoint.state.epoch,
    )?;

    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?,
    );
    let written = similarity::export_model_space(
        &mut file,
        &checkpoint.state.similarity_params,
        &checkpoint.state.theta,
        &assignment,
        &rates,
    )?;
    file.flush()?;
    println!("wrote {written} task records to {}", out.display());
    Ok(())
}
