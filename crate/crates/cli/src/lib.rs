//! Experiment harness: configuration, dataset resolution and the four
//! subcommands behind the `fednorm` binary.

pub mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fednorm_core::data::{self, Dataset, Split, SyntheticSpec};
use fednorm_core::diagnostics::{run_property_suite, shift, toy_shift_experiment};
use fednorm_core::fed::{run_federated, write_jsonl};
use fednorm_core::partition::{partition_noniid, PartitionManifest};
use fednorm_core::{checkpoint, seed, Scalar};
use rand::seq::index;

pub use config::{DatasetKind, ExperimentConfig, Precision};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const PARTITION_FILE: &str = "partition.txt";
pub const SHIFT_STATS_FILE: &str = "shift_stats.csv";
pub const HISTOGRAM_FILE: &str = "shift_histograms.csv";
pub const SHIFT_SUMMARY_FILE: &str = "shift_summary.json";

/// Loads (or synthesizes) one split of the configured dataset.
pub fn load_split<T: Scalar>(cfg: &ExperimentConfig, split: Split) -> Result<Dataset<T>> {
    if cfg.dataset.is_synthetic() {
        let mut spec = match cfg.dataset {
            DatasetKind::SyntheticMnist => SyntheticSpec::mnist_like(0),
            _ => SyntheticSpec::cifar_like(32, 0),
        };
        spec.side = cfg.resolved_synthetic_side();
        spec.per_class = match split {
            Split::Train => cfg.resolved_train_per_class(),
            Split::Test => cfg.synthetic_test_per_class,
        };
        let label = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let proto = seed::derive(cfg.synthetic_seed, "proto");
        return Ok(data::synthetic(&spec, proto, seed::derive(cfg.synthetic_seed, label))?);
    }
    let Some(dir) = cfg.resolved_data_dir() else {
        bail!(
            "dataset {} needs data_dir in the config or {} in the environment",
            cfg.dataset,
            config::DATA_DIR_ENV
        );
    };
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    Ok(match cfg.dataset {
        DatasetKind::Mnist => data::load_mnist(&dir, split)?,
        _ => data::load_cifar10(&dir, split)?,
    })
}

pub fn partition_for<T: Scalar>(cfg: &ExperimentConfig, train: &Dataset<T>) -> Result<PartitionManifest> {
    Ok(partition_noniid(
        train,
        cfg.fed.num_devices,
        cfg.classes_per_device,
        cfg.samples_per_class,
        seed::derive(cfg.fed.seed, "partition"),
    )?)
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<&Path> {
    let out = cfg.output_dir.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_resolved_text())
        .with_context(|| format!("writing {}", out.join(RESOLVED_CONFIG_FILE).display()))?;
    Ok(out)
}

/// Federated training; writes metrics, the final checkpoint, the partition
/// and the resolved configuration into the output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<PathBuf> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let train = load_split::<T>(cfg, Split::Train)?;
    let test = load_split::<T>(cfg, Split::Test)?;
    let manifest = partition_for(cfg, &train)?;
    let out = prepare_output(cfg)?;
    manifest.write(out.join(PARTITION_FILE))?;
    let outcome = run_federated(&cfg.fed, &train, &test, &manifest)?;
    for r in &outcome.records {
        println!("round {:>5}  acc {:.4}  loss {:.4}", r.round, r.acc, r.loss);
    }
    let metrics = out.join(METRICS_FILE);
    let file = fs::File::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?;
    write_jsonl(&outcome.records, BufWriter::new(file))?;
    checkpoint::save(&outcome.model, out.join(CHECKPOINT_FILE))?;
    Ok(out.to_path_buf())
}

/// Two-device constant-shift experiment on a random subset of the training split.
pub fn cmd_toy_shift(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let train = load_split::<f64>(cfg, Split::Train)?;
    let n = cfg.toy_samples.min(train.len());
    let mut idx = index::sample(&mut seed::rng(seed::derive(cfg.fed.seed, "toy-subset")), train.len(), n).into_vec();
    idx.sort_unstable();
    let base = train.subset(&idx)?;
    let outcome = toy_shift_experiment(&base, &cfg.toy)?;
    let out = prepare_output(cfg)?;
    outcome.report.write_stats_csv(out.join(SHIFT_STATS_FILE))?;
    shift::write_histograms_csv(&outcome.histograms, out.join(HISTOGRAM_FILE))?;
    fs::write(out.join(SHIFT_SUMMARY_FILE), outcome.report.summary_json()?)
        .with_context(|| format!("writing {}", out.join(SHIFT_SUMMARY_FILE).display()))?;
    for l in &outcome.report.layers {
        println!(
            "{:<8} pre-norm divergence {:.4}  post-norm divergence {:.4}",
            l.layer, l.pre.divergence, l.post.divergence
        );
    }
    Ok(out.to_path_buf())
}

/// Runs the randomized property suite, printing one line per check.
/// Returns whether every check passed.
pub fn cmd_check_props(seed_: u64, trials: usize) -> Result<bool> {
    if trials == 0 {
        bail!("trials must be positive");
    }
    let outcomes = run_property_suite(seed_, trials)?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    Ok(outcomes.iter().all(|o| o.passed))
}

/// Writes the partition manifest of the configured dataset and seed.
pub fn cmd_partition(cfg: &ExperimentConfig) -> Result<PathBuf> {
    // Labels do not depend on precision.
    let train = load_split::<f32>(cfg, Split::Train)?;
    let manifest = partition_for(cfg, &train)?;
    manifest.validate(&train.labels)?;
    let out = prepare_output(cfg)?;
    let path = out.join(PARTITION_FILE);
    manifest.write(&path)?;
    Ok(path)
}
