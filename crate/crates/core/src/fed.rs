//! Federated averaging: client sampling, local training, aggregation and
//! global evaluation.

use std::io::Write;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_cnn, build_miniresnet, ModelState, NormHyper};
use crate::nn::{sgd_step, softmax_cross_entropy};
use crate::norm::NormKind;
use crate::partition::PartitionManifest;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Cnn,
    Miniresnet,
}

impl std::str::FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cnn" => Ok(Self::Cnn),
            "miniresnet" | "resnet" => Ok(Self::Miniresnet),
            other => Err(Error::Config(format!("unknown model {other:?}; valid: cnn, miniresnet"))),
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cnn => "cnn",
            Self::Miniresnet => "miniresnet",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub num_devices: usize,
    pub devices_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_rounds: usize,
    pub norm_kind: NormKind,
    pub model: ModelId,
    pub seed: u64,
    pub eval_every: usize,
    pub norm: NormHyper,
    /// Worker threads for local training; results do not depend on it.
    pub threads: usize,
    /// When false the `secs` field of every record is null, making the
    /// metric stream a pure function of the configuration.
    pub record_wall_clock: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            num_devices: 100,
            devices_per_round: 10,
            local_epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            total_rounds: 5000,
            norm_kind: NormKind::Batch,
            model: ModelId::Cnn,
            seed: 0,
            eval_every: 10,
            norm: NormHyper::default(),
            threads: 1,
            record_wall_clock: true,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_devices == 0 {
            return fail("num_devices must be positive".into());
        }
        if self.devices_per_round == 0 || self.devices_per_round > self.num_devices {
            return fail(format!(
                "devices_per_round must be in 1..={}, got {}",
                self.num_devices, self.devices_per_round
            ));
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if self.threads == 0 {
            return fail("threads must be positive".into());
        }
        if !(self.norm.epsilon >= 0.0 && (0.0..=1.0).contains(&self.norm.momentum)) {
            return fail("norm epsilon must be >= 0 and momentum in [0, 1]".into());
        }
        Ok(())
    }

    pub fn build_model<T: Scalar>(&self, input_shape: &[usize], classes: usize) -> Result<ModelState<T>> {
        let init_seed = seed::derive(self.seed, "init");
        let mut model = match self.model {
            ModelId::Cnn => build_cnn::<T>(self.norm_kind, input_shape, classes, init_seed)?,
            ModelId::Miniresnet => build_miniresnet::<T>(self.norm_kind, input_shape, classes, init_seed)?,
        };
        for st in model.norm_states.values_mut() {
            st.epsilon = T::lit(self.norm.epsilon);
            st.momentum = T::lit(self.norm.momentum);
        }
        Ok(model)
    }
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub devices: Vec<usize>,
    pub acc: f64,
    pub loss: f64,
    pub norms: IndexMap<String, f64>,
    pub secs: Option<f64>,
}

pub fn write_jsonl<W: Write>(records: &[RoundRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("metrics stream", e))?;
    }
    out.flush().map_err(|e| Error::io("metrics stream", e))
}

pub fn read_jsonl(text: &str) -> Result<Vec<RoundRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// `m` distinct device ids drawn uniformly without replacement, determined
/// by `(seed, round)` alone. Returned in ascending order.
pub fn sample_clients(round: usize, m: usize, num_devices: usize, seed_: u64) -> Result<Vec<usize>> {
    if m == 0 || m > num_devices {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} of {num_devices} devices"
        )));
    }
    let mut rng = seed::rng(seed::derive_indexed(seed_, "sample", &[round as u64]));
    let mut ids = index::sample(&mut rng, num_devices, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// A trained replica and the number of samples it saw per epoch.
#[derive(Clone, Debug)]
pub struct LocalUpdate<T: Scalar> {
    pub device: usize,
    pub model: ModelState<T>,
    pub samples: usize,
    /// Mean train-mode minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// E epochs of shuffled minibatch SGD on a clone of `global`.
pub fn local_train<T: Scalar>(
    global: &ModelState<T>,
    shard: &[usize],
    dataset: &Dataset<T>,
    schedule: LocalSchedule,
    round_seed: u64,
) -> Result<(ModelState<T>, usize, Vec<f64>)> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument("empty client shard".into()));
    }
    if schedule.epochs == 0 {
        return Err(Error::InvalidArgument("local training needs at least one epoch".into()));
    }
    let mut model = global.clone();
    let lr = T::lit(schedule.learning_rate);
    let mut losses = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let epoch_seed = seed::derive_indexed(round_seed, "epoch", &[epoch as u64]);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in batch_iter(dataset, shard, schedule.batch_size, epoch_seed)? {
            let (loss, grads) = model.loss_and_grads(&batch)?;
            sgd_step(&mut model, &grads, lr)?;
            total += loss.as_f64();
            count += 1;
        }
        losses.push(if count == 0 { f64::NAN } else { total / count as f64 });
    }
    Ok((model, shard.len(), losses))
}

/// Sample-count weighted mean of the local models.
///
/// Locals are reduced in ascending device order as
/// `x_0 + sum_i w_i (x_i - x_0)`, which is exact for identical replicas and
/// for a single client. Batch running statistics are averaged the same way.
/// FixedBatch layers keep the server's running statistics.
pub fn aggregate<T: Scalar>(server: &ModelState<T>, locals: &[LocalUpdate<T>]) -> Result<ModelState<T>> {
    if locals.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let mut order: Vec<&LocalUpdate<T>> = locals.iter().collect();
    order.sort_by_key(|l| l.device);
    for l in &order {
        server.same_topology(&l.model)?;
    }
    let total: usize = order.iter().map(|l| l.samples).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("aggregate weights sum to zero".into()));
    }
    let weights: Vec<T> = order
        .iter()
        .map(|l| T::from_usize_lossy(l.samples) / T::from_usize_lossy(total))
        .collect();

    let mut out = order[0].model.clone();
    for (name, p) in out.params.iter_mut() {
        let parts: Vec<&Tensor<T>> = order.iter().map(|l| &l.model.params[name.as_str()]).collect();
        mean_into(p, &parts, &weights);
    }
    for (name, st) in out.norm_states.iter_mut() {
        let states: Vec<_> = order.iter().map(|l| &l.model.norm_states[name.as_str()]).collect();
        mean_into(&mut st.gamma, &states.iter().map(|s| &s.gamma).collect::<Vec<_>>(), &weights);
        mean_into(&mut st.beta, &states.iter().map(|s| &s.beta).collect::<Vec<_>>(), &weights);
        match norm_kind_of(server, name) {
            Some(NormKind::Batch) => {
                mean_into(
                    &mut st.running_mean,
                    &states.iter().map(|s| &s.running_mean).collect::<Vec<_>>(),
                    &weights,
                );
                mean_into(
                    &mut st.running_var,
                    &states.iter().map(|s| &s.running_var).collect::<Vec<_>>(),
                    &weights,
                );
            }
            _ => {
                let keep = &server.norm_states[name.as_str()];
                st.running_mean = keep.running_mean.clone();
                st.running_var = keep.running_var.clone();
            }
        }
    }
    Ok(out)
}

fn norm_kind_of<T>(model: &ModelState<T>, layer: &str) -> Option<NormKind> {
    model.topology.norm_kinds().find(|(n, _)| *n == layer).map(|(_, k)| k)
}

fn mean_into<T: Scalar>(out: &mut Tensor<T>, parts: &[&Tensor<T>], weights: &[T]) {
    let base = parts[0].data();
    for (j, o) in out.data_mut().iter_mut().enumerate() {
        let mut acc = base[j];
        for (p, &w) in parts.iter().zip(weights).skip(1) {
            acc += w * (p.data()[j] - base[j]);
        }
        *o = acc;
    }
}

/// Eval-mode accuracy and mean cross-entropy over the whole dataset.
pub fn evaluate<T: Scalar>(model: &ModelState<T>, dataset: &Dataset<T>, batch_size: usize) -> Result<(f64, f64)> {
    if dataset.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("evaluation needs samples and a positive batch size".into()));
    }
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(batch_size) {
        let batch = dataset.batch(chunk)?;
        let logits = model.predict(&batch.inputs)?;
        let (loss, _) = softmax_cross_entropy(&logits, &batch.labels)?;
        loss_sum += loss.as_f64() * chunk.len() as f64;
        let k = logits.dim(1);
        for (row, &label) in logits.data().chunks(k).zip(&batch.labels) {
            correct += usize::from(argmax(row) == label);
        }
    }
    Ok((correct as f64 / dataset.len() as f64, loss_sum / dataset.len() as f64))
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub struct FedOutcome<T: Scalar> {
    pub records: Vec<RoundRecord>,
    pub model: ModelState<T>,
}

/// Runs the whole protocol from a freshly initialized model.
pub fn run_federated<T: Scalar>(
    config: &FedConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    manifest: &PartitionManifest,
) -> Result<FedOutcome<T>> {
    let model = config.build_model(train.sample_shape(), train.class_count)?;
    run_federated_from(config, model, train, test, manifest, |_, _| {})
}

/// Runs `config.total_rounds` rounds starting at `model`. `observe` sees
/// every round's local updates (in ascending device order) before they are
/// aggregated.
pub fn run_federated_from<T: Scalar>(
    config: &FedConfig,
    mut model: ModelState<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    manifest: &PartitionManifest,
    mut observe: impl FnMut(usize, &[LocalUpdate<T>]),
) -> Result<FedOutcome<T>> {
    config.validate()?;
    if manifest.num_devices() != config.num_devices {
        return Err(Error::Config(format!(
            "manifest has {} devices, config expects {}",
            manifest.num_devices(),
            config.num_devices
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let schedule = LocalSchedule {
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
    };
    let mut records = Vec::new();
    for round in 1..=config.total_rounds {
        let started = Instant::now();
        let devices = sample_clients(round, config.devices_per_round, config.num_devices, config.seed)?;
        let global = &model;
        let locals: Vec<LocalUpdate<T>> = pool.install(|| {
            devices
                .par_iter()
                .map(|&d| {
                    let client_seed = seed::derive_indexed(config.seed, "client", &[round as u64, d as u64]);
                    let (m, samples, epoch_losses) =
                        local_train(global, &manifest.assignments[d], train, schedule, client_seed)?;
                    Ok(LocalUpdate {
                        device: d,
                        model: m,
                        samples,
                        epoch_losses,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        observe(round, &locals);
        model = aggregate(&model, &locals)?;
        if round % config.eval_every == 0 || round == config.total_rounds {
            let (acc, loss) = evaluate(&model, test, config.batch_size.max(256))?;
            records.push(RoundRecord {
                round,
                devices,
                acc,
                loss,
                norms: model.weight_norms(),
                secs: config.record_wall_clock.then(|| started.elapsed().as_secs_f64()),
            });
        }
    }
    Ok(FedOutcome { records, model })
}
