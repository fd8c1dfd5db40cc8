//! Per-channel statistics around normalization layers and cross-device
//! divergence of those statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, make_shifted_pair, Dataset};
use crate::error::{Error, Result};
use crate::model::{toy_shift_topology, ModelState, NormHyper, NormProbe};
use crate::nn::sgd_step;
use crate::norm::{Mode, NormKind};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub pre_mean: f64,
    pub pre_std: f64,
    pub post_mean: f64,
    pub post_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: String,
    pub kind: NormKind,
    pub channels: Vec<ChannelStats>,
}

/// Values of every channel: `(N, H, W)` for `N x C x H x W`, `N` for `N x F`.
pub(crate) fn channel_values<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let (n, c) = (t.dim(0), t.dim(1));
    let hw: usize = t.shape()[2..].iter().product();
    let mut out = vec![Vec::with_capacity(n * hw); c];
    for (i, v) in t.data().iter().enumerate() {
        out[(i / hw) % c].push(v.as_f64());
    }
    out
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn stats_from_probes<T: Scalar>(probes: &[NormProbe<T>]) -> Result<Vec<LayerStats>> {
    probes
        .iter()
        .map(|p| {
            let pre = channel_values(&p.input);
            let post = channel_values(&p.output);
            let channels = pre
                .iter()
                .zip(&post)
                .enumerate()
                .map(|(c, (a, b))| {
                    let (pre_mean, pre_std) = mean_std(a);
                    let (post_mean, post_std) = mean_std(b);
                    if p.kind.uses_running_stats() && pre_std <= 1e-12 * pre_mean.abs().max(1.0) {
                        return Err(Error::Degenerate(format!(
                            "layer {} channel {c} has zero variance over the probe, batch statistics are undefined",
                            p.name
                        )));
                    }
                    Ok(ChannelStats {
                        pre_mean,
                        pre_std,
                        post_mean,
                        post_std,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerStats {
                layer: p.name.clone(),
                kind: p.kind,
                channels,
            })
        })
        .collect()
}

/// Train-mode forward over `probe`, summarizing each normalization layer's
/// input (pre) and output (post) per channel.
pub fn channel_stats<T: Scalar>(model: &ModelState<T>, probe: &Tensor<T>) -> Result<Vec<LayerStats>> {
    let (_, probes) = model.forward_probe(probe, Mode::Train)?;
    stats_from_probes(&probes)
}

/// Worst pairwise disagreement of one statistic pair across devices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// max over channels and device pairs of `|mu_i - mu_j| / pooled sigma`
    pub mean_gap: f64,
    /// max over channels and device pairs of `sigma_i / sigma_j` (>= 1)
    pub sigma_ratio: f64,
    /// `mean_gap + ln(sigma_ratio)`; 0 iff the statistics agree
    pub divergence: f64,
}

impl Default for Divergence {
    fn default() -> Self {
        Self {
            mean_gap: 0.0,
            sigma_ratio: 1.0,
            divergence: 0.0,
        }
    }
}

impl Divergence {
    fn between((m1, s1): (f64, f64), (m2, s2): (f64, f64)) -> Self {
        let pooled = ((s1 * s1 + s2 * s2) / 2.0).sqrt();
        let gap = (m1 - m2).abs();
        let mean_gap = if gap == 0.0 { 0.0 } else { gap / pooled };
        let (hi, lo) = (s1.max(s2), s1.min(s2));
        let sigma_ratio = if hi == lo { 1.0 } else { hi / lo };
        Self {
            mean_gap,
            sigma_ratio,
            divergence: mean_gap + sigma_ratio.ln(),
        }
    }

    fn max(self, other: Self) -> Self {
        let mean_gap = self.mean_gap.max(other.mean_gap);
        let sigma_ratio = self.sigma_ratio.max(other.sigma_ratio);
        Self {
            mean_gap,
            sigma_ratio,
            divergence: mean_gap + sigma_ratio.ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDivergence {
    pub layer: String,
    pub pre: Divergence,
    pub post: Divergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// `devices[d]` holds the channel statistics seen by device `d`.
    pub devices: Vec<Vec<LayerStats>>,
    pub layers: Vec<LayerDivergence>,
}

impl ShiftReport {
    pub fn from_stats(devices: Vec<Vec<LayerStats>>) -> Result<Self> {
        if devices.len() < 2 {
            return Err(Error::InvalidArgument("a shift report needs at least two devices".into()));
        }
        let shape = |d: &[LayerStats]| d.iter().map(|l| (l.layer.clone(), l.channels.len())).collect::<Vec<_>>();
        let reference = shape(&devices[0]);
        if devices.iter().any(|d| shape(d) != reference) {
            return Err(Error::TopologyMismatch("devices report different normalization layers".into()));
        }
        let layers = reference
            .iter()
            .enumerate()
            .map(|(li, (name, channels))| {
                let (mut pre, mut post) = (Divergence::default(), Divergence::default());
                for i in 0..devices.len() {
                    for j in i + 1..devices.len() {
                        for c in 0..*channels {
                            let (a, b) = (devices[i][li].channels[c], devices[j][li].channels[c]);
                            pre = pre.max(Divergence::between((a.pre_mean, a.pre_std), (b.pre_mean, b.pre_std)));
                            post = post.max(Divergence::between((a.post_mean, a.post_std), (b.post_mean, b.post_std)));
                        }
                    }
                }
                LayerDivergence {
                    layer: name.clone(),
                    pre,
                    post,
                }
            })
            .collect();
        Ok(Self { devices, layers })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDivergence> {
        self.layers.iter().find(|l| l.layer == name)
    }

    /// CSV with one row per device, layer and channel.
    pub fn write_stats_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            device: usize,
            layer: &'a str,
            channel: usize,
            pre_mean: f64,
            pre_std: f64,
            post_mean: f64,
            post_std: f64,
        }
        let path = path.as_ref();
        let mut w = csv_writer(path)?;
        for (device, layers) in self.devices.iter().enumerate() {
            for l in layers {
                for (channel, s) in l.channels.iter().enumerate() {
                    w.serialize(Row {
                        device,
                        layer: &l.layer,
                        channel,
                        pre_mean: s.pre_mean,
                        pre_std: s.pre_std,
                        post_mean: s.post_mean,
                        post_std: s.post_std,
                    })
                    .map_err(|e| csv_error(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// JSON object with the per-layer divergences.
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "layers": self.layers }))?)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Feeds the same probe to every model.
pub fn external_shift_report<T: Scalar>(models: &[ModelState<T>], probe: &Tensor<T>) -> Result<ShiftReport> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("a shift report needs at least two models".into()));
    }
    for m in &models[1..] {
        models[0].same_topology(m)?;
    }
    ShiftReport::from_stats(models.iter().map(|m| channel_stats(m, probe)).collect::<Result<_>>()?)
}

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub device: usize,
    pub layer: String,
    pub channel: usize,
    pub stage: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// Uniform histograms of every channel's pre- and post-norm values. The bin
/// range of a (layer, stage) is the min/max pooled over all devices and
/// channels, so devices share axes.
pub fn histograms<T: Scalar>(per_device: &[Vec<NormProbe<T>>], bins: usize) -> Vec<HistogramRow> {
    let mut rows = Vec::new();
    let Some(first) = per_device.first() else {
        return rows;
    };
    for (li, layer) in first.iter().enumerate() {
        for stage in ["pre", "post"] {
            let values: Vec<Vec<Vec<f64>>> = per_device
                .iter()
                .map(|probes| {
                    let p = &probes[li];
                    channel_values(if stage == "pre" { &p.input } else { &p.output })
                })
                .collect();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in values.iter().flatten().flatten() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            if !(hi > lo) {
                lo -= 0.5;
                hi += 0.5;
            }
            let width = (hi - lo) / bins as f64;
            for (device, channels) in values.iter().enumerate() {
                for (channel, vals) in channels.iter().enumerate() {
                    let mut counts = vec![0usize; bins];
                    for v in vals {
                        let b = (((v - lo) / width) as usize).min(bins - 1);
                        counts[b] += 1;
                    }
                    rows.extend(counts.into_iter().enumerate().map(|(b, count)| HistogramRow {
                        device,
                        layer: layer.name.clone(),
                        channel,
                        stage: stage.into(),
                        bin_lo: lo + b as f64 * width,
                        bin_hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
                        count,
                    }));
                }
            }
        }
    }
    rows
}

pub fn write_histograms_csv(rows: &[HistogramRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyShiftConfig {
    pub delta: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub probe_size: usize,
    /// Zero padding of the three convolutions.
    pub padding: usize,
    /// Both replicas see the same minibatch order, so the mean shift is the
    /// only difference between them.
    pub shared_shuffle: bool,
}

impl Default for ToyShiftConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            steps: 500,
            seed: 0,
            batch_size: 32,
            learning_rate: 0.01,
            probe_size: 256,
            padding: 2,
            shared_shuffle: true,
        }
    }
}

pub struct ToyShiftOutcome<T: Scalar> {
    pub report: ShiftReport,
    pub histograms: Vec<HistogramRow>,
    pub models: Vec<ModelState<T>>,
}

/// Two replicas of the single-channel toy model, one trained on `base` and
/// one on `base + delta`, from the same initialization.
///
/// Both are then probed with the same base images, each in its own input
/// space (the second replica sees the probe shifted by `delta`), which is
/// what each device observes of a shared sample.
pub fn toy_shift_experiment<T: Scalar>(base: &Dataset<T>, cfg: &ToyShiftConfig) -> Result<ToyShiftOutcome<T>> {
    if cfg.steps == 0 || cfg.batch_size < 2 || cfg.probe_size < 2 {
        return Err(Error::InvalidArgument("toy experiment needs steps >= 1, batch and probe size >= 2".into()));
    }
    if cfg.probe_size > base.len() {
        return Err(Error::InvalidArgument(format!(
            "probe of {} samples exceeds the dataset ({})",
            cfg.probe_size,
            base.len()
        )));
    }
    let topology = toy_shift_topology(base.sample_shape(), base.class_count, cfg.padding)?;
    let init = ModelState::<T>::init(topology, seed::derive(cfg.seed, "toy-init"), NormHyper::default())?;
    let (plain, shifted) = make_shifted_pair(base, cfg.delta);
    let all: Vec<usize> = (0..base.len()).collect();
    let lr = T::lit(cfg.learning_rate);
    let mut probe_idx = rand::seq::index::sample(&mut seed::rng(seed::derive(cfg.seed, "toy-probe")), base.len(), cfg.probe_size).into_vec();
    probe_idx.sort_unstable();

    let mut models = Vec::with_capacity(2);
    let mut stats = Vec::with_capacity(2);
    let mut probes = Vec::with_capacity(2);
    for (device, data) in [&plain, &shifted].into_iter().enumerate() {
        let mut model = init.clone();
        let stream = if cfg.shared_shuffle { 0 } else { device as u64 };
        let mut step = 0;
        let mut epoch = 0u64;
        while step < cfg.steps {
            let epoch_seed = seed::derive_indexed(cfg.seed, "toy-epoch", &[stream, epoch]);
            for batch in batch_iter(data, &all, cfg.batch_size, epoch_seed)? {
                let (_, grads) = model.loss_and_grads(&batch)?;
                sgd_step(&mut model, &grads, lr)?;
                step += 1;
                if step == cfg.steps {
                    break;
                }
            }
            epoch += 1;
        }
        let probe = data.images.gather_rows(&probe_idx)?;
        let (_, p) = model.forward_probe(&probe, Mode::Train)?;
        stats.push(stats_from_probes(&p)?);
        probes.push(p);
        models.push(model);
    }
    Ok(ToyShiftOutcome {
        report: ShiftReport::from_stats(stats)?,
        histograms: histograms(&probes, HISTOGRAM_BINS),
        models,
    })
}
