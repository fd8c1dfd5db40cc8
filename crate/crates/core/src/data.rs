//! Datasets: CIFAR-10 binary and MNIST IDX codecs, synthetic generators,
//! the mean-shifted pair and mini-batch iteration.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

/// Images `N x C x H x W` with pixels in `[0, 1]` (unless shifted) and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: images.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `C x H x W`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let inputs = self.images.gather_rows(indices)?;
        Batch::new(inputs, indices.iter().map(|&i| self.labels[i]).collect(), self.class_count)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let b = self.batch(indices)?;
        Self::new(b.inputs, b.labels, self.class_count)
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Parses one CIFAR-10 binary batch file: 3073-byte records of one label
/// byte followed by the R, G and B planes (1024 bytes each).
pub fn load_cifar10_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let scale = T::lit(255.0);
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(path, format!("record {i} has label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| T::from_usize_lossy(b as usize) / scale));
    }
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels, 10)
}

fn cifar_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    let base = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    match split {
        Split::Train => (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![base.join("test_batch.bin")],
    }
}

/// Loads the standard `data_batch_{1..5}.bin` / `test_batch.bin` files.
pub fn load_cifar10<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let parts = cifar_files(dir.as_ref(), split)
        .into_iter()
        .map(load_cifar10_file)
        .collect::<Result<Vec<Dataset<T>>>>()?;
    concat(parts)
}

/// Writes pixels as `round(255 v)` bytes. Pixels on the `k/255` grid
/// round-trip exactly.
pub fn write_cifar10_file<T: Scalar>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if dataset.sample_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] || dataset.class_count > 10 {
        return Err(Error::InvalidArgument(format!(
            "CIFAR-10 records need 3x32x32 images and <= 10 classes, got {:?}",
            dataset.sample_shape()
        )));
    }
    let row = dataset.images.row_len();
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (i, &label) in dataset.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(dataset.images.data()[i * row..(i + 1) * row].iter().map(|&v| to_byte(v)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn to_byte<T: Scalar>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

// ---------------------------------------------------------------------------
// MNIST IDX

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Parses an IDX image file and its label file into `N x 1 x rows x cols`.
pub fn load_mnist_files<T: Scalar>(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset<T>> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ib = std::fs::read(ipath).map_err(|e| Error::io(ipath, e))?;
    let lb = std::fs::read(lpath).map_err(|e| Error::io(lpath, e))?;
    if ib.len() < 16 {
        return Err(Error::format(ipath, "truncated IDX image header"));
    }
    if lb.len() < 8 {
        return Err(Error::format(lpath, "truncated IDX label header"));
    }
    let magic = be_u32(&ib, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            ipath,
            format!("image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let magic = be_u32(&lb, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            lpath,
            format!("label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let (n, rows, cols) = (be_u32(&ib, 4) as usize, be_u32(&ib, 8) as usize, be_u32(&ib, 12) as usize);
    let nl = be_u32(&lb, 4) as usize;
    if n != nl {
        return Err(Error::format(ipath, format!("{n} images but {nl} labels")));
    }
    if ib.len() != 16 + n * rows * cols {
        return Err(Error::format(
            ipath,
            format!("expected {} bytes for {n}x{rows}x{cols}, found {}", 16 + n * rows * cols, ib.len()),
        ));
    }
    if lb.len() != 8 + n {
        return Err(Error::format(lpath, format!("expected {} bytes, found {}", 8 + n, lb.len())));
    }
    let labels: Vec<usize> = lb[8..].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::format(lpath, format!("label {bad} out of range")));
    }
    let scale = T::lit(255.0);
    let pixels = ib[16..].iter().map(|&b| T::from_usize_lossy(b as usize) / scale).collect();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], pixels)?, labels, 10)
}

pub fn load_mnist<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let (i, l) = mnist_paths(dir.as_ref(), split);
    load_mnist_files(i, l)
}

/// Writes the IDX pair for `split` into `dir`.
pub fn write_mnist<T: Scalar>(dataset: &Dataset<T>, dir: impl AsRef<Path>, split: Split) -> Result<()> {
    let shape = dataset.sample_shape();
    if shape[0] != 1 || dataset.class_count > 10 {
        return Err(Error::InvalidArgument(format!(
            "IDX images need one channel and <= 10 classes, got {shape:?}"
        )));
    }
    let (ipath, lpath) = mnist_paths(dir.as_ref(), split);
    let n = dataset.len() as u32;
    let mut ib = Vec::with_capacity(16 + dataset.images.len());
    ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ib.extend_from_slice(&n.to_be_bytes());
    ib.extend_from_slice(&(shape[1] as u32).to_be_bytes());
    ib.extend_from_slice(&(shape[2] as u32).to_be_bytes());
    ib.extend(dataset.images.data().iter().map(|&v| to_byte(v)));
    let mut lb = Vec::with_capacity(8 + dataset.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&n.to_be_bytes());
    lb.extend(dataset.labels.iter().map(|&l| l as u8));
    std::fs::write(&ipath, ib).map_err(|e| Error::io(&ipath, e))?;
    std::fs::write(&lpath, lb).map_err(|e| Error::io(&lpath, e))
}

pub fn concat<T: Scalar>(parts: Vec<Dataset<T>>) -> Result<Dataset<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("no dataset parts".into()))?;
    let (shape, classes) = (first.sample_shape().to_vec(), first.class_count);
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in parts {
        if p.sample_shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: shape,
                right: p.sample_shape().to_vec(),
            });
        }
        labels.extend_from_slice(&p.labels);
        pixels.extend(p.images.into_data());
    }
    let mut full = vec![labels.len()];
    full.extend_from_slice(&shape);
    Dataset::new(Tensor::new(full, pixels)?, labels, classes)
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Parameters of the synthetic image generator.
///
/// Each class owns a smooth colored prototype (a sum of random oriented
/// gratings with a class-specific color mix and brightness). A sample is its
/// class prototype blended with a random other-class prototype, randomly
/// translated, contrast- and brightness-jittered, plus pixel noise, clipped
/// to `[0, 1]` and quantized to the `k/255` grid so it survives the byte
/// codecs unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    pub per_class: usize,
    /// Weight of a random distractor prototype, in `[0, 1)`.
    pub distractor: f64,
    /// Std of i.i.d. pixel noise.
    pub noise: f64,
    /// Maximum circular translation in pixels along each axis.
    pub max_shift: usize,
}

impl SyntheticSpec {
    pub fn cifar_like(side: usize, per_class: usize) -> Self {
        Self {
            channels: 3,
            side,
            classes: 10,
            per_class,
            distractor: 0.35,
            noise: 0.12,
            max_shift: 2,
        }
    }

    pub fn mnist_like(per_class: usize) -> Self {
        Self {
            channels: 1,
            side: 28,
            classes: 10,
            per_class,
            distractor: 0.3,
            noise: 0.1,
            max_shift: 2,
        }
    }
}

fn prototypes(spec: &SyntheticSpec, proto_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(proto_seed);
    let (c, s) = (spec.channels, spec.side);
    (0..spec.classes)
        .map(|_| {
            let mut img = vec![0.0; c * s * s];
            let waves: Vec<(f64, f64, f64, Vec<f64>)> = (0..3)
                .map(|_| {
                    let angle = rng.gen_range(0.0..std::f64::consts::PI);
                    let freq = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / s as f64;
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    let color: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    (angle, freq, phase, color)
                })
                .collect();
            let base: Vec<f64> = (0..c).map(|_| rng.gen_range(0.25..0.75)).collect();
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let mut v = base[ch];
                        for (angle, freq, phase, color) in &waves {
                            let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) * freq + phase;
                            v += 0.18 * color[ch] * t.sin();
                        }
                        img[(ch * s + y) * s + x] = v;
                    }
                }
            }
            img
        })
        .collect()
}

/// Generates a labeled dataset from `spec`. `proto_seed` fixes the class
/// prototypes (share it between train and test splits); `sample_seed`
/// drives the per-sample jitter.
pub fn synthetic<T: Scalar>(spec: &SyntheticSpec, proto_seed: u64, sample_seed: u64) -> Result<Dataset<T>> {
    if spec.classes == 0 || spec.per_class == 0 || spec.side == 0 || spec.channels == 0 {
        return Err(Error::InvalidArgument("synthetic dataset dimensions must be positive".into()));
    }
    let protos = prototypes(spec, proto_seed);
    let mut rng = seed::rng(sample_seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (c, s) = (spec.channels, spec.side);
    let n = spec.classes * spec.per_class;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(n * c * s * s);
    let shift = spec.max_shift as i64;
    for &label in &labels {
        let other = (label + rng.gen_range(1..spec.classes.max(2))) % spec.classes;
        let (dx, dy) = (rng.gen_range(-shift..=shift), rng.gen_range(-shift..=shift));
        let contrast = rng.gen_range(0.7..1.3);
        let bright = rng.gen_range(-0.1..0.1);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let sy = (y as i64 + dy).rem_euclid(s as i64) as usize;
                    let sx = (x as i64 + dx).rem_euclid(s as i64) as usize;
                    let at = (ch * s + sy) * s + sx;
                    let v = (1.0 - spec.distractor) * protos[label][at] + spec.distractor * protos[other][at];
                    let v = 0.5 + contrast * (v - 0.5) + bright + noise.sample(&mut rng);
                    pixels.push(T::lit((v.clamp(0.0, 1.0) * 255.0).round() / 255.0));
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, c, s, s], pixels)?, labels, spec.classes)
}

// ---------------------------------------------------------------------------
// Shift and batching

/// Returns `(base, base + delta)`; the shifted copy is not clipped.
pub fn make_shifted_pair<T: Scalar>(base: &Dataset<T>, delta: f64) -> (Dataset<T>, Dataset<T>) {
    let d = T::lit(delta);
    let mut shifted = base.clone();
    for v in shifted.images.data_mut() {
        *v += d;
    }
    (base.clone(), shifted)
}

/// Shuffles `indices` with `epoch_seed` and yields consecutive batches of
/// `batch_size`. A trailing batch of a single sample is dropped because
/// batch-statistics normalization is undefined for it.
pub fn batch_iter<'a, T: Scalar>(
    dataset: &'a Dataset<T>,
    indices: &[usize],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Batch<T>> + 'a> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::InvalidArgument(format!(
            "sample index {bad} out of range for {} samples",
            dataset.len()
        )));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut seed::rng(epoch_seed));
    let chunks: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2 || batch_size == 1)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(chunks
        .into_iter()
        .map(move |c| dataset.batch(&c).expect("indices validated")))
}
