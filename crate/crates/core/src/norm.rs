//! Activation normalization layers.
//!
//! All kinds share `y = (x - mu) / sqrt(var + eps) * gamma + beta` with a
//! per-channel affine; they differ only in the axes the statistics are taken
//! over. Inputs are `N x C` (dense) or `N x C x H x W` (conv).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_GROUPS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    None,
    Batch,
    /// Batch normalization whose running statistics are never aggregated.
    FixedBatch,
    Layer,
    Group(usize),
    Instance,
}

impl NormKind {
    pub const NAMES: &'static [&'static str] = &["none", "batch", "fixed_batch", "layer", "group", "instance"];

    /// Kinds that keep running statistics and read them in eval mode.
    pub fn uses_running_stats(self) -> bool {
        matches!(self, NormKind::Batch | NormKind::FixedBatch)
    }

    pub fn has_affine(self) -> bool {
        self != NormKind::None
    }

    /// Checks the kind against the channel count of the layer it caps.
    pub fn validate(self, channels: usize) -> Result<()> {
        if let NormKind::Group(g) = self {
            if g == 0 || !channels.is_multiple_of(g) {
                return Err(Error::InvalidArgument(format!(
                    "group count {g} must be >= 1 and divide the channel count {channels}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Batch => "batch",
            NormKind::FixedBatch => "fixed_batch",
            NormKind::Layer => "layer",
            NormKind::Group(_) => "group",
            NormKind::Instance => "instance",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::Group(g) => write!(f, "group:{g}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;

    /// Accepts the names in [`NormKind::NAMES`]; `group` takes an optional
    /// `:count` suffix and defaults to [`DEFAULT_GROUPS`].
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, tail) = match s.split_once(':') {
            Some((h, t)) => (h, Some(t)),
            None => (s, None),
        };
        let kind = match (head, tail) {
            ("none", None) => NormKind::None,
            ("batch", None) => NormKind::Batch,
            ("fixed_batch", None) => NormKind::FixedBatch,
            ("layer", None) => NormKind::Layer,
            ("instance", None) => NormKind::Instance,
            ("group", None) => NormKind::Group(DEFAULT_GROUPS),
            ("group", Some(n)) => NormKind::Group(n.parse().map_err(|_| {
                Error::Config(format!("invalid group count {n:?} in norm kind {s:?}"))
            })?),
            _ => {
                return Err(Error::Config(format!(
                    "unknown norm kind {s:?}; valid kinds: {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        Ok(kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
        }
    }
}

/// Affine parameters, running statistics and hyperparameters of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> NormState<T> {
    pub fn new(channels: usize) -> Self {
        Self::with_hyper(channels, T::lit(DEFAULT_EPSILON), T::lit(DEFAULT_MOMENTUM))
    }

    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn with_hyper(channels: usize, epsilon: T, momentum: T) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Restores the initial running statistics (mean 0, variance 1).
    pub fn reset_running(&mut self) {
        self.running_mean.data_mut().fill(T::zero());
        self.running_var.data_mut().fill(T::one());
    }
}

/// Exponential moving average `running <- (1 - m) running + m batch`.
pub fn update_running_stats<T: Scalar>(
    state: &mut NormState<T>,
    batch_mean: &Tensor<T>,
    batch_var: &Tensor<T>,
    momentum: T,
) -> Result<()> {
    state.running_mean.same_shape(batch_mean, "update_running_stats")?;
    state.running_var.same_shape(batch_var, "update_running_stats")?;
    let keep = T::one() - momentum;
    for (r, &b) in state.running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
        *r = keep * *r + momentum * b;
    }
    for (r, &b) in state.running_var.data_mut().iter_mut().zip(batch_var.data()) {
        *r = (keep * *r + momentum * b).max(T::zero());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct NormLayout {
    n: usize,
    c: usize,
    s: usize,
}

fn layout<T: Scalar>(x: &Tensor<T>, kind: NormKind, channels: usize) -> Result<NormLayout> {
    let l = match x.rank() {
        2 => NormLayout {
            n: x.dim(0),
            c: x.dim(1),
            s: 1,
        },
        4 => NormLayout {
            n: x.dim(0),
            c: x.dim(1),
            s: x.dim(2) * x.dim(3),
        },
        _ => {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "normalization expects N x C or N x C x H x W".into(),
            })
        }
    };
    if l.c != channels {
        return Err(Error::ShapeMismatch {
            op: "norm_forward",
            left: x.shape().to_vec(),
            right: vec![channels],
        });
    }
    if kind == NormKind::Instance && x.rank() == 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "instance normalization needs spatial axes".into(),
        });
    }
    kind.validate(l.c)?;
    Ok(l)
}

/// How statistics are scoped for the given call.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Scope {
    Identity,
    /// Per channel over (N, H, W), computed from the batch.
    BatchStats,
    /// Per channel from the running estimates.
    Running,
    /// Per sample over contiguous blocks of `C / groups` channels.
    PerSample { groups: usize },
}

fn scope(kind: NormKind, mode: Mode, c: usize) -> Scope {
    match (kind, mode) {
        (NormKind::None, _) => Scope::Identity,
        (NormKind::Batch | NormKind::FixedBatch, Mode::Train) => Scope::BatchStats,
        (NormKind::Batch | NormKind::FixedBatch, Mode::Eval) => Scope::Running,
        (NormKind::Layer, _) => Scope::PerSample { groups: 1 },
        (NormKind::Group(g), _) => Scope::PerSample { groups: g },
        (NormKind::Instance, _) => Scope::PerSample { groups: c },
    }
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    kind: NormKind,
    mode: Mode,
    layout: NormLayout,
    scope_kind: Scope,
    xhat: Vec<T>,
    /// One entry per statistics scope (channel or sample-group).
    inv_std: Vec<T>,
    gamma: Vec<T>,
    batch_mean: Option<Tensor<T>>,
    batch_var: Option<Tensor<T>>,
}

impl<T: Scalar> NormCache<T> {
    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Per-channel batch mean and population variance from a train-mode
    /// batch-statistics forward pass.
    pub fn batch_stats(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.batch_mean.as_ref()?, self.batch_var.as_ref()?))
    }
}

#[derive(Clone, Debug)]
pub struct NormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

/// Normalizes `x`. Pure: running statistics are not touched; callers fold
/// [`NormCache::batch_stats`] in with [`update_running_stats`].
pub fn norm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &NormState<T>,
    kind: NormKind,
    mode: Mode,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let l = layout(x, kind, state.channels())?;
    let sc = scope(kind, mode, l.c);
    let eps = state.epsilon;
    let mut cache = NormCache {
        kind,
        mode,
        layout: l,
        scope_kind: sc,
        xhat: Vec::new(),
        inv_std: Vec::new(),
        gamma: state.gamma.data().to_vec(),
        batch_mean: None,
        batch_var: None,
    };
    if sc == Scope::Identity {
        return Ok((x.clone(), cache));
    }
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    match sc {
        Scope::BatchStats | Scope::Running => {
            let (means, vars) = if sc == Scope::BatchStats {
                if l.n < 2 {
                    return Err(Error::BatchTooSmall(l.n));
                }
                let (m, v) = channel_moments(xd, l);
                let means = Tensor::new(vec![l.c], m)?;
                let vars = Tensor::new(vec![l.c], v)?;
                cache.batch_mean = Some(means.clone());
                cache.batch_var = Some(vars.clone());
                (means, vars)
            } else {
                (state.running_mean.clone(), state.running_var.clone())
            };
            let inv: Vec<T> = vars.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            for n in 0..l.n {
                for c in 0..l.c {
                    let base = (n * l.c + c) * l.s;
                    let (mu, is) = (means.data()[c], inv[c]);
                    for i in base..base + l.s {
                        xhat[i] = (xd[i] - mu) * is;
                    }
                }
            }
            cache.inv_std = inv;
        }
        Scope::PerSample { groups } => {
            let block = l.c / groups * l.s;
            let count = T::from_usize_lossy(block);
            let mut inv = Vec::with_capacity(l.n * groups);
            for (chunk, out) in xd.chunks_exact(block).zip(xhat.chunks_exact_mut(block)) {
                let mean = chunk.iter().fold(T::zero(), |a, &v| a + v) / count;
                let var = chunk.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
                let is = T::one() / (var + eps).sqrt();
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o = (v - mean) * is;
                }
                inv.push(is);
            }
            cache.inv_std = inv;
        }
        Scope::Identity => unreachable!(),
    }
    let mut y = xhat.clone();
    for n in 0..l.n {
        for c in 0..l.c {
            let base = (n * l.c + c) * l.s;
            let (g, b) = (state.gamma.data()[c], state.beta.data()[c]);
            for v in &mut y[base..base + l.s] {
                *v = *v * g + b;
            }
        }
    }
    cache.xhat = xhat;
    Ok((Tensor::new(x.shape().to_vec(), y)?, cache))
}

/// Per-channel mean and population variance over the (N, H, W) axes.
fn channel_moments<T: Scalar>(xd: &[T], l: NormLayout) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize_lossy(l.n * l.s);
    let mut means = vec![T::zero(); l.c];
    for n in 0..l.n {
        for (c, m) in means.iter_mut().enumerate() {
            let base = (n * l.c + c) * l.s;
            *m += xd[base..base + l.s].iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    for m in &mut means {
        *m /= count;
    }
    let mut vars = vec![T::zero(); l.c];
    for n in 0..l.n {
        for (c, v) in vars.iter_mut().enumerate() {
            let base = (n * l.c + c) * l.s;
            let mu = means[c];
            *v += xd[base..base + l.s].iter().fold(T::zero(), |a, &x| a + (x - mu) * (x - mu));
        }
    }
    for v in &mut vars {
        *v /= count;
    }
    (means, vars)
}

/// Exact gradients of [`norm_forward`], including the dependence of
/// batch-computed statistics on `x`.
pub fn norm_backward<T: Scalar>(dy: &Tensor<T>, cache: Option<&NormCache<T>>, mode: Mode) -> Result<NormGrads<T>> {
    let cache = cache.ok_or(Error::MissingCache("norm_backward"))?;
    if cache.mode != mode {
        return Err(Error::ModeMismatch {
            cached: cache.mode.name(),
            requested: mode.name(),
        });
    }
    let l = cache.layout;
    if dy.len() != l.n * l.c * l.s || dy.dim(0) != l.n || dy.dim(1) != l.c {
        return Err(Error::ShapeMismatch {
            op: "norm_backward",
            left: dy.shape().to_vec(),
            right: vec![l.n, l.c, l.s],
        });
    }
    let mut dgamma = vec![T::zero(); l.c];
    let mut dbeta = vec![T::zero(); l.c];
    if cache.scope_kind == Scope::Identity {
        return Ok(NormGrads {
            dx: dy.clone(),
            dgamma: Tensor::new(vec![l.c], dgamma)?,
            dbeta: Tensor::new(vec![l.c], dbeta)?,
        });
    }
    let dyd = dy.data();
    let xhat = &cache.xhat;
    // dxhat = dy * gamma
    let mut dxhat = vec![T::zero(); dyd.len()];
    for n in 0..l.n {
        for c in 0..l.c {
            let base = (n * l.c + c) * l.s;
            let g = cache.gamma[c];
            for i in base..base + l.s {
                dgamma[c] += dyd[i] * xhat[i];
                dbeta[c] += dyd[i];
                dxhat[i] = dyd[i] * g;
            }
        }
    }
    let mut dx = vec![T::zero(); dyd.len()];
    match cache.scope_kind {
        Scope::Running => {
            for n in 0..l.n {
                for c in 0..l.c {
                    let base = (n * l.c + c) * l.s;
                    for i in base..base + l.s {
                        dx[i] = dxhat[i] * cache.inv_std[c];
                    }
                }
            }
        }
        Scope::BatchStats => {
            let count = T::from_usize_lossy(l.n * l.s);
            let mut mean_d = vec![T::zero(); l.c];
            let mut mean_dx = vec![T::zero(); l.c];
            for n in 0..l.n {
                for c in 0..l.c {
                    let base = (n * l.c + c) * l.s;
                    for i in base..base + l.s {
                        mean_d[c] += dxhat[i];
                        mean_dx[c] += dxhat[i] * xhat[i];
                    }
                }
            }
            for c in 0..l.c {
                mean_d[c] /= count;
                mean_dx[c] /= count;
            }
            for n in 0..l.n {
                for c in 0..l.c {
                    let base = (n * l.c + c) * l.s;
                    let is = cache.inv_std[c];
                    for i in base..base + l.s {
                        dx[i] = is * (dxhat[i] - mean_d[c] - xhat[i] * mean_dx[c]);
                    }
                }
            }
        }
        Scope::PerSample { groups } => {
            let block = l.c / groups * l.s;
            let count = T::from_usize_lossy(block);
            for (gi, ((d, xh), out)) in dxhat
                .chunks_exact(block)
                .zip(xhat.chunks_exact(block))
                .zip(dx.chunks_exact_mut(block))
                .enumerate()
            {
                let mean_d = d.iter().fold(T::zero(), |a, &v| a + v) / count;
                let mean_dx = d.iter().zip(xh).fold(T::zero(), |a, (&g, &h)| a + g * h) / count;
                let is = cache.inv_std[gi];
                for ((o, &g), &h) in out.iter_mut().zip(d).zip(xh) {
                    *o = is * (g - mean_d - h * mean_dx);
                }
            }
        }
        Scope::Identity => unreachable!(),
    }
    Ok(NormGrads {
        dx: Tensor::new(dy.shape().to_vec(), dx)?,
        dgamma: Tensor::new(vec![l.c], dgamma)?,
        dbeta: Tensor::new(vec![l.c], dbeta)?,
    })
}
