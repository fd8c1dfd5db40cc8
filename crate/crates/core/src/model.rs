//! Layer topologies, model state and the forward/backward executor.

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, relu, relu_backward, softmax_cross_entropy,
    Batch, Conv2dCache, DenseCache, LayerGradients, ParamMap, ParamStore, ReluCache,
};
use crate::norm::{norm_backward, norm_forward, update_running_stats, Mode, NormCache, NormKind, NormState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    Norm {
        name: String,
        channels: usize,
        kind: NormKind,
    },
    Relu,
    Flatten,
    ResidualBegin,
    ResidualAdd,
}

/// An ordered layer list plus the per-sample input shape it expects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Topology {
    /// Propagates shapes through the layer list and checks every structural
    /// invariant. Returns the per-sample output shape of each layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let bad = |i: usize, msg: String| Error::InvalidArgument(format!("layer {i}: {msg}"));
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "input shape must be non-empty with positive dims".into(),
            });
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut stack: Vec<Vec<usize>> = Vec::new();
        let mut names = std::collections::HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    if !names.insert(name.clone()) {
                        return Err(bad(i, format!("duplicate layer name {name}")));
                    }
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return Err(bad(i, format!("conv expects {in_channels} x H x W, got {shape:?}")));
                    }
                    let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
                    if h < *kernel || w < *kernel || *kernel == 0 {
                        return Err(bad(i, format!("kernel {kernel} larger than input {shape:?}")));
                    }
                    shape = vec![*out_channels, h - kernel + 1, w - kernel + 1];
                }
                LayerSpec::Dense {
                    name,
                    in_features,
                    out_features,
                } => {
                    if !names.insert(name.clone()) {
                        return Err(bad(i, format!("duplicate layer name {name}")));
                    }
                    if shape != [*in_features] {
                        return Err(bad(i, format!("dense expects [{in_features}], got {shape:?}")));
                    }
                    shape = vec![*out_features];
                }
                LayerSpec::Norm { name, channels, kind } => {
                    if !names.insert(name.clone()) {
                        return Err(bad(i, format!("duplicate layer name {name}")));
                    }
                    if shape[0] != *channels {
                        return Err(bad(i, format!("norm over {channels} channels, input {shape:?}")));
                    }
                    if *kind == NormKind::Instance && shape.len() == 1 {
                        return Err(bad(i, "instance normalization needs spatial axes".into()));
                    }
                    kind.validate(*channels).map_err(|e| bad(i, e.to_string()))?;
                    match self.layers.get(i + 1) {
                        Some(LayerSpec::Relu) | Some(LayerSpec::ResidualAdd) => {}
                        _ => return Err(bad(i, "normalization must be followed by relu or a residual add".into())),
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
                LayerSpec::ResidualBegin => stack.push(shape.clone()),
                LayerSpec::ResidualAdd => {
                    let saved = stack.pop().ok_or_else(|| bad(i, "residual add without begin".into()))?;
                    if saved != shape {
                        return Err(bad(i, format!("residual shapes differ: {saved:?} vs {shape:?}")));
                    }
                }
            }
            shapes.push(shape.clone());
        }
        if !stack.is_empty() {
            return Err(Error::InvalidArgument("unclosed residual block".into()));
        }
        if shape != [self.num_classes] {
            return Err(Error::InvalidArgument(format!(
                "network ends in {shape:?}, expected [{}] logits",
                self.num_classes
            )));
        }
        Ok(shapes)
    }

    pub fn norm_kinds(&self) -> impl Iterator<Item = (&str, NormKind)> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Norm { name, kind, .. } => Some((name.as_str(), *kind)),
            _ => None,
        })
    }
}

/// Normalization hyperparameters applied to every norm slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormHyper {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for NormHyper {
    fn default() -> Self {
        Self {
            epsilon: crate::norm::DEFAULT_EPSILON,
            momentum: crate::norm::DEFAULT_MOMENTUM,
        }
    }
}

/// Input and output of one normalization layer, captured during a forward pass.
#[derive(Clone, Debug)]
pub struct NormProbe<T> {
    pub name: String,
    pub kind: NormKind,
    pub input: Tensor<T>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug)]
enum Step<T> {
    Conv(Conv2dCache<T>),
    Dense(DenseCache<T>),
    Norm(NormCache<T>),
    Relu(ReluCache),
    Flatten(Vec<usize>),
    ResidualBegin,
    ResidualAdd,
}

#[derive(Clone, Debug)]
struct Tape<T> {
    mode: Mode,
    steps: Vec<Step<T>>,
}

impl<T> Tape<T> {
    fn relu_pattern(&self) -> impl Iterator<Item = &ReluCache> {
        self.steps.iter().filter_map(|s| match s {
            Step::Relu(c) => Some(c),
            _ => None,
        })
    }
}

/// Parameters, normalization states and topology of one model replica.
///
/// Affine normalization parameters live in `norm_states` but are exposed as
/// trainable parameters named `<norm>.gamma` / `<norm>.beta`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelState<T> {
    pub topology: Topology,
    pub params: ParamMap<T>,
    pub norm_states: IndexMap<String, NormState<T>>,
    #[serde(skip)]
    tape: Option<Tape<T>>,
}

impl<T: Scalar> Clone for ModelState<T> {
    /// Clones parameters and statistics; the forward cache is not copied.
    fn clone(&self) -> Self {
        Self {
            topology: self.topology.clone(),
            params: self.params.clone(),
            norm_states: self.norm_states.clone(),
            tape: None,
        }
    }
}

impl<T: Scalar> PartialEq for ModelState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.topology == other.topology && self.params == other.params && self.norm_states == other.norm_states
    }
}

impl<T: Scalar> ParamStore<T> for ModelState<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(p) = self.params.get_mut(name) {
            return Some(p);
        }
        let (layer, field) = name.rsplit_once('.')?;
        let st = self.norm_states.get_mut(layer)?;
        match field {
            "gamma" => Some(&mut st.gamma),
            "beta" => Some(&mut st.beta),
            _ => None,
        }
    }
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

impl<T: Scalar> ModelState<T> {
    /// Kaiming-uniform (fan-in) weights, zero biases, gamma = 1, beta = 0.
    pub fn init(topology: Topology, seed: u64, hyper: NormHyper) -> Result<Self> {
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        let mut norm_states = IndexMap::new();
        for layer in &topology.layers {
            match layer {
                LayerSpec::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let shape = [*out_channels, *in_channels, *kernel, *kernel];
                    params.insert(format!("{name}.weight"), kaiming_uniform(&shape, fan_in, &mut rng));
                    params.insert(format!("{name}.bias"), Tensor::zeros(&[*out_channels]));
                }
                LayerSpec::Dense {
                    name,
                    in_features,
                    out_features,
                } => {
                    let shape = [*out_features, *in_features];
                    params.insert(format!("{name}.weight"), kaiming_uniform(&shape, *in_features, &mut rng));
                    params.insert(format!("{name}.bias"), Tensor::zeros(&[*out_features]));
                }
                LayerSpec::Norm { name, channels, .. } => {
                    norm_states.insert(
                        name.clone(),
                        NormState::with_hyper(*channels, T::lit(hyper.epsilon), T::lit(hyper.momentum)),
                    );
                }
                _ => {}
            }
        }
        Ok(Self {
            topology,
            params,
            norm_states,
            tape: None,
        })
    }

    /// Names of all trainable tensors in a stable order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.topology.layers {
            match layer {
                LayerSpec::Conv { name, .. } | LayerSpec::Dense { name, .. } => {
                    names.push(format!("{name}.weight"));
                    names.push(format!("{name}.bias"));
                }
                LayerSpec::Norm { name, kind, .. } if kind.has_affine() => {
                    names.push(format!("{name}.gamma"));
                    names.push(format!("{name}.beta"));
                }
                _ => {}
            }
        }
        names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        if let Some(p) = self.params.get(name) {
            return Some(p);
        }
        let (layer, field) = name.rsplit_once('.')?;
        let st = self.norm_states.get(layer)?;
        match field {
            "gamma" => Some(&st.gamma),
            "beta" => Some(&st.beta),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.trainable_names().iter().map(|n| self.param(n).map_or(0, Tensor::len)).sum()
    }

    /// Runs the network in `mode`, recording the backward cache. In train
    /// mode, batch-statistics layers fold their batch moments into the
    /// running estimates.
    pub fn forward(&mut self, inputs: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (logits, tape) = self.run(inputs, mode, None)?;
        if mode == Mode::Train {
            for (layer, step) in self.topology.layers.iter().zip(&tape.steps) {
                if let (LayerSpec::Norm { name, kind, .. }, Step::Norm(cache)) = (layer, step) {
                    if let (true, Some((mean, var))) = (kind.uses_running_stats(), cache.batch_stats()) {
                        let st = &mut self.norm_states[name.as_str()];
                        let m = st.momentum;
                        update_running_stats(st, mean, var, m)?;
                    }
                }
            }
        }
        self.tape = Some(tape);
        Ok(logits)
    }

    /// Eval-mode logits; a pure function of parameters, statistics and input.
    pub fn predict(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(inputs, Mode::Eval, None)?.0)
    }

    /// Forward pass without touching any state, capturing every norm layer's
    /// input and output.
    pub fn forward_probe(&self, inputs: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<NormProbe<T>>)> {
        let mut probes = Vec::new();
        let (logits, _) = self.run(inputs, mode, Some(&mut probes))?;
        Ok((logits, probes))
    }

    fn check_input(&self, inputs: &Tensor<T>) -> Result<()> {
        if inputs.rank() != self.topology.input_shape.len() + 1 || inputs.shape()[1..] != self.topology.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                left: inputs.shape().to_vec(),
                right: self.topology.input_shape.clone(),
            });
        }
        Ok(())
    }

    fn run(
        &self,
        inputs: &Tensor<T>,
        mode: Mode,
        mut probes: Option<&mut Vec<NormProbe<T>>>,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(inputs)?;
        let mut x = inputs.clone();
        let mut steps = Vec::with_capacity(self.topology.layers.len());
        let mut shortcuts: Vec<Tensor<T>> = Vec::new();
        for layer in &self.topology.layers {
            match layer {
                LayerSpec::Conv { name, padding, .. } => {
                    let (y, c) = conv2d_forward(
                        &x,
                        &self.params[&format!("{name}.weight")],
                        &self.params[&format!("{name}.bias")],
                        *padding,
                    )?;
                    x = y;
                    steps.push(Step::Conv(c));
                }
                LayerSpec::Dense { name, .. } => {
                    let (y, c) = dense_forward(
                        &x,
                        &self.params[&format!("{name}.weight")],
                        &self.params[&format!("{name}.bias")],
                    )?;
                    x = y;
                    steps.push(Step::Dense(c));
                }
                LayerSpec::Norm { name, kind, .. } => {
                    let (y, c) = norm_forward(&x, &self.norm_states[name.as_str()], *kind, mode)?;
                    if let Some(p) = probes.as_deref_mut() {
                        p.push(NormProbe {
                            name: name.clone(),
                            kind: *kind,
                            input: x.clone(),
                            output: y.clone(),
                        });
                    }
                    x = y;
                    steps.push(Step::Norm(c));
                }
                LayerSpec::Relu => {
                    let (y, c) = relu(&x);
                    x = y;
                    steps.push(Step::Relu(c));
                }
                LayerSpec::Flatten => {
                    let shape = x.shape().to_vec();
                    let n = shape[0];
                    let rest = x.row_len();
                    x = x.reshape(&[n, rest])?;
                    steps.push(Step::Flatten(shape));
                }
                LayerSpec::ResidualBegin => {
                    shortcuts.push(x.clone());
                    steps.push(Step::ResidualBegin);
                }
                LayerSpec::ResidualAdd => {
                    let s = shortcuts.pop().ok_or(Error::InvalidArgument("unbalanced residual".into()))?;
                    x.axpy(T::one(), &s)?;
                    steps.push(Step::ResidualAdd);
                }
            }
        }
        Ok((x, Tape { mode, steps }))
    }

    /// Backpropagates `dlogits` through the pass recorded by the last
    /// [`forward`](Self::forward). The cache is consumed.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<LayerGradients<T>> {
        let tape = self.tape.take().ok_or(Error::MissingCache("model_backward"))?;
        let mut g = dlogits.clone();
        let mut raw: Vec<(String, Tensor<T>)> = Vec::new();
        let mut shortcut_grads: Vec<Tensor<T>> = Vec::new();
        for (layer, step) in self.topology.layers.iter().zip(tape.steps.iter()).rev() {
            match (layer, step) {
                (LayerSpec::Conv { name, .. }, Step::Conv(c)) => {
                    let grads = conv2d_backward(&g, Some(c), &self.params[&format!("{name}.weight")])?;
                    raw.push((format!("{name}.weight"), grads.dk));
                    raw.push((format!("{name}.bias"), grads.db));
                    g = grads.dx;
                }
                (LayerSpec::Dense { name, .. }, Step::Dense(c)) => {
                    let grads = dense_backward(&g, Some(c), &self.params[&format!("{name}.weight")])?;
                    raw.push((format!("{name}.weight"), grads.dw));
                    raw.push((format!("{name}.bias"), grads.db));
                    g = grads.dx;
                }
                (LayerSpec::Norm { name, kind, .. }, Step::Norm(c)) => {
                    let grads = norm_backward(&g, Some(c), tape.mode)?;
                    if kind.has_affine() {
                        raw.push((format!("{name}.gamma"), grads.dgamma));
                        raw.push((format!("{name}.beta"), grads.dbeta));
                    }
                    g = grads.dx;
                }
                (LayerSpec::Relu, Step::Relu(c)) => g = relu_backward(&g, Some(c))?,
                (LayerSpec::Flatten, Step::Flatten(shape)) => g = g.reshape(shape)?,
                (LayerSpec::ResidualAdd, Step::ResidualAdd) => shortcut_grads.push(g.clone()),
                (LayerSpec::ResidualBegin, Step::ResidualBegin) => {
                    let s = shortcut_grads.pop().ok_or(Error::InvalidArgument("unbalanced residual".into()))?;
                    g.axpy(T::one(), &s)?;
                }
                _ => return Err(Error::InvalidArgument("forward cache does not match topology".into())),
            }
        }
        let mut map: IndexMap<String, Tensor<T>> = raw.into_iter().collect();
        let mut out = LayerGradients::new();
        for name in self.trainable_names() {
            if let Some(t) = map.shift_remove(&name) {
                out.insert(name, t);
            }
        }
        Ok(out)
    }

    /// Train-mode forward, mean cross-entropy and full backward.
    pub fn loss_and_grads(&mut self, batch: &Batch<T>) -> Result<(T, LayerGradients<T>)> {
        let logits = self.forward(&batch.inputs, Mode::Train)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.labels)?;
        let grads = self.backward(&dlogits)?;
        Ok((loss, grads))
    }

    /// Train-mode loss without touching running statistics or the cache.
    pub fn train_loss(&self, batch: &Batch<T>) -> Result<T> {
        let (logits, _) = self.run(&batch.inputs, Mode::Train, None)?;
        Ok(softmax_cross_entropy(&logits, &batch.labels)?.0)
    }

    pub fn same_topology(&self, other: &Self) -> Result<()> {
        if self.topology != other.topology {
            return Err(Error::TopologyMismatch(format!(
                "{} layers vs {} layers",
                self.topology.layers.len(),
                other.topology.layers.len()
            )));
        }
        Ok(())
    }

    /// `sum_i w_i * model_i` over parameters, affine norm parameters and
    /// running statistics. Hyperparameters are taken from the first model.
    /// Terms are reduced in the order given.
    pub fn linear_combination(terms: &[(T, &Self)]) -> Result<Self> {
        let (_, first) = *terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty linear combination".into()))?;
        for (_, m) in &terms[1..] {
            first.same_topology(m)?;
        }
        let mut out = first.clone();
        for (name, p) in out.params.iter_mut() {
            p.data_mut().fill(T::zero());
            for (w, m) in terms {
                p.axpy(*w, &m.params[name.as_str()])?;
            }
        }
        for (name, st) in out.norm_states.iter_mut() {
            for t in [&mut st.gamma, &mut st.beta, &mut st.running_mean, &mut st.running_var] {
                t.data_mut().fill(T::zero());
            }
            for (w, m) in terms {
                let other = &m.norm_states[name.as_str()];
                st.gamma.axpy(*w, &other.gamma)?;
                st.beta.axpy(*w, &other.beta)?;
                st.running_mean.axpy(*w, &other.running_mean)?;
                st.running_var.axpy(*w, &other.running_var)?;
            }
        }
        Ok(out)
    }

    /// L2 norm of every conv/dense weight tensor, in layer order.
    pub fn weight_norms(&self) -> IndexMap<String, f64> {
        self.params
            .iter()
            .filter(|(n, _)| n.ends_with(".weight"))
            .map(|(n, p)| (n.clone(), p.l2_norm().as_f64()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Builders

/// Table-style CNN: conv5x5 C-6, norm, conv5x5 6-16, norm, FC-120, norm,
/// FC-84, FC-classes. ReLU follows every norm slot and FC-84. No pooling.
///
/// Instance normalization has no meaning on the 120-feature dense slot, so
/// that slot uses layer normalization when `kind` is `Instance`.
pub fn cnn_topology(kind: NormKind, input_shape: &[usize], num_classes: usize) -> Result<Topology> {
    if input_shape.len() != 3 || input_shape[1] < 13 || input_shape[2] < 13 {
        return Err(Error::InvalidShape {
            shape: input_shape.to_vec(),
            reason: "CNN input must be C x H x W with H, W >= 13".into(),
        });
    }
    let flat = 16 * (input_shape[1] - 8) * (input_shape[2] - 8);
    let dense_kind = if kind == NormKind::Instance { NormKind::Layer } else { kind };
    let topo = Topology {
        input_shape: input_shape.to_vec(),
        num_classes,
        layers: vec![
            conv("conv1", input_shape[0], 6, 0),
            norm("norm1", 6, kind),
            LayerSpec::Relu,
            conv("conv2", 6, 16, 0),
            norm("norm2", 16, kind),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            dense("fc1", flat, 120),
            norm("norm3", 120, dense_kind),
            LayerSpec::Relu,
            dense("fc2", 120, 84),
            LayerSpec::Relu,
            dense("fc3", 84, num_classes),
        ],
    };
    topo.validate()?;
    Ok(topo)
}

pub fn build_cnn<T: Scalar>(kind: NormKind, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<ModelState<T>> {
    ModelState::init(cnn_topology(kind, input_shape, num_classes)?, seed, NormHyper::default())
}

const RESNET_WIDTH: usize = 8;

/// Stem conv + two shape-preserving residual blocks + linear head.
pub fn miniresnet_topology(kind: NormKind, input_shape: &[usize], num_classes: usize) -> Result<Topology> {
    if input_shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape: input_shape.to_vec(),
            reason: "mini-resnet input must be C x H x W".into(),
        });
    }
    let w = RESNET_WIDTH;
    let mut layers = vec![conv("stem", input_shape[0], w, 2), norm("stem_norm", w, kind), LayerSpec::Relu];
    for b in 1..=2 {
        layers.extend([
            LayerSpec::ResidualBegin,
            conv(&format!("block{b}a"), w, w, 2),
            norm(&format!("block{b}a_norm"), w, kind),
            LayerSpec::Relu,
            conv(&format!("block{b}b"), w, w, 2),
            norm(&format!("block{b}b_norm"), w, kind),
            LayerSpec::ResidualAdd,
            LayerSpec::Relu,
        ]);
    }
    layers.extend([
        LayerSpec::Flatten,
        dense("head", w * input_shape[1] * input_shape[2], num_classes),
    ]);
    let topo = Topology {
        input_shape: input_shape.to_vec(),
        num_classes,
        layers,
    };
    topo.validate()?;
    Ok(topo)
}

pub fn build_miniresnet<T: Scalar>(
    kind: NormKind,
    input_shape: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<ModelState<T>> {
    ModelState::init(miniresnet_topology(kind, input_shape, num_classes)?, seed, NormHyper::default())
}

/// Three single-channel 5x5 convolutions (zero padding `padding`), each
/// followed by batch normalization and ReLU, then a linear classifier.
pub fn toy_shift_topology(input_shape: &[usize], num_classes: usize, padding: usize) -> Result<Topology> {
    let shrink = |side: usize| (side + 6 * padding).checked_sub(12).filter(|&s| s > 0);
    let out = match input_shape {
        [_, h, w] if padding <= 4 => shrink(*h).zip(shrink(*w)),
        _ => None,
    };
    let Some((oh, ow)) = out else {
        return Err(Error::InvalidShape {
            shape: input_shape.to_vec(),
            reason: format!("toy model needs C x H x W input that survives three 5x5 convolutions with padding {padding} (at most 4)"),
        });
    };
    let mut layers = Vec::new();
    let mut c = input_shape[0];
    for i in 1..=3 {
        layers.push(conv(&format!("conv{i}"), c, 1, padding));
        layers.push(norm(&format!("norm{i}"), 1, NormKind::Batch));
        layers.push(LayerSpec::Relu);
        c = 1;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(dense("fc", oh * ow, num_classes));
    let topo = Topology {
        input_shape: input_shape.to_vec(),
        num_classes,
        layers,
    };
    topo.validate()?;
    Ok(topo)
}

fn conv(name: &str, in_channels: usize, out_channels: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv {
        name: name.into(),
        in_channels,
        out_channels,
        kernel: 5,
        padding,
    }
}

fn dense(name: &str, in_features: usize, out_features: usize) -> LayerSpec {
    LayerSpec::Dense {
        name: name.into(),
        in_features,
        out_features,
    }
}

fn norm(name: &str, channels: usize, kind: NormKind) -> LayerSpec {
    LayerSpec::Norm {
        name: name.into(),
        channels,
        kind,
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

pub const GRAD_CHECK_MAX_COORDS: usize = 200;
/// Gradient magnitudes below this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU, where central
    /// differences do not estimate the derivative.
    pub skipped_kinks: usize,
}

/// Compares the analytic gradient of the train-mode loss on `batch` with
/// central finite differences of step `epsilon`.
pub fn grad_check<T: Scalar>(model: &ModelState<T>, batch: &Batch<T>, epsilon: f64) -> Result<GradCheckReport> {
    let mut m = model.clone();
    let (_, grads) = m.loss_and_grads(batch)?;
    compare_gradients(model, batch, &grads, epsilon, 0)
}

/// Checks a supplied gradient (e.g. a deliberately corrupted one) against
/// finite differences on at most [`GRAD_CHECK_MAX_COORDS`] coordinates per
/// parameter.
pub fn compare_gradients<T: Scalar>(
    model: &ModelState<T>,
    batch: &Batch<T>,
    grads: &LayerGradients<T>,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, base_tape) = model.run(&batch.inputs, Mode::Train, None)?;
    let base_pattern: Vec<&ReluCache> = base_tape.relu_pattern().collect();
    let same_pattern = |tape: &Tape<T>| {
        tape.relu_pattern()
            .zip(&base_pattern)
            .all(|(a, b)| a.active_mask() == b.active_mask())
    };
    let loss_at = |m: &ModelState<T>| -> Result<(f64, bool)> {
        let (logits, tape) = m.run(&batch.inputs, Mode::Train, None)?;
        let loss = softmax_cross_entropy(&logits, &batch.labels)?.0.as_f64();
        Ok((loss, same_pattern(&tape)))
    };
    let mut scratch = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    let h = T::lit(epsilon);
    for name in model.trainable_names() {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {name}")))?;
        let len = analytic.len();
        let coords: Vec<usize> = if len <= GRAD_CHECK_MAX_COORDS {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, GRAD_CHECK_MAX_COORDS).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = scratch.param(&name).expect("trainable").data()[i];
            scratch.param_mut(&name).expect("trainable").data_mut()[i] = orig + h;
            let (up, up_ok) = loss_at(&scratch)?;
            scratch.param_mut(&name).expect("trainable").data_mut()[i] = orig - h;
            let (down, down_ok) = loss_at(&scratch)?;
            scratch.param_mut(&name).expect("trainable").data_mut()[i] = orig;
            if !(up_ok && down_ok) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.data()[i].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sgd_step;

    fn random_batch(shape: &[usize], classes: usize, seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0));
        let labels = (0..shape[0]).map(|_| rng.gen_range(0..classes)).collect();
        Batch::new(x, labels, classes).unwrap()
    }

    #[test]
    fn cnn_parameter_count_without_norm() {
        // 5*5*3*6+6, 5*5*6*16+16, 16*24*24*120+120, 120*84+84, 84*10+10
        let expected = 456 + 2_416 + (9_216 * 120 + 120) + (120 * 84 + 84) + (84 * 10 + 10);
        assert_eq!(expected, 1_119_926);
        let m = build_cnn::<f64>(NormKind::None, &[3, 32, 32], 10, 0).unwrap();
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn batch_norm_adds_affine_params() {
        let none = build_cnn::<f64>(NormKind::None, &[3, 32, 32], 10, 0).unwrap();
        let bn = build_cnn::<f64>(NormKind::Batch, &[3, 32, 32], 10, 0).unwrap();
        assert_eq!(bn.param_count() - none.param_count(), 2 * (6 + 16 + 120));
        let sizes: Vec<usize> = bn.norm_states.values().map(|s| s.running_mean.len()).collect();
        assert_eq!(sizes, vec![6, 16, 120]);
    }

    #[test]
    fn group_count_checked_at_build() {
        assert!(build_cnn::<f64>(NormKind::Group(4), &[3, 32, 32], 10, 0).is_err());
        assert!(build_cnn::<f64>(NormKind::Group(3), &[3, 32, 32], 10, 0).is_err()); // 16 channels
        assert!(build_cnn::<f64>(NormKind::Group(2), &[3, 32, 32], 10, 0).is_ok());
        assert!(build_cnn::<f64>(NormKind::None, &[3, 12, 32], 10, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_cnn::<f64>(NormKind::Layer, &[3, 16, 16], 10, 42).unwrap();
        let b = build_cnn::<f64>(NormKind::Layer, &[3, 16, 16], 10, 42).unwrap();
        let c = build_cnn::<f64>(NormKind::Layer, &[3, 16, 16], 10, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let r1 = build_miniresnet::<f64>(NormKind::Batch, &[3, 8, 8], 10, 1).unwrap();
        let r2 = build_miniresnet::<f64>(NormKind::Batch, &[3, 8, 8], 10, 1).unwrap();
        assert_eq!(r1, r2);
        assert!(build_miniresnet::<f64>(NormKind::Batch, &[3, 32, 32], 10, 1).unwrap().param_count() < 500_000);
    }

    #[test]
    fn zero_input_gives_uniform_loss() {
        let mut m = build_cnn::<f64>(NormKind::None, &[3, 16, 16], 10, 3).unwrap();
        let batch = Batch::new(Tensor::zeros(&[4, 3, 16, 16]), vec![0, 1, 2, 3], 10).unwrap();
        let logits = m.forward(&batch.inputs, Mode::Train).unwrap();
        assert_eq!(logits.max_abs(), 0.0);
        let (loss, _) = m.loss_and_grads(&batch).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_pure() {
        let mut m = build_cnn::<f64>(NormKind::Batch, &[3, 16, 16], 10, 3).unwrap();
        let batch = random_batch(&[4, 3, 16, 16], 10, 1);
        m.forward(&batch.inputs, Mode::Train).unwrap();
        let before = m.clone();
        let a = m.forward(&batch.inputs, Mode::Eval).unwrap();
        let b = m.forward(&batch.inputs, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
        assert_eq!(m.predict(&batch.inputs).unwrap(), a);
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = build_cnn::<f64>(NormKind::Layer, &[3, 16, 16], 10, 3).unwrap();
        assert!(matches!(m.backward(&Tensor::zeros(&[2, 10])), Err(Error::MissingCache(_))));
    }

    #[test]
    fn train_forward_updates_only_batch_stats() {
        let batch = random_batch(&[4, 3, 16, 16], 10, 2);
        for kind in [NormKind::Batch, NormKind::FixedBatch, NormKind::Layer] {
            let mut m = build_cnn::<f64>(kind, &[3, 16, 16], 10, 3).unwrap();
            let init = m.clone();
            m.forward(&batch.inputs, Mode::Train).unwrap();
            assert_eq!(m.norm_states != init.norm_states, kind.uses_running_stats(), "{kind}");
        }
    }

    #[test]
    fn cnn_grad_check_all_kinds() {
        let batch = random_batch(&[2, 3, 14, 14], 10, 5);
        for kind in [NormKind::None, NormKind::Layer, NormKind::Group(2), NormKind::Instance] {
            let m = build_cnn::<f64>(kind, &[3, 14, 14], 10, 9).unwrap();
            let r = grad_check(&m, &batch, 1e-4).unwrap();
            assert!(r.max_relative_error < 1e-3, "{kind}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    /// Two-sample batch statistics on the 120-wide dense slot put some
    /// features within a few sqrt(eps) of the degenerate point, where a
    /// 1e-4 central difference is dominated by truncation error. Four
    /// samples keep the batch-normalized network well conditioned.
    #[test]
    fn cnn_grad_check_batch_norm() {
        let batch = random_batch(&[4, 3, 14, 14], 10, 5);
        for kind in [NormKind::Batch, NormKind::FixedBatch] {
            let m = build_cnn::<f64>(kind, &[3, 14, 14], 10, 9).unwrap();
            let r = grad_check(&m, &batch, 1e-4).unwrap();
            assert!(r.max_relative_error < 1e-3, "{kind}: {r:?}");
        }
    }

    #[test]
    fn miniresnet_grad_check() {
        let batch = random_batch(&[2, 3, 6, 6], 10, 6);
        for kind in [NormKind::None, NormKind::Batch, NormKind::Layer] {
            let m = build_miniresnet::<f64>(kind, &[3, 6, 6], 10, 4).unwrap();
            let r = grad_check(&m, &batch, 1e-4).unwrap();
            assert!(r.max_relative_error < 1e-3, "{kind}: {r:?}");
        }
    }

    fn zero_second_convs(m: &mut ModelState<f64>) {
        for b in 1..=2 {
            m.params[format!("block{b}b.weight").as_str()].data_mut().fill(0.0);
        }
    }

    #[test]
    fn zeroed_residual_branches_are_identity() {
        let batch = random_batch(&[3, 3, 6, 6], 10, 7);
        for kind in [NormKind::Batch, NormKind::Layer, NormKind::None] {
            let mut m = build_miniresnet::<f64>(kind, &[3, 6, 6], 10, 8).unwrap();
            zero_second_convs(&mut m);
            let (logits, _) = m.run(&batch.inputs, Mode::Train, None).unwrap();
            // stem + head alone
            let topo = &m.topology;
            let keep: Vec<LayerSpec> = topo
                .layers
                .iter()
                .take(3)
                .chain(topo.layers.iter().skip(topo.layers.len() - 2))
                .cloned()
                .collect();
            let short = Topology {
                input_shape: topo.input_shape.clone(),
                num_classes: 10,
                layers: keep,
            };
            let mut s = ModelState::<f64>::init(short, 0, NormHyper::default()).unwrap();
            for name in s.trainable_names() {
                *s.param_mut(&name).unwrap() = m.param(&name).unwrap().clone();
            }
            let (want, _) = s.run(&batch.inputs, Mode::Train, None).unwrap();
            assert!(logits.max_abs_diff(&want).unwrap() <= 1e-12, "{kind}");
        }
    }

    #[test]
    fn linear_combination_of_replicas() {
        let a = build_cnn::<f64>(NormKind::Batch, &[3, 14, 14], 10, 1).unwrap();
        let b = build_cnn::<f64>(NormKind::Batch, &[3, 14, 14], 10, 2).unwrap();
        let c = ModelState::linear_combination(&[(0.5, &a), (0.5, &b)]).unwrap();
        let w = &c.params["conv1.weight"];
        let expect = a.params["conv1.weight"].add(&b.params["conv1.weight"]).unwrap().scale(0.5);
        assert!(w.max_abs_diff(&expect).unwrap() < 1e-15);
        c.topology.validate().unwrap();
        let other = build_cnn::<f64>(NormKind::Layer, &[3, 14, 14], 10, 2).unwrap();
        assert!(matches!(
            ModelState::linear_combination(&[(0.5, &a), (0.5, &other)]),
            Err(Error::TopologyMismatch(_))
        ));
    }

    #[test]
    fn sgd_reaches_norm_params_through_store() {
        let mut m = build_cnn::<f64>(NormKind::Layer, &[3, 14, 14], 10, 1).unwrap();
        let batch = random_batch(&[2, 3, 14, 14], 10, 3);
        let (_, g) = m.loss_and_grads(&batch).unwrap();
        let before = m.clone();
        sgd_step(&mut m, &g, 0.1).unwrap();
        let moved = m.norm_states["norm1"].beta.max_abs_diff(&before.norm_states["norm1"].beta).unwrap();
        assert!(moved > 0.0);
    }

    #[test]
    fn single_dense_grad_check_and_fault_detection() {
        let topo = Topology {
            input_shape: vec![6],
            num_classes: 4,
            layers: vec![dense("fc", 6, 4)],
        };
        let m = ModelState::<f64>::init(topo, 3, NormHyper::default()).unwrap();
        let batch = random_batch(&[5, 6], 4, 9);
        let r = grad_check(&m, &batch, 1e-4).unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");

        let mut mm = m.clone();
        let (_, mut g) = mm.loss_and_grads(&batch).unwrap();
        let w = g.grads.get_mut("fc.weight").unwrap();
        let (idx, _) = w
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        w.data_mut()[idx] *= 2.0;
        let r = compare_gradients(&m, &batch, &g, 1e-4, 0).unwrap();
        assert!(r.max_relative_error > 0.1, "{r:?}");
    }

    #[test]
    fn topology_rejects_norm_without_activation() {
        let topo = Topology {
            input_shape: vec![4],
            num_classes: 4,
            layers: vec![dense("fc", 4, 4), norm("n", 4, NormKind::Layer)],
        };
        assert!(topo.validate().is_err());
    }
}
