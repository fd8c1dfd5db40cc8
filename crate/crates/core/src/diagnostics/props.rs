//! Numerical checks of the scale-invariance identities of normalized
//! layers, and a randomized suite that runs all of them.
//!
//! The identities hold exactly only without the variance floor, so every
//! check here normalizes with epsilon = 0.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{aggregate, LocalUpdate};
use crate::model::{grad_check, LayerSpec, ModelState, NormHyper, Topology};
use crate::nn::{dense_backward, dense_forward, Batch, DenseCache};
use crate::norm::{norm_backward, norm_forward, Mode, NormCache, NormKind, NormState, DEFAULT_MOMENTUM};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

pub const SCALES: [f64; 4] = [0.1, 0.5, 2.0, 10.0];

fn exact_state<T: Scalar>(channels: usize) -> NormState<T> {
    NormState::with_hyper(channels, T::zero(), T::lit(DEFAULT_MOMENTUM))
}

fn dense_norm<T: Scalar>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    kind: NormKind,
) -> Result<(Tensor<T>, DenseCache<T>, NormCache<T>)> {
    let (z, dc) = dense_forward(h, w, b)?;
    let (y, nc) = norm_forward(&z, &exact_state(w.dim(0)), kind, Mode::Train)?;
    Ok((y, dc, nc))
}

/// `|norm(dense(h, aW, ab)) - norm(dense(h, W, b))|_inf` in train mode.
pub fn verify_scale_invariance<T: Scalar>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    a: f64,
    kind: NormKind,
) -> Result<f64> {
    let (y, _, _) = dense_norm(h, w, b, kind)?;
    let (ya, _, _) = dense_norm(h, &w.scale(T::lit(a)), &b.scale(T::lit(a)), kind)?;
    Ok(y.max_abs_diff(&ya)?.as_f64())
}

/// `L(y) = sum c y + 1/2 sum d y^2`, a random smooth loss on layer outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticLoss<T> {
    pub c: Tensor<T>,
    pub d: Tensor<T>,
}

impl<T: Scalar> QuadraticLoss<T> {
    pub fn random(shape: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            c: Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-1.0..1.0))),
            d: Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-1.0..1.0))),
        }
    }

    pub fn value_grad(&self, y: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        y.same_shape(&self.c, "quadratic loss")?;
        let half = T::lit(0.5);
        let mut value = T::zero();
        let mut grad = Vec::with_capacity(y.len());
        for ((&v, &c), &d) in y.data().iter().zip(self.c.data()).zip(self.d.data()) {
            value += c * v + half * d * v * v;
            grad.push(c + d * v);
        }
        Ok((value, Tensor::new(y.shape().to_vec(), grad)?))
    }
}

/// Gradient of `loss(norm(dense(h, W, b)))` with respect to `W` and `b`.
pub fn dense_norm_gradients<T: Scalar>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    kind: NormKind,
    loss: &QuadraticLoss<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (y, dc, nc) = dense_norm(h, w, b, kind)?;
    let (_, dy) = loss.value_grad(&y)?;
    let ng = norm_backward(&dy, Some(&nc), Mode::Train)?;
    let dg = dense_backward(&ng.dx, Some(&dc), w)?;
    Ok((dg.dw, dg.db))
}

fn max_abs_all<T: Scalar>(ts: &[&Tensor<T>]) -> f64 {
    ts.iter().map(|t| t.max_abs().as_f64()).fold(0.0, f64::max)
}

/// Relative error of `grad(aW, ab)` against `grad(W, b) / a`, taken jointly
/// over `W` and `b`.
pub fn verify_gradient_scaling<T: Scalar>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    a: f64,
    kind: NormKind,
    loss: &QuadraticLoss<T>,
) -> Result<f64> {
    let (dw, db) = dense_norm_gradients(h, w, b, kind, loss)?;
    let (dwa, dba) = dense_norm_gradients(h, &w.scale(T::lit(a)), &b.scale(T::lit(a)), kind, loss)?;
    let inv = T::lit(1.0 / a);
    let (ew, eb) = (dw.scale(inv), db.scale(inv));
    let err = ew.max_abs_diff(&dwa)?.as_f64().max(eb.max_abs_diff(&dba)?.as_f64());
    let scale = max_abs_all(&[&ew, &eb]);
    Ok(if scale == 0.0 { err } else { err / scale })
}

/// `<W, grad W> / (|W| |grad W|)` over the concatenation of the given
/// tensors; 0 when either side vanishes.
pub fn verify_orthogonality<T: Scalar>(params: &[&Tensor<T>], grads: &[&Tensor<T>]) -> Result<f64> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument("orthogonality needs one gradient per parameter".into()));
    }
    let (mut dot, mut pp, mut gg) = (0.0, 0.0, 0.0);
    for (p, g) in params.iter().zip(grads) {
        dot += p.dot(g)?.as_f64();
        pp += p.squared_norm().as_f64();
        gg += g.squared_norm().as_f64();
    }
    if pp == 0.0 || gg == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (pp.sqrt() * gg.sqrt()))
}

/// Max relative error between analytic and central-difference gradients of
/// `loss(norm(dense(h, W, b)))` over every coordinate of `W` and `b`.
/// Components below 1e-4 of the largest one are measured against that floor.
pub fn dense_norm_fd_error(
    h: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    kind: NormKind,
    loss: &QuadraticLoss<f64>,
    step: f64,
) -> Result<f64> {
    let (dw, db) = dense_norm_gradients(h, w, b, kind, loss)?;
    let value = |w: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
        let (y, _, _) = dense_norm(h, w, b, kind)?;
        Ok(loss.value_grad(&y)?.0)
    };
    // the bias gradient under batch statistics is exactly zero, so finite
    // differences there return pure rounding noise
    let floor = 1e-4 * max_abs_all(&[&dw, &db]).max(1e-12);
    let mut worst = 0.0f64;
    let (mut wp, mut bp) = (w.clone(), b.clone());
    for which in 0..2 {
        let len = if which == 0 { w.len() } else { b.len() };
        for i in 0..len {
            let slot = |wp: &mut Tensor<f64>, bp: &mut Tensor<f64>, v: f64| {
                if which == 0 {
                    wp.data_mut()[i] = v;
                } else {
                    bp.data_mut()[i] = v;
                }
            };
            let orig = if which == 0 { w.data()[i] } else { b.data()[i] };
            slot(&mut wp, &mut bp, orig + step);
            let up = value(&wp, &bp)?;
            slot(&mut wp, &mut bp, orig - step);
            let down = value(&wp, &bp)?;
            slot(&mut wp, &mut bp, orig);
            let numeric = (up - down) / (2.0 * step);
            let analytic = if which == 0 { dw.data()[i] } else { db.data()[i] };
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Residuals of `|W_{t+1}|^2 = |W_t|^2 + eta^2 |g_t|^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceResidual {
    /// max over steps of the residual relative to `|W_{t+1}|^2`
    pub per_step: f64,
    /// `|W_T|^2 - |W_0|^2 - eta^2 sum |g_t|^2` relative to `|W_T|^2`
    pub telescoped: f64,
}

/// `weights` holds `W_0..W_T`, `grads` holds `g_0..g_{T-1}`; each entry is
/// the flattened scale-invariant parameter.
pub fn verify_norm_recurrence(weights: &[Vec<f64>], grads: &[Vec<f64>], eta: f64) -> Result<RecurrenceResidual> {
    if weights.len() != grads.len() + 1 || grads.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "trajectory needs T+1 weights for T >= 1 gradients, got {} and {}",
            weights.len(),
            grads.len()
        )));
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let rel = |r: f64, d: f64| if d == 0.0 { r.abs() } else { r.abs() / d };
    let mut per_step = 0.0f64;
    let mut sum_g = 0.0;
    for t in 0..grads.len() {
        let g = eta * eta * sq(&grads[t]);
        sum_g += g;
        let next = sq(&weights[t + 1]);
        per_step = per_step.max(rel(next - sq(&weights[t]) - g, next));
    }
    let last = sq(&weights[grads.len()]);
    Ok(RecurrenceResidual {
        per_step,
        telescoped: rel(last - sq(&weights[0]) - sum_g, last),
    })
}

/// Plain SGD on `(W, b)` of a dense layer followed by `kind` normalization
/// under a fixed loss. Returns the joint parameter and gradient trajectory.
pub fn sgd_trajectory<T: Scalar>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    kind: NormKind,
    loss: &QuadraticLoss<T>,
    eta: f64,
    steps: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let flat = |a: &Tensor<T>, b: &Tensor<T>| a.data().iter().chain(b.data()).map(|v| v.as_f64()).collect::<Vec<_>>();
    let (mut w, mut b) = (w.clone(), b.clone());
    let mut weights = vec![flat(&w, &b)];
    let mut grads = Vec::with_capacity(steps);
    let lr = T::lit(-eta);
    for _ in 0..steps {
        let (dw, db) = dense_norm_gradients(h, &w, &b, kind, loss)?;
        grads.push(flat(&dw, &db));
        w.axpy(lr, &dw)?;
        b.axpy(lr, &db)?;
        weights.push(flat(&w, &b));
    }
    Ok((weights, grads))
}

/// Relative gap between the empirical std of `w . x` over `samples` draws
/// of whitened `x ~ N(0, I)` and `|w|_2`.
pub fn verify_whitened_std(w: &[f64], samples: usize, seed_: u64) -> Result<f64> {
    if w.is_empty() || samples < 2 {
        return Err(Error::InvalidArgument("need a non-empty weight and at least two samples".into()));
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("zero weight vector".into()));
    }
    let mut rng = seed::rng(seed_);
    let ys: Vec<f64> = (0..samples)
        .map(|_| {
            w.iter()
                .map(|wi| wi * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .sum()
        })
        .collect();
    let (_, std) = crate::diagnostics::shift::mean_std(&ys);
    Ok((std - norm).abs() / norm)
}

// ---------------------------------------------------------------------------
// Randomized suite

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub trials: usize,
    /// Worst observed value of the checked quantity (for controls, the
    /// fraction of trials that violated the identity).
    pub worst: f64,
    pub bound: f64,
    pub passed: bool,
}

impl PropertyOutcome {
    fn upper(name: &str, trials: usize, worst: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            trials,
            worst,
            bound,
            passed: worst <= bound,
        }
    }

    fn lower(name: &str, trials: usize, fraction: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            trials,
            worst: fraction,
            bound,
            passed: fraction >= bound,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<34} trials={:<6} value={:<10.3e} bound={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.worst,
            self.bound
        )
    }
}

/// The kinds whose dense output is invariant to a joint `(W, b)` rescale.
pub const INVARIANT_KINDS: [NormKind; 3] = [NormKind::Batch, NormKind::Layer, NormKind::Group(2)];

pub struct Instance {
    pub h: Tensor<f64>,
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
    pub loss: QuadraticLoss<f64>,
}

impl Instance {
    /// Batch 4..=16, input width 2..=8, output width 6, 8 or 12. Narrower
    /// outputs make layer/group normalization of two features degenerate
    /// (the output is a sign and the gradient vanishes).
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(4..=16);
        let d = rng.gen_range(2..=8);
        let k = *[6usize, 8, 12].choose(rng).expect("non-empty");
        let mut normal = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        let h = Tensor::from_fn(&[n, d], |_| normal());
        let w = Tensor::from_fn(&[k, d], |_| normal() / (d as f64).sqrt());
        let b = Tensor::from_fn(&[k], |_| normal() * 0.5);
        let loss = QuadraticLoss::random(&[n, k], rng);
        Self { h, w, b, loss }
    }
}

fn suite_rng(seed_: u64, label: &str) -> ChaCha8Rng {
    seed::rng(seed::derive(seed_, label))
}

pub fn check_scale_invariance(seed_: u64, trials: usize, kinds: &[NormKind]) -> Result<Vec<PropertyOutcome>> {
    let mut rng = suite_rng(seed_, "scale-invariance");
    let (mut worst, mut control_hits, mut controls) = (0.0f64, 0usize, 0usize);
    for _ in 0..trials {
        let x = Instance::random(&mut rng);
        for &a in &SCALES {
            for &kind in kinds {
                worst = worst.max(verify_scale_invariance(&x.h, &x.w, &x.b, a, kind)?);
            }
            controls += 1;
            control_hits += usize::from(verify_scale_invariance(&x.h, &x.w, &x.b, a, NormKind::None)? > 1e-6);
        }
        if verify_scale_invariance(&x.h, &x.w, &x.b, 1.0, NormKind::Batch)? != 0.0 {
            worst = f64::INFINITY;
        }
    }
    Ok(vec![
        PropertyOutcome::upper("scale invariance", trials, worst, 1e-10),
        PropertyOutcome::lower("scale invariance control (none)", trials, ratio(control_hits, controls), 1.0),
    ])
}

pub fn check_gradient_scaling(seed_: u64, trials: usize, kinds: &[NormKind]) -> Result<Vec<PropertyOutcome>> {
    let mut rng = suite_rng(seed_, "gradient-scaling");
    let (mut worst, mut fd, mut control_hits, mut controls) = (0.0f64, 0.0f64, 0usize, 0usize);
    for _ in 0..trials {
        let x = Instance::random(&mut rng);
        for &a in &SCALES {
            for &kind in kinds {
                worst = worst.max(verify_gradient_scaling(&x.h, &x.w, &x.b, a, kind, &x.loss)?);
            }
            controls += 1;
            control_hits +=
                usize::from(verify_gradient_scaling(&x.h, &x.w, &x.b, a, NormKind::None, &x.loss)? > 1e-3);
        }
        let kind = *kinds.choose(&mut rng).expect("kinds");
        fd = fd.max(dense_norm_fd_error(&x.h, &x.w, &x.b, kind, &x.loss, 1e-5)?);
    }
    Ok(vec![
        PropertyOutcome::upper("gradient 1/a scaling", trials, worst, 1e-8),
        PropertyOutcome::lower("gradient scaling control (none)", trials, ratio(control_hits, controls), 0.95),
        PropertyOutcome::upper("finite differences (dense+norm)", trials, fd, 1e-4),
    ])
}

pub fn check_orthogonality(seed_: u64, trials: usize, kinds: &[NormKind]) -> Result<Vec<PropertyOutcome>> {
    let mut rng = suite_rng(seed_, "orthogonality");
    let (mut worst, mut control_hits) = (0.0f64, 0usize);
    for _ in 0..trials {
        let x = Instance::random(&mut rng);
        for &kind in kinds {
            let (dw, db) = dense_norm_gradients(&x.h, &x.w, &x.b, kind, &x.loss)?;
            worst = worst.max(verify_orthogonality(&[&x.w, &x.b], &[&dw, &db])?.abs());
        }
        let (dw, db) = dense_norm_gradients(&x.h, &x.w, &x.b, NormKind::None, &x.loss)?;
        control_hits += usize::from(verify_orthogonality(&[&x.w, &x.b], &[&dw, &db])?.abs() > 1e-3);
    }
    Ok(vec![
        PropertyOutcome::upper("orthogonality |cos(W, dW)|", trials, worst, 1e-8),
        PropertyOutcome::lower("orthogonality control (none)", trials, ratio(control_hits, trials), 0.95),
    ])
}

pub fn check_norm_recurrence(seed_: u64, trials: usize, steps: usize) -> Result<Vec<PropertyOutcome>> {
    let mut rng = suite_rng(seed_, "norm-recurrence");
    let (mut step_worst, mut tele_worst, mut frozen) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let x = Instance::random(&mut rng);
        let kind = *[NormKind::Batch, NormKind::Layer].choose(&mut rng).expect("kinds");
        let eta = rng.gen_range(0.01..0.5);
        let (w, g) = sgd_trajectory(&x.h, &x.w, &x.b, kind, &x.loss, eta, 1)?;
        step_worst = step_worst.max(verify_norm_recurrence(&w, &g, eta)?.per_step);
        let (w, g) = sgd_trajectory(&x.h, &x.w, &x.b, kind, &x.loss, eta, steps)?;
        let r = verify_norm_recurrence(&w, &g, eta)?;
        step_worst = step_worst.max(r.per_step);
        tele_worst = tele_worst.max(r.telescoped);
        let (w, g) = sgd_trajectory(&x.h, &x.w, &x.b, kind, &x.loss, 0.0, 1)?;
        frozen = frozen.max(verify_norm_recurrence(&w, &g, 0.0)?.per_step);
    }
    Ok(vec![
        PropertyOutcome::upper("norm recurrence per step", trials, step_worst, 1e-6),
        PropertyOutcome::upper(&format!("norm recurrence {steps} steps"), trials, tele_worst, 1e-5),
        PropertyOutcome::upper("norm recurrence eta=0", trials, frozen, 0.0),
    ])
}

pub fn check_whitened_std(seed_: u64, trials: usize, samples: usize) -> Result<Vec<PropertyOutcome>> {
    let mut rng = suite_rng(seed_, "whitened-std");
    let mut worst = 0.0f64;
    for t in 0..trials {
        let d = rng.gen_range(2..=10);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        worst = worst.max(verify_whitened_std(&w, samples, seed::derive_indexed(seed_, "whitened-x", &[t as u64]))?);
    }
    Ok(vec![PropertyOutcome::upper("whitened std[Wx] = |W|", trials, worst, 0.05)])
}

/// conv 3x3 (2 -> 4, padding 1), norm, ReLU, dense to 3 classes.
fn tiny_topology(kind: NormKind) -> Topology {
    Topology {
        input_shape: vec![2, 5, 5],
        num_classes: 3,
        layers: vec![
            LayerSpec::Conv {
                name: "conv".into(),
                in_channels: 2,
                out_channels: 4,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Norm {
                name: "norm".into(),
                channels: 4,
                kind,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                name: "fc".into(),
                in_features: 100,
                out_features: 3,
            },
        ],
    }
}

pub const ALL_KINDS: [NormKind; 6] = [
    NormKind::None,
    NormKind::Batch,
    NormKind::FixedBatch,
    NormKind::Layer,
    NormKind::Group(2),
    NormKind::Instance,
];

pub fn check_model_gradients(seed_: u64, trials: usize) -> Result<Vec<PropertyOutcome>> {
    let mut rng = suite_rng(seed_, "grad-check");
    let mut worst = 0.0f64;
    for t in 0..trials {
        for kind in ALL_KINDS {
            let model = ModelState::<f64>::init(tiny_topology(kind), rng.gen(), NormHyper::default())?;
            let x = Tensor::from_fn(&[6, 2, 5, 5], |_| rng.gen_range(-1.0..1.0));
            let labels = (0..6).map(|i| (i + t) % 3).collect();
            let report = grad_check(&model, &Batch::new(x, labels, 3)?, 1e-5)?;
            worst = worst.max(report.max_relative_error);
        }
    }
    Ok(vec![PropertyOutcome::upper("model gradient check (all kinds)", trials, worst, 1e-4)])
}

/// FedAvg against an independent elementwise weighted mean.
pub fn check_aggregation(seed_: u64, trials: usize) -> Result<Vec<PropertyOutcome>> {
    let mut rng = suite_rng(seed_, "aggregation");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let kind = *[NormKind::Batch, NormKind::Layer, NormKind::None].choose(&mut rng).expect("kinds");
        let server = ModelState::<f64>::init(tiny_topology(kind), rng.gen(), NormHyper::default())?;
        let clients = rng.gen_range(1..=6);
        let mut ids: Vec<usize> = (0..20).collect();
        ids.shuffle(&mut rng);
        let locals: Vec<LocalUpdate<f64>> = ids[..clients]
            .iter()
            .map(|&device| {
                let mut m = server.clone();
                for t in m.params.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
                }
                for st in m.norm_states.values_mut() {
                    for t in [&mut st.gamma, &mut st.beta, &mut st.running_mean, &mut st.running_var] {
                        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(0.0..1.0));
                    }
                }
                LocalUpdate {
                    device,
                    model: m,
                    samples: rng.gen_range(1..=50),
                    epoch_losses: vec![],
                }
            })
            .collect();
        let agg = aggregate(&server, &locals)?;
        let total: f64 = locals.iter().map(|l| l.samples as f64).sum();
        let oracle = |pick: &dyn Fn(&ModelState<f64>) -> &Tensor<f64>, got: &Tensor<f64>| -> f64 {
            let mut err = 0.0f64;
            for j in 0..got.len() {
                let mut acc = 0.0;
                for l in &locals {
                    acc += l.samples as f64 * pick(&l.model).data()[j];
                }
                err = err.max((acc / total - got.data()[j]).abs());
            }
            err
        };
        for name in server.params.keys() {
            worst = worst.max(oracle(&|m| &m.params[name.as_str()], &agg.params[name.as_str()]));
        }
        for name in server.norm_states.keys() {
            let st = &agg.norm_states[name.as_str()];
            worst = worst.max(oracle(&|m| &m.norm_states[name.as_str()].gamma, &st.gamma));
            worst = worst.max(oracle(&|m| &m.norm_states[name.as_str()].beta, &st.beta));
            if kind == NormKind::Batch {
                worst = worst.max(oracle(&|m| &m.norm_states[name.as_str()].running_mean, &st.running_mean));
                worst = worst.max(oracle(&|m| &m.norm_states[name.as_str()].running_var, &st.running_var));
            }
        }
    }
    Ok(vec![PropertyOutcome::upper("aggregation vs weighted mean", trials, worst, 1e-12)])
}

fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Every check above with `trials` randomized instances each (the model
/// gradient check, the costliest, runs on at most 25).
pub fn run_property_suite(seed_: u64, trials: usize) -> Result<Vec<PropertyOutcome>> {
    let mut out = check_scale_invariance(seed_, trials, &INVARIANT_KINDS)?;
    out.extend(check_gradient_scaling(seed_, trials, &INVARIANT_KINDS)?);
    out.extend(check_orthogonality(seed_, trials, &INVARIANT_KINDS)?);
    out.extend(check_norm_recurrence(seed_, trials, 100)?);
    out.extend(check_whitened_std(seed_, trials, 10_000)?);
    out.extend(check_model_gradients(seed_, trials.min(25))?);
    out.extend(check_aggregation(seed_, trials)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed() -> Instance {
        Instance::random(&mut seed::rng(11))
    }

    #[test]
    fn unit_scale_is_exact() {
        let x = fixed();
        assert_eq!(verify_scale_invariance(&x.h, &x.w, &x.b, 1.0, NormKind::Batch).unwrap(), 0.0);
        assert_eq!(verify_gradient_scaling(&x.h, &x.w, &x.b, 1.0, NormKind::Layer, &x.loss).unwrap(), 0.0);
    }

    #[test]
    fn no_normalization_breaks_the_identities() {
        let x = fixed();
        let d2 = verify_scale_invariance(&x.h, &x.w, &x.b, 2.0, NormKind::None).unwrap();
        let d3 = verify_scale_invariance(&x.h, &x.w, &x.b, 3.0, NormKind::None).unwrap();
        assert!((d3 / d2 - 2.0).abs() < 1e-9, "deviation grows with |a - 1|");
        assert!(verify_gradient_scaling(&x.h, &x.w, &x.b, 10.0, NormKind::None, &x.loss).unwrap() > 1e-3);
        assert!(verify_scale_invariance(&x.h, &x.w, &x.b, 10.0, NormKind::Batch).unwrap() < 1e-10);
        assert!(verify_gradient_scaling(&x.h, &x.w, &x.b, 10.0, NormKind::Batch, &x.loss).unwrap() < 1e-8);
    }

    #[test]
    fn orthogonality_conventions() {
        let z = Tensor::<f64>::zeros(&[3]);
        let w = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(verify_orthogonality(&[&w], &[&z]).unwrap(), 0.0);
        assert!((verify_orthogonality(&[&w], &[&w]).unwrap() - 1.0).abs() < 1e-15);
        let x = fixed();
        let (dw, db) = dense_norm_gradients(&x.h, &x.w, &x.b, NormKind::Layer, &x.loss).unwrap();
        assert!(verify_orthogonality(&[&x.w, &x.b], &[&dw, &db]).unwrap().abs() < 1e-8);
        // the weight alone is not scale invariant when a bias is present
        assert!(verify_orthogonality(&[&x.w], &[&dw]).unwrap().abs() > 1e-8);
    }

    #[test]
    fn recurrence_zero_rate_and_errors() {
        let x = fixed();
        let (w, g) = sgd_trajectory(&x.h, &x.w, &x.b, NormKind::Batch, &x.loss, 0.0, 3).unwrap();
        let r = verify_norm_recurrence(&w, &g, 0.0).unwrap();
        assert_eq!((r.per_step, r.telescoped), (0.0, 0.0));
        assert!(verify_norm_recurrence(&w[..2], &g, 0.0).is_err());
        // without normalization the cross term survives
        let (w, g) = sgd_trajectory(&x.h, &x.w, &x.b, NormKind::None, &x.loss, 0.1, 1).unwrap();
        assert!(verify_norm_recurrence(&w, &g, 0.1).unwrap().per_step > 1e-6);
    }

    #[test]
    fn small_suite_passes() {
        let out = run_property_suite(3, 40).unwrap();
        for o in &out {
            assert!(o.passed, "{}", o.line());
        }
        assert_eq!(out.len(), 13);
    }
}
