//! Differentiable layer primitives with explicit forward and backward passes.
//!
//! Every forward function is pure and returns the cache its backward needs.
//! Backward functions take the cache as `Option` so a caller that never ran
//! the forward pass gets an error instead of garbage gradients.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Named parameter tensors in a stable order.
pub type ParamMap<T> = IndexMap<String, Tensor<T>>;

/// Gradient tensors keyed by parameter name; each has its parameter's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients<T> {
    pub grads: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> LayerGradients<T> {
    pub fn new() -> Self {
        Self {
            grads: IndexMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn squared_norm(&self) -> T {
        self.grads.values().fold(T::zero(), |acc, g| acc + g.squared_norm())
    }

    /// Checks that every gradient matches its parameter's shape.
    pub fn check_against(&self, params: &ParamMap<T>) -> Result<()> {
        for (name, g) in &self.grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            p.same_shape(g, "gradient")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Default for LayerGradients<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A mini-batch: inputs with leading batch axis and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = inputs.dim(0);
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "batch",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    x: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// `y[n] = W x[n] + b` for `x: N x d_in`, `W: d_out x d_in`, `b: d_out`.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, DenseCache<T>)> {
    if x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) {
        return Err(Error::ShapeMismatch {
            op: "dense_forward",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.shape() != [w.dim(0)] {
        return Err(Error::ShapeMismatch {
            op: "dense_forward bias",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (n, d_in, d_out) = (x.dim(0), x.dim(1), w.dim(0));
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(
        n,
        d_in,
        d_out,
        T::one(),
        x.data(),
        Layout::Normal,
        w.data(),
        Layout::Transposed,
        T::one(),
        &mut y,
    );
    Ok((Tensor::new(vec![n, d_out], y)?, DenseCache { x: x.clone() }))
}

pub fn dense_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: Option<&DenseCache<T>>,
    w: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let cache = cache.ok_or(Error::MissingCache("dense_backward"))?;
    let x = &cache.x;
    let (n, d_in, d_out) = (x.dim(0), x.dim(1), w.dim(0));
    if dy.shape() != [n, d_out] {
        return Err(Error::ShapeMismatch {
            op: "dense_backward",
            left: dy.shape().to_vec(),
            right: vec![n, d_out],
        });
    }
    let mut dw = vec![T::zero(); d_out * d_in];
    gemm(
        d_out,
        n,
        d_in,
        T::one(),
        dy.data(),
        Layout::Transposed,
        x.data(),
        Layout::Normal,
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); d_out];
    for row in dy.data().chunks_exact(d_out) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dx = vec![T::zero(); n * d_in];
    gemm(
        n,
        d_out,
        d_in,
        T::one(),
        dy.data(),
        Layout::Normal,
        w.data(),
        Layout::Normal,
        T::zero(),
        &mut dx,
    );
    Ok(DenseGrads {
        dx: Tensor::new(vec![n, d_in], dx)?,
        dw: Tensor::new(vec![d_out, d_in], dw)?,
        db: Tensor::new(vec![d_out], db)?,
    })
}

// ---------------------------------------------------------------------------
// Conv2d (stride 1, square kernel, symmetric zero padding)

#[derive(Clone, Debug)]
pub struct Conv2dCache<T> {
    x: Tensor<T>,
    padding: usize,
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub dx: Tensor<T>,
    pub dk: Tensor<T>,
    pub db: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_geometry<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, pad: usize) -> Result<ConvGeom> {
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d_forward",
        left: x.shape().to_vec(),
        right: kernel.shape().to_vec(),
    };
    if x.rank() != 4 || kernel.rank() != 4 {
        return Err(mismatch());
    }
    let (c_in, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let k = kernel.dim(2);
    if kernel.dim(1) != c_in || kernel.dim(3) != k {
        return Err(mismatch());
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("kernel {k}x{k} larger than padded input"),
        });
    }
    Ok(ConvGeom {
        c_in,
        h,
        w,
        k,
        pad,
        ho: h + 2 * pad - k + 1,
        wo: w + 2 * pad - k + 1,
    })
}

/// Unrolls one sample `C x H x W` into `(C*k*k) x (Ho*Wo)` patch columns.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto the image.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: N x C_in x H x W` with `kernel: C_out x C_in x k x k`
/// plus a per-output-channel bias, stride 1.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    b: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, Conv2dCache<T>)> {
    let g = conv_geometry(x, kernel, padding)?;
    let c_out = kernel.dim(0);
    if b.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_forward bias",
            left: kernel.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let n = x.dim(0);
    let (patch, positions) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); patch * positions];
    let mut y = vec![T::zero(); n * c_out * positions];
    let in_len = g.c_in * g.h * g.w;
    for (s, out) in y.chunks_exact_mut(c_out * positions).enumerate() {
        im2col(&g, &x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        for (co, chunk) in out.chunks_exact_mut(positions).enumerate() {
            chunk.fill(b.data()[co]);
        }
        gemm(
            c_out,
            patch,
            positions,
            T::one(),
            kernel.data(),
            Layout::Normal,
            &cols,
            Layout::Normal,
            T::one(),
            out,
        );
    }
    let y = Tensor::new(vec![n, c_out, g.ho, g.wo], y)?;
    Ok((
        y,
        Conv2dCache {
            x: x.clone(),
            padding,
        },
    ))
}

pub fn conv2d_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: Option<&Conv2dCache<T>>,
    kernel: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let cache = cache.ok_or(Error::MissingCache("conv2d_backward"))?;
    let x = &cache.x;
    let g = conv_geometry(x, kernel, cache.padding)?;
    let (n, c_out) = (x.dim(0), kernel.dim(0));
    if dy.shape() != [n, c_out, g.ho, g.wo] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: dy.shape().to_vec(),
            right: vec![n, c_out, g.ho, g.wo],
        });
    }
    let (patch, positions) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![T::zero(); patch * positions];
    let mut dcols = vec![T::zero(); patch * positions];
    let mut dk = vec![T::zero(); c_out * patch];
    let mut db = vec![T::zero(); c_out];
    let mut dx = vec![T::zero(); x.len()];
    for s in 0..n {
        let dy_s = &dy.data()[s * c_out * positions..(s + 1) * c_out * positions];
        for (co, chunk) in dy_s.chunks_exact(positions).enumerate() {
            db[co] += chunk.iter().fold(T::zero(), |a, &v| a + v);
        }
        im2col(&g, &x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        gemm(
            c_out,
            positions,
            patch,
            T::one(),
            dy_s,
            Layout::Normal,
            &cols,
            Layout::Transposed,
            T::one(),
            &mut dk,
        );
        gemm(
            patch,
            c_out,
            positions,
            T::one(),
            kernel.data(),
            Layout::Transposed,
            dy_s,
            Layout::Normal,
            T::zero(),
            &mut dcols,
        );
        col2im(&g, &dcols, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    Ok(Conv2dGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dk: Tensor::new(kernel.shape().to_vec(), dk)?,
        db: Tensor::new(vec![c_out], db)?,
    })
}

// ---------------------------------------------------------------------------
// ReLU

#[derive(Clone, Debug)]
pub struct ReluCache {
    active: Vec<bool>,
    shape: Vec<usize>,
}

impl ReluCache {
    /// Which inputs were strictly positive.
    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, ReluCache) {
    let active: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (
        y,
        ReluCache {
            active,
            shape: x.shape().to_vec(),
        },
    )
}

/// Passes the gradient where the input was strictly positive; zero at 0.
pub fn relu_backward<T: Scalar>(dy: &Tensor<T>, cache: Option<&ReluCache>) -> Result<Tensor<T>> {
    let cache = cache.ok_or(Error::MissingCache("relu_backward"))?;
    if dy.shape() != cache.shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            left: dy.shape().to_vec(),
            right: cache.shape.clone(),
        });
    }
    let data = dy
        .data()
        .iter()
        .zip(&cache.active)
        .map(|(&g, &a)| if a { g } else { T::zero() })
        .collect();
    Tensor::new(dy.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// Loss and optimizer

/// Mean negative log-likelihood of a row-max-stabilized softmax, and its
/// gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut grad = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for (i, (row, g)) in logits.data().chunks_exact(k).zip(grad.chunks_exact_mut(k)).enumerate() {
        let label = labels[i];
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut denom = T::zero();
        for (gj, &v) in g.iter_mut().zip(row) {
            let e = (v - max).exp();
            *gj = e;
            denom += e;
        }
        loss += denom.ln() - (row[label] - max);
        for gj in g.iter_mut() {
            *gj = *gj / denom * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Anything that can hand out named parameter tensors for in-place update.
pub trait ParamStore<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>>;
}

impl<T> ParamStore<T> for ParamMap<T> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name)
    }
}

/// Plain gradient descent `p <- p - lr * g` for every parameter with a gradient.
pub fn sgd_step<T: Scalar, P: ParamStore<T> + ?Sized>(params: &mut P, grads: &LayerGradients<T>, lr: T) -> Result<()> {
    if !(lr >= T::zero()) {
        return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {lr}")));
    }
    for (name, g) in &grads.grads {
        let p = params
            .param_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        p.axpy(-lr, g)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn dense_identity_and_scalar() {
        let (y, _) = dense_forward(&t(&[1, 2], &[3., 5.]), &t(&[2, 2], &[1., 0., 0., 1.]), &t(&[2], &[0., 0.])).unwrap();
        assert_eq!(y.data(), &[3., 5.]);
        let (y, _) = dense_forward(&t(&[1, 1], &[3.]), &t(&[1, 1], &[2.]), &t(&[1], &[1.])).unwrap();
        assert_eq!(y.data(), &[7.]);
    }

    #[test]
    fn dense_shape_mismatch_names_both_shapes() {
        let err = dense_forward(&t(&[1, 3], &[0.; 3]), &t(&[2, 2], &[0.; 4]), &t(&[2], &[0.; 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn dense_backward_scalar_chain() {
        let w = t(&[1, 1], &[2.]);
        let (_, cache) = dense_forward(&t(&[1, 1], &[3.]), &w, &t(&[1], &[0.])).unwrap();
        let g = dense_backward(&t(&[1, 1], &[1.]), Some(&cache), &w).unwrap();
        assert_eq!(g.dw.data(), &[3.]);
        assert_eq!(g.db.data(), &[1.]);
        assert_eq!(g.dx.data(), &[2.]);

        let zero = dense_backward(&t(&[1, 1], &[0.]), Some(&cache), &w).unwrap();
        assert_eq!(zero.dw.max_abs() + zero.db.max_abs() + zero.dx.max_abs(), 0.0);
        assert!(matches!(
            dense_backward(&t(&[1, 1], &[1.]), None, &w),
            Err(Error::MissingCache(_))
        ));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[4, 5], &mut rng);
        let w = random(&[3, 5], &mut rng);
        let b = random(&[3], &mut rng);
        let c = random(&[4, 3], &mut rng);
        // L = sum(c * y^2) / 2
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let (y, _) = dense_forward(x, w, b).unwrap();
            y.data().iter().zip(c.data()).map(|(y, c)| 0.5 * c * y * y).sum::<f64>()
        };
        let (y, cache) = dense_forward(&x, &w, &b).unwrap();
        let dy = Tensor::new(y.shape().to_vec(), y.data().iter().zip(c.data()).map(|(y, c)| c * y).collect()).unwrap();
        let g = dense_backward(&dy, Some(&cache), &w).unwrap();
        let h = 1e-4;
        for (which, analytic) in [(0usize, &g.dx), (1, &g.dw), (2, &g.db)] {
            for i in 0..analytic.len() {
                let mut p = [x.clone(), w.clone(), b.clone()];
                p[which].data_mut()[i] += h;
                let up = loss(&p[0], &p[1], &p[2]);
                p[which].data_mut()[i] -= 2.0 * h;
                let down = loss(&p[0], &p[1], &p[2]);
                let numeric = (up - down) / (2.0 * h);
                assert!(rel_err(analytic.data()[i], numeric) < 1e-4, "param {which} idx {i}");
            }
        }
    }

    /// Direct six-loop cross-correlation used as the independent reference.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (n, ci, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, ks) = (k.dim(0), k.dim(2));
        let (ho, wo) = (h - ks + 1, w - ks + 1);
        let mut y = Tensor::zeros(&[n, co, ho, wo]);
        for s in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..ks {
                                for kx in 0..ks {
                                    acc += x.data()[((s * ci + c) * h + oy + ky) * w + ox + kx]
                                        * k.data()[((o * ci + c) * ks + ky) * ks + kx];
                                }
                            }
                        }
                        y.data_mut()[((s * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_sum_of_ones_is_25() {
        let (y, _) = conv2d_forward(
            &Tensor::<f64>::full(&[1, 1, 5, 5], 1.0),
            &Tensor::full(&[1, 1, 5, 5], 1.0),
            &Tensor::zeros(&[1]),
            0,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[25.0]);
    }

    #[test]
    fn conv_delta_kernel_crops_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 8, 9], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 5, 5]);
        k.data_mut()[12] = 1.0;
        let (y, _) = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 0).unwrap();
        assert_eq!(y.shape(), &[2, 1, 4, 5]);
        for s in 0..2 {
            for oy in 0..4 {
                for ox in 0..5 {
                    assert_eq!(y.data()[(s * 4 + oy) * 5 + ox], x.data()[(s * 8 + oy + 2) * 9 + ox + 2]);
                }
            }
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 9, 11], &mut rng);
        let k = random(&[4, 3, 5, 5], &mut rng);
        let b = random(&[4], &mut rng);
        let (y, _) = conv2d_forward(&x, &k, &b, 0).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &k, &b)).unwrap() <= 1e-6);
    }

    #[test]
    fn conv_rejects_small_input() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 0).is_err());
        assert!(matches!(
            conv2d_backward(&Tensor::zeros(&[1, 1, 1, 1]), None, &k),
            Err(Error::MissingCache(_))
        ));
    }

    #[test]
    fn conv_backward_zero_and_dense_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 2, 5, 5], &mut rng);
        let k = random(&[4, 2, 5, 5], &mut rng);
        let b = random(&[4], &mut rng);
        let (_, cache) = conv2d_forward(&x, &k, &b, 0).unwrap();
        let zero = conv2d_backward(&Tensor::zeros(&[3, 4, 1, 1]), Some(&cache), &k).unwrap();
        assert_eq!(zero.dk.max_abs() + zero.db.max_abs() + zero.dx.max_abs(), 0.0);

        // 1x1 output: the convolution is a dense layer on the flattened patch
        let dy = random(&[3, 4, 1, 1], &mut rng);
        let g = conv2d_backward(&dy, Some(&cache), &k).unwrap();
        let xf = x.clone().reshape(&[3, 50]).unwrap();
        let wf = k.clone().reshape(&[4, 50]).unwrap();
        let (_, dcache) = dense_forward(&xf, &wf, &b).unwrap();
        let dg = dense_backward(&dy.clone().reshape(&[3, 4]).unwrap(), Some(&dcache), &wf).unwrap();
        assert!(g.dk.data().iter().zip(dg.dw.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(g.dx.data().iter().zip(dg.dx.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(g.db.data().iter().zip(dg.db.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for pad in [0usize, 2] {
            let x = random(&[2, 2, 7, 6], &mut rng);
            let k = random(&[3, 2, 5, 5], &mut rng);
            let b = random(&[3], &mut rng);
            let (y, cache) = conv2d_forward(&x, &k, &b, pad).unwrap();
            let c = random(y.shape(), &mut rng);
            let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
                let (y, _) = conv2d_forward(x, k, b, pad).unwrap();
                y.data().iter().zip(c.data()).map(|(y, c)| 0.5 * c * y * y).sum::<f64>()
            };
            let dy = Tensor::new(y.shape().to_vec(), y.data().iter().zip(c.data()).map(|(y, c)| c * y).collect()).unwrap();
            let g = conv2d_backward(&dy, Some(&cache), &k).unwrap();
            let h = 1e-4;
            for (which, analytic) in [(0usize, &g.dx), (1, &g.dk), (2, &g.db)] {
                for i in (0..analytic.len()).step_by(3) {
                    let mut p = [x.clone(), k.clone(), b.clone()];
                    p[which].data_mut()[i] += h;
                    let up = loss(&p[0], &p[1], &p[2]);
                    p[which].data_mut()[i] -= 2.0 * h;
                    let down = loss(&p[0], &p[1], &p[2]);
                    let numeric = (up - down) / (2.0 * h);
                    assert!(
                        rel_err(analytic.data()[i], numeric) <= 1e-4,
                        "pad {pad} param {which} idx {i}: {} vs {numeric}",
                        analytic.data()[i]
                    );
                }
            }
        }
    }

    #[test]
    fn relu_examples() {
        let x = t(&[3], &[-1., 0., 2.]);
        let (y, cache) = relu(&x);
        assert_eq!(y.data(), &[0., 0., 2.]);
        let dx = relu_backward(&t(&[3], &[1., 1., 1.]), Some(&cache)).unwrap();
        assert_eq!(dx.data(), &[0., 0., 1.]);
    }

    #[test]
    fn relu_sum_is_abs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[50], &mut rng);
        let (a, _) = relu(&x);
        let (b, _) = relu(&x.scale(-1.0));
        for i in 0..50 {
            assert_eq!(a.data()[i] + b.data()[i], x.data()[i].abs());
        }
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let (loss, _) = softmax_cross_entropy(&Tensor::<f64>::zeros(&[3, 10]), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::<f64>::zeros(&[1, 10]);
        logits.data_mut()[3] = 1000.0;
        let (loss, g) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!(loss.abs() < 1e-12 && g.is_finite());

        assert!(matches!(
            softmax_cross_entropy(&logits, &[10]),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&[4, 6], &mut rng).scale(3.0);
        let labels = [0, 5, 2, 2];
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-4;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let up = softmax_cross_entropy(&p, &labels).unwrap().0;
            p.data_mut()[i] -= 2.0 * h;
            let down = softmax_cross_entropy(&p, &labels).unwrap().0;
            assert!(rel_err(g.data()[i], (up - down) / (2.0 * h)) < 1e-4);
        }
    }

    #[test]
    fn sgd_step_examples() {
        let mut params = ParamMap::new();
        params.insert("w".to_string(), t(&[2], &[1., 2.]));
        let mut grads = LayerGradients::new();
        grads.insert("w", t(&[2], &[1., 1.]));
        sgd_step(&mut params, &grads, 0.5).unwrap();
        assert_eq!(params["w"].data(), &[0.5, 1.5]);

        grads.insert("w", t(&[2], &[0., 0.]));
        sgd_step(&mut params, &grads, 0.5).unwrap();
        assert_eq!(params["w"].data(), &[0.5, 1.5]);

        grads.insert("w", t(&[3], &[0., 0., 0.]));
        assert!(sgd_step(&mut params, &grads, 0.5).is_err());
    }

    #[test]
    fn batch_validates_labels() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(Batch::new(x.clone(), vec![0, 2], 3).is_ok());
        assert!(matches!(Batch::new(x.clone(), vec![0, 3], 3), Err(Error::LabelOutOfRange { .. })));
        assert!(Batch::new(x, vec![0], 3).is_err());
    }
}
