use rand::Rng;

use crate::scalar::Scalar;

use super::matrix::{matmul, matmul_nt, matmul_tn, row_sq_norms, Matrix};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    SoftmaxOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    /// Specs for an MLP with the given layer widths: ReLU everywhere except
    /// a softmax output on the final layer.
    pub fn chain(widths: &[usize]) -> Vec<LayerSpec> {
        let n = widths.len().saturating_sub(1);
        (0..n)
            .map(|l| LayerSpec {
                in_dim: widths[l],
                out_dim: widths[l + 1],
                activation: if l + 1 == n { Activation::SoftmaxOutput } else { Activation::Relu },
            })
            .collect()
    }

    fn validate_all(specs: &[LayerSpec]) -> Result<(), NnError> {
        if specs.is_empty() {
            return Err(NnError::Architecture("at least one layer is required".into()));
        }
        for (l, s) in specs.iter().enumerate() {
            if s.in_dim == 0 || s.out_dim == 0 {
                return Err(NnError::Architecture(format!("layer {l} has a zero dimension")));
            }
            let last = l + 1 == specs.len();
            match (s.activation, last) {
                (Activation::SoftmaxOutput, false) => {
                    return Err(NnError::Architecture(format!("softmax output on hidden layer {l}")))
                }
                (Activation::Relu, true) => {
                    return Err(NnError::Architecture("final layer must be a softmax output".into()))
                }
                _ => {}
            }
            if !last && s.out_dim != specs[l + 1].in_dim {
                return Err(NnError::Architecture(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    s.out_dim,
                    l + 1,
                    specs[l + 1].in_dim
                )));
            }
        }
        Ok(())
    }
}

/// One fully-connected layer, `Y = X·W + b` with `W` of shape `in_dim × out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: Matrix::zeros(in_dim, out_dim), b: vec![T::zero(); out_dim] }
    }

    /// Squared L2 norm of the layer's flattened parameters.
    pub fn sq_norm(&self) -> T {
        self.w.frobenius_sq() + self.b.iter().map(|&v| v * v).sum::<T>()
    }
}

/// Versioned MLP parameters. Hidden layers use ReLU; the last layer feeds a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub version: u64,
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(version: u64, layers: Vec<Dense<T>>) -> Result<Self, NnError> {
        let shapes: Vec<_> = layers.iter().map(|d| (d.w.rows(), d.w.cols())).collect();
        LayerSpec::validate_all(&specs_from_shapes(&shapes))?;
        for (l, d) in layers.iter().enumerate() {
            if d.b.len() != d.w.cols() {
                return Err(NnError::Shape(format!("layer {l} bias has length {}", d.b.len())));
            }
        }
        Ok(Self { version, layers })
    }

    /// Uniform Glorot initialization for weights, zero biases.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self, NnError> {
        LayerSpec::validate_all(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                let data = (0..s.in_dim * s.out_dim)
                    .map(|_| T::of(rng.random_range(-limit..=limit)))
                    .collect();
                Dense {
                    w: Matrix::from_vec(s.in_dim, s.out_dim, data).expect("sized by construction"),
                    b: vec![T::zero(); s.out_dim],
                }
            })
            .collect();
        Ok(Self { version: 0, layers })
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self, NnError> {
        LayerSpec::validate_all(specs)?;
        Ok(Self { version: 0, layers: specs.iter().map(|s| Dense::zeros(s.in_dim, s.out_dim)).collect() })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        specs_from_shapes(&self.shapes())
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|d| (d.w.rows(), d.w.cols())).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].w.cols()
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Canonical flat layout: for each layer, `W` row-major followed by `b`.
    pub fn flatten(&self) -> Vec<T> {
        flatten_layers(&self.layers)
    }

    pub fn from_flat(version: u64, shapes: &[(usize, usize)], flat: &[T]) -> Result<Self, NnError> {
        let expected: usize = shapes.iter().map(|(i, o)| i * o + o).sum();
        if flat.len() != expected {
            return Err(NnError::Shape(format!(
                "flat parameter vector has {} entries, shapes need {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(shapes.len());
        for &(i, o) in shapes {
            let w = Matrix::from_vec(i, o, flat[offset..offset + i * o].to_vec())?;
            offset += i * o;
            let b = flat[offset..offset + o].to_vec();
            offset += o;
            layers.push(Dense { w, b });
        }
        Self::new(version, layers)
    }

    pub fn sq_norm(&self) -> T {
        self.layers.iter().map(Dense::sq_norm).sum()
    }

    /// Plain SGD update `θ ← θ − lr·grad`.
    pub fn sgd_update(&mut self, grads: &[Dense<T>], lr: T) {
        for (p, g) in self.layers.iter_mut().zip(grads) {
            for (w, &gw) in p.w.as_mut_slice().iter_mut().zip(g.w.as_slice()) {
                *w -= lr * gw;
            }
            for (b, &gb) in p.b.iter_mut().zip(&g.b) {
                *b -= lr * gb;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            version: self.version,
            layers: self
                .layers
                .iter()
                .map(|d| Dense {
                    w: d.w.map_to(|v| U::of(v.as_f64())),
                    b: d.b.iter().map(|&v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

fn specs_from_shapes(shapes: &[(usize, usize)]) -> Vec<LayerSpec> {
    let n = shapes.len();
    shapes
        .iter()
        .enumerate()
        .map(|(l, &(in_dim, out_dim))| LayerSpec {
            in_dim,
            out_dim,
            activation: if l + 1 == n { Activation::SoftmaxOutput } else { Activation::Relu },
        })
        .collect()
}

pub(crate) fn flatten_layers<T: Scalar>(layers: &[Dense<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for d in layers {
        out.extend_from_slice(d.w.as_slice());
        out.extend_from_slice(&d.b);
    }
    out
}

/// Everything backward and the per-example norm formula need from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to every layer; `inputs[0]` is the minibatch itself.
    pub inputs: Vec<Matrix<T>>,
    pub logits: Matrix<T>,
    pub probs: Matrix<T>,
    pub labels: Vec<usize>,
    /// Softmax cross-entropy of every example.
    pub losses: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.losses.len()
    }

    pub fn mean_loss(&self) -> T {
        if self.losses.is_empty() {
            return T::zero();
        }
        self.losses.iter().copied().sum::<T>() / T::of_usize(self.losses.len())
    }

    /// Number of examples whose arg-max prediction differs from the label.
    pub fn misclassified(&self) -> usize {
        (0..self.logits.rows())
            .filter(|&n| {
                let row = self.logits.row(n);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best != self.labels[n]
            })
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct BackwardResult<T> {
    /// Gradient of `Σ c_n ℓ_n` with respect to every layer.
    pub grads: Vec<Dense<T>>,
    /// `∂L/∂Y` at every layer output, one row per example.
    pub deltas: Vec<Matrix<T>>,
}

impl<T: Scalar> BackwardResult<T> {
    pub fn flat_grad(&self) -> Vec<T> {
        flatten_layers(&self.grads)
    }

    pub fn grad_sq_norm(&self) -> T {
        self.grads.iter().map(Dense::sq_norm).sum()
    }
}

pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    x: &Matrix<T>,
    labels: &[usize],
) -> Result<ForwardCache<T>, NnError> {
    if x.cols() != params.input_dim() {
        return Err(NnError::Shape(format!(
            "input has {} features, model expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    if labels.len() != x.rows() {
        return Err(NnError::Shape(format!("{} labels for {} examples", labels.len(), x.rows())));
    }
    let classes = params.num_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::Label { label, classes });
    }

    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut y = matmul(&h, &layer.w)?;
        for r in 0..y.rows() {
            for (v, &b) in y.row_mut(r).iter_mut().zip(&layer.b) {
                *v += b;
                if l < last && *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        inputs.push(h);
        h = y;
    }
    let logits = h;

    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut losses = Vec::with_capacity(logits.rows());
    for n in 0..logits.rows() {
        let z = logits.row(n);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for (p, &v) in probs.row_mut(n).iter_mut().zip(z) {
            *p = (v - lse).exp();
        }
        let loss = lse - z[labels[n]];
        if !loss.is_finite() {
            return Err(NnError::NonFinite("softmax cross-entropy"));
        }
        // lse ≥ z_label holds exactly; clamp away rounding below zero.
        losses.push(loss.max(T::zero()));
    }

    Ok(ForwardCache { inputs, logits, probs, labels: labels.to_vec(), losses })
}

/// Gradients of `L = Σ_n c_n ℓ_n` together with the per-layer output deltas.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    coefficients: &[T],
) -> Result<BackwardResult<T>, NnError> {
    let n = cache.batch_size();
    if coefficients.len() != n {
        return Err(NnError::Shape(format!("{} coefficients for {n} examples", coefficients.len())));
    }
    if coefficients.iter().any(|&c| !(c >= T::zero()) || !c.is_finite()) {
        return Err(NnError::Shape("coefficients must be finite and non-negative".into()));
    }

    let num_layers = params.layers.len();
    let mut delta = cache.probs.clone();
    for (i, &c) in coefficients.iter().enumerate() {
        let row = delta.row_mut(i);
        row[cache.labels[i]] -= T::one();
        for v in row.iter_mut() {
            *v *= c;
        }
    }

    let mut grads = Vec::with_capacity(num_layers);
    let mut deltas = Vec::with_capacity(num_layers);
    for l in (0..num_layers).rev() {
        let x = &cache.inputs[l];
        let gw = matmul_tn(x, &delta)?;
        let mut gb = vec![T::zero(); delta.cols()];
        for r in 0..delta.rows() {
            for (b, &d) in gb.iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        let next = if l > 0 {
            let mut prev = matmul_nt(&delta, &params.layers[l].w)?;
            // x is the ReLU output of the layer below: zero exactly where the
            // pre-activation was ≤ 0, which is where the subgradient is 0.
            for (p, &xv) in prev.as_mut_slice().iter_mut().zip(x.as_slice()) {
                if xv <= T::zero() {
                    *p = T::zero();
                }
            }
            Some(prev)
        } else {
            None
        };
        grads.push(Dense { w: gw, b: gb });
        deltas.push(std::mem::replace(&mut delta, next.unwrap_or_else(|| Matrix::zeros(0, 0))));
    }
    grads.reverse();
    deltas.reverse();
    Ok(BackwardResult { grads, deltas })
}

/// Squared L2 norm of every example's flattened parameter gradient, from a
/// single batched backward pass.
///
/// `back` must come from [`backward`] with every coefficient equal to 1:
/// the deltas then hold each example's own `∂ℓ_n/∂Y`, and the gradient of
/// layer `l` for example `n` is the rank-1 product `X_l[n,:]ᵀ Δ_l[n,:]`
/// (plus `Δ_l[n,:]` for the bias), whose squared norm factorizes as
/// `(‖X_l[n,:]‖² + 1)·‖Δ_l[n,:]‖²`.
pub fn per_example_grad_sq_norms<T: Scalar>(cache: &ForwardCache<T>, back: &BackwardResult<T>) -> Vec<T> {
    let mut out = vec![T::zero(); cache.batch_size()];
    for (x, delta) in cache.inputs.iter().zip(&back.deltas) {
        let xs = row_sq_norms(x);
        let ds = row_sq_norms(delta);
        for ((o, xn), dn) in out.iter_mut().zip(xs).zip(ds) {
            *o += (xn + T::one()) * dn;
        }
    }
    out
}

/// Reference implementation of [`per_example_grad_sq_norms`]: one batch-of-one
/// backward pass per example, norm of the explicitly flattened gradient.
pub fn naive_per_example_norms<T: Scalar>(
    params: &ModelParams<T>,
    x: &Matrix<T>,
    labels: &[usize],
) -> Result<Vec<T>, NnError> {
    (0..x.rows())
        .map(|n| {
            let xn = x.select_rows(&[n]);
            let cache = forward(params, &xn, &labels[n..=n])?;
            let back = backward(params, &cache, &[T::one()])?;
            Ok(back.flat_grad().iter().map(|&g| g * g).sum())
        })
        .collect()
}
