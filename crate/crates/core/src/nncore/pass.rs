//! Forward and backward passes, gradients and plain SGD.

use super::matrix::Matrix;
use super::model::{Dense, ModelParams, Norm, NORM_EPSILON, NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::losses::{softmax_rows, LossSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval,
}

/// Inputs paired with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
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

#[derive(Debug, Clone)]
struct NormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    mode: Mode,
    /// `boundaries[0]` is the input, `boundaries[k + 1]` the output of layer
    /// `k`; the last entry holds the logits.
    boundaries: Vec<Matrix>,
    norm_caches: Vec<Option<NormCache>>,
}

impl ForwardPass {
    /// Activations at every layer boundary, input first and logits last.
    pub fn features(&self) -> &[Matrix] {
        &self.boundaries
    }

    pub fn feature(&self, boundary: usize) -> &Matrix {
        &self.boundaries[boundary]
    }

    pub fn logits(&self) -> &Matrix {
        self.boundaries.last().expect("at least input and logits")
    }

    pub fn into_logits(mut self) -> Matrix {
        self.boundaries.pop().expect("at least input and logits")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn affine(input: &Matrix, layer: &Dense) -> Result<Matrix> {
    let mut z = input.matmul_transposed(&layer.weights)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

fn normalize(z: &Matrix, norm: &Norm, mode: Mode) -> (Matrix, NormCache) {
    let (rows, cols) = z.shape();
    let (mean, var) = match mode {
        Mode::Train => {
            let n = rows as f64;
            let mean: Vec<f64> = z.column_sums().into_iter().map(|s| s / n).collect();
            let mut var = vec![0.0; cols];
            for r in 0..rows {
                for ((v, &x), &m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        }
        Mode::Eval => (norm.running_mean.clone(), norm.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPSILON).sqrt()).collect();
    let mut normalized = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let zr = z.row(r);
        for c in 0..cols {
            let zh = (zr[c] - mean[c]) * inv_std[c];
            normalized.set(r, c, zh);
            out.set(r, c, norm.scale[c] * zh + norm.shift[c]);
        }
    }
    let cache = NormCache {
        normalized,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    };
    (out, cache)
}

impl ModelParams {
    /// Runs the network without touching any stored state. In train mode the
    /// batch statistics are captured so [`ModelParams::update_running_stats`]
    /// can fold them in afterwards.
    pub fn forward(&self, inputs: &Matrix, mode: Mode) -> Result<ForwardPass> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} but model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let last = self.layer_count() - 1;
        let mut boundaries = Vec::with_capacity(self.layer_count() + 1);
        let mut norm_caches = Vec::with_capacity(self.layer_count());
        boundaries.push(inputs.clone());
        for (k, (layer, norm)) in self.layers().iter().zip(self.norms()).enumerate() {
            let mut z = affine(&boundaries[k], layer)?;
            let cache = match norm {
                Some(norm) => {
                    let (y, cache) = normalize(&z, norm, mode);
                    z = y;
                    Some(cache)
                }
                None => None,
            };
            if k < last {
                z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if !z.is_finite() {
                return Err(Error::Numeric(format!("layer {k} produced a non-finite activation")));
            }
            norm_caches.push(cache);
            boundaries.push(z);
        }
        Ok(ForwardPass {
            mode,
            boundaries,
            norm_caches,
        })
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// running statistics.
    pub fn forward_train(&mut self, inputs: &Matrix) -> Result<ForwardPass> {
        let pass = self.forward(inputs, Mode::Train)?;
        self.update_running_stats(&pass);
        Ok(pass)
    }

    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        if pass.mode != Mode::Train {
            return;
        }
        let n = pass.boundaries[0].rows() as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (norm, cache) in self.norms_mut().iter_mut().zip(&pass.norm_caches) {
            let (Some(norm), Some(cache)) = (norm, cache) else { continue };
            for c in 0..norm.running_mean.len() {
                norm.running_mean[c] =
                    NORM_MOMENTUM * norm.running_mean[c] + (1.0 - NORM_MOMENTUM) * cache.batch_mean[c];
                norm.running_var[c] =
                    NORM_MOMENTUM * norm.running_var[c] + (1.0 - NORM_MOMENTUM) * cache.batch_var[c] * unbias;
            }
        }
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(inputs, Mode::Eval)?.into_logits();
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrad {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// One gradient per trainable parameter, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
    pub norms: Vec<Option<NormGrad>>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(|l| DenseGrad {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            norms: model
                .norms()
                .iter()
                .map(|n| {
                    n.as_ref().map(|n| NormGrad {
                        scale: vec![0.0; n.scale.len()],
                        shift: vec![0.0; n.shift.len()],
                    })
                })
                .collect(),
        }
    }

    /// Same ordering as [`ModelParams::trainable_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.bias);
            if let Some(norm) = norm {
                out.extend_from_slice(&norm.scale);
                out.extend_from_slice(&norm.shift);
            }
        }
        out
    }

    fn matches(&self, model: &ModelParams) -> bool {
        self.layers.len() == model.layer_count()
            && self.norms.len() == model.layer_count()
            && self
                .layers
                .iter()
                .zip(model.layers())
                .all(|(g, l)| g.weights.shape() == l.weights.shape() && g.bias.len() == l.bias.len())
            && self.norms.iter().zip(model.norms()).all(|(g, n)| match (g, n) {
                (None, None) => true,
                (Some(g), Some(n)) => g.scale.len() == n.scale.len() && g.shift.len() == n.shift.len(),
                _ => false,
            })
    }
}

/// Gradient of the objective described by `spec` with respect to every
/// trainable parameter, for the forward pass `pass` of `model` on `labels`.
///
/// Teacher features are constants; only the student receives distillation
/// gradient.
pub fn backward(model: &ModelParams, pass: &ForwardPass, labels: &[usize], spec: &LossSpec) -> Result<Gradients> {
    let taps = spec.validate(model)?;
    let logits = pass.logits();
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    let n = labels.len() as f64;
    let layer_count = model.layer_count();

    // Upstream gradient at each boundary.
    let mut upstream: Vec<Option<Matrix>> = vec![None; layer_count + 1];

    let mut d_logits = softmax_rows(logits);
    for (r, &y) in labels.iter().enumerate() {
        let row = d_logits.row_mut(r);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    upstream[layer_count] = Some(d_logits);

    if spec.lambda > 0.0 {
        let teacher = spec
            .teacher_features
            .as_ref()
            .ok_or_else(|| Error::Config("distillation is active but teacher features are missing".into()))?;
        for (&b, t) in taps.iter().zip(teacher) {
            let s = pass.feature(b);
            if !s.same_shape(t) {
                return Err(Error::Shape(format!(
                    "teacher features {:?} vs student {:?} at boundary {b}",
                    t.shape(),
                    s.shape()
                )));
            }
            let coef = 2.0 * spec.lambda / n;
            let mut g = Matrix::zeros(s.rows(), s.cols());
            for ((gv, &sv), &tv) in g.data_mut().iter_mut().zip(s.data()).zip(t.data()) {
                *gv = coef * (sv - tv);
            }
            accumulate(&mut upstream[b], g);
        }
    }

    let mut grads = Gradients::zeros_like(model);
    for k in (0..layer_count).rev() {
        let Some(mut delta) = upstream[k + 1].take() else {
            continue;
        };
        let out = pass.feature(k + 1);
        if k + 1 < layer_count {
            for (d, &o) in delta.data_mut().iter_mut().zip(out.data()) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        if let (Some(norm), Some(cache)) = (&model.norms()[k], &pass.norm_caches[k]) {
            delta = norm_backward(norm, cache, &delta, pass.mode, grads.norms[k].as_mut().expect("norm grad slot"));
        }
        let layer = &model.layers()[k];
        let input = pass.feature(k);
        grads.layers[k].weights = delta.transposed_matmul(input)?;
        grads.layers[k].bias = delta.column_sums();
        if k > 0 {
            let d_input = delta.matmul(&layer.weights)?;
            accumulate(&mut upstream[k], d_input);
        }
    }

    if spec.proximal_mu > 0.0 {
        let reference = spec
            .proximal_reference
            .ok_or_else(|| Error::Config("proximal term is active but no reference model was given".into()))?;
        model.ensure_same_architecture(reference)?;
        for ((g, l), r) in grads.layers.iter_mut().zip(model.layers()).zip(reference.layers()) {
            for ((gv, &w), &wr) in g.weights.data_mut().iter_mut().zip(l.weights.data()).zip(r.weights.data()) {
                *gv += spec.proximal_mu * (w - wr);
            }
            for ((gv, &b), &br) in g.bias.iter_mut().zip(&l.bias).zip(&r.bias) {
                *gv += spec.proximal_mu * (b - br);
            }
        }
    }
    Ok(grads)
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn norm_backward(norm: &Norm, cache: &NormCache, d_out: &Matrix, mode: Mode, grad: &mut NormGrad) -> Matrix {
    let (rows, cols) = d_out.shape();
    let n = rows as f64;
    let mut d_hat = Matrix::zeros(rows, cols);
    for c in 0..cols {
        grad.scale[c] = 0.0;
        grad.shift[c] = 0.0;
    }
    for r in 0..rows {
        for c in 0..cols {
            let d = d_out.get(r, c);
            grad.scale[c] += d * cache.normalized.get(r, c);
            grad.shift[c] += d;
            d_hat.set(r, c, d * norm.scale[c]);
        }
    }
    let mut d_z = Matrix::zeros(rows, cols);
    match mode {
        Mode::Eval => {
            for r in 0..rows {
                for c in 0..cols {
                    d_z.set(r, c, d_hat.get(r, c) * cache.inv_std[c]);
                }
            }
        }
        Mode::Train => {
            let sum_d = d_hat.column_sums();
            let mut sum_dx = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    sum_dx[c] += d_hat.get(r, c) * cache.normalized.get(r, c);
                }
            }
            for r in 0..rows {
                for c in 0..cols {
                    let v = cache.inv_std[c] / n
                        * (n * d_hat.get(r, c) - sum_d[c] - cache.normalized.get(r, c) * sum_dx[c]);
                    d_z.set(r, c, v);
                }
            }
        }
    }
    d_z
}

/// Decrements each trainable parameter by `lr × gradient`. Running
/// statistics are not touched.
pub fn sgd_step(model: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !grads.matches(model) {
        return Err(Error::Shape("gradient shapes do not match the model".into()));
    }
    for (layer, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
        for (w, gw) in layer.weights.data_mut().iter_mut().zip(g.weights.data()) {
            *w -= lr * gw;
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    for (norm, g) in model.norms_mut().iter_mut().zip(&grads.norms) {
        if let (Some(norm), Some(g)) = (norm, g) {
            for (s, gs) in norm.scale.iter_mut().zip(&g.scale) {
                *s -= lr * gs;
            }
            for (s, gs) in norm.shift.iter_mut().zip(&g.shift) {
                *s -= lr * gs;
            }
        }
    }
    Ok(())
}
