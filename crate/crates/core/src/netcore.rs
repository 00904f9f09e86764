//! A minimal multilayer perceptron with hand-written backward pass.
//!
//! Weights are stored input-major (`in × out`) so a batch `X` (`B × in`) maps
//! to `X·W + b`. All arithmetic is `f64` and every loop runs in a fixed order,
//! which keeps forward and backward bit-deterministic.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Clamp applied to every probability before taking a logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Row sums of a [`PredictionBatch`] must be within this of one.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Build a matrix, checking the length and that all entries are finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data has {} entries, expected {rows}×{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    /// Stack equally long rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Config(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn vstack(parts: &[&DenseMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Config(format!(
                    "cannot stack {} columns onto {cols}",
                    m.cols
                )));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    /// Add `other` into the row block starting at `offset`.
    pub(crate) fn add_block(&mut self, offset: usize, other: &DenseMatrix) {
        debug_assert_eq!(self.cols, other.cols);
        let start = offset * self.cols;
        for (dst, src) in self.data[start..start + other.data.len()]
            .iter_mut()
            .zip(&other.data)
        {
            *dst += src;
        }
    }

    pub(crate) fn scaled(&self, s: f64) -> Self {
        Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// One affine layer: `weight` is `in × out`, `bias` has length `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn num_params(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

/// Parameters of an MLP `input_dim → hidden_dims… → num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    num_classes: usize,
}

fn layer_dims(input_dim: usize, hidden_dims: &[usize], num_classes: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(hidden_dims.len() + 1);
    let mut prev = input_dim;
    for &h in hidden_dims.iter().chain(std::iter::once(&num_classes)) {
        dims.push((prev, h));
        prev = h;
    }
    dims
}

impl MlpParams {
    fn check_dims(input_dim: usize, hidden_dims: &[usize], num_classes: usize) -> Result<()> {
        if input_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive: {input_dim} → {hidden_dims:?} → {num_classes}"
            )));
        }
        Ok(())
    }

    /// All weights and biases zero.
    pub fn zeros(input_dim: usize, hidden_dims: &[usize], num_classes: usize) -> Result<Self> {
        Self::check_dims(input_dim, hidden_dims, num_classes)?;
        let layers = layer_dims(input_dim, hidden_dims, num_classes)
            .into_iter()
            .map(|(i, o)| Layer::zeros(i, o))
            .collect();
        Ok(Self {
            layers,
            activation: Activation::Relu,
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            num_classes,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut params = Self::zeros(input_dim, hidden_dims, num_classes)?;
        for layer in &mut params.layers {
            let (fan_in, fan_out) = (layer.weight.rows, layer.weight.cols);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut layer.weight.data {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(params)
    }

    /// Assemble from explicit layers, validating that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("an MLP needs at least one layer".into()))?;
        let input_dim = first.weight.rows;
        let mut prev = input_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rows != prev || l.bias.len() != l.weight.cols {
                return Err(Error::Config(format!("layer {i} does not chain")));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Numeric(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
            prev = l.weight.cols;
        }
        let hidden_dims = layers[..layers.len() - 1]
            .iter()
            .map(|l| l.weight.cols)
            .collect::<Vec<_>>();
        Self::check_dims(input_dim, &hidden_dims, prev)?;
        Ok(Self {
            layers,
            activation: Activation::Relu,
            input_dim,
            hidden_dims,
            num_classes: prev,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Parameters in canonical order: per layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// Inverse of [`flatten`](Self::flatten) on this architecture.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Config(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        unflatten_into(&mut out.layers, flat);
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Layer::num_params).sum());
    for l in layers {
        out.extend_from_slice(&l.weight.data);
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unflatten_into(layers: &mut [Layer], flat: &[f64]) {
    let mut pos = 0;
    for l in layers {
        let n = l.weight.data.len();
        l.weight.data.copy_from_slice(&flat[pos..pos + n]);
        pos += n;
        let n = l.bias.len();
        l.bias.copy_from_slice(&flat[pos..pos + n]);
        pos += n;
    }
}

/// Gradient of a scalar loss with respect to every parameter of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layers: Vec<Layer>,
}

impl GradientSet {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.rows, l.weight.cols))
                .collect(),
        }
    }

    /// Gradient with the same layout as `params`, read from a flat vector.
    pub fn from_flat(params: &MlpParams, flat: &[f64]) -> Result<Self> {
        if flat.len() != params.num_params() {
            return Err(Error::Config(format!(
                "gradient has {} entries, model has {}",
                flat.len(),
                params.num_params()
            )));
        }
        let mut g = Self::zeros_like(params);
        unflatten_into(&mut g.layers, flat);
        Ok(g)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn is_congruent(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(g, p)| {
                g.weight.rows == p.weight.rows
                    && g.weight.cols == p.weight.cols
                    && g.bias.len() == p.bias.len()
            })
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data.iter_mut().zip(&b.weight.data) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.data.iter_mut().for_each(|x| *x *= s);
            l.bias.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Intermediate values of one forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// The batch fed to the first layer.
    pub input: DenseMatrix,
    /// `Z_l = A_{l-1}·W_l + b_l` for every layer.
    pub pre_activations: Vec<DenseMatrix>,
    /// `relu(Z_l)` for every hidden layer.
    pub activations: Vec<DenseMatrix>,
    /// Output of the last layer, `B × K`.
    pub logits: DenseMatrix,
}

fn affine(input: &DenseMatrix, layer: &Layer) -> DenseMatrix {
    let (b, n_in, n_out) = (input.rows, input.cols, layer.weight.cols);
    let mut out = vec![0.0; b * n_out];
    for r in 0..b {
        let x = input.row(r);
        let o = &mut out[r * n_out..(r + 1) * n_out];
        o.copy_from_slice(&layer.bias);
        for (i, &xi) in x.iter().enumerate().take(n_in) {
            if xi == 0.0 {
                continue;
            }
            let w = layer.weight.row(i);
            for (oj, wj) in o.iter_mut().zip(w) {
                *oj += xi * wj;
            }
        }
    }
    DenseMatrix::from_raw(b, n_out, out)
}

/// Run the network on a batch (`B × input_dim`).
pub fn forward(params: &MlpParams, batch: &DenseMatrix) -> Result<ForwardCache> {
    if batch.cols != params.input_dim {
        return Err(Error::Config(format!(
            "batch has {} features, model expects {}",
            batch.cols, params.input_dim
        )));
    }
    let last = params.layers.len() - 1;
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut activations = Vec::with_capacity(last);
    for (l, layer) in params.layers.iter().enumerate() {
        let input = if l == 0 { batch } else { &activations[l - 1] };
        let z = affine(input, layer);
        if l < last {
            let a =
                DenseMatrix::from_raw(z.rows, z.cols, z.data.iter().map(|&v| v.max(0.0)).collect());
            activations.push(a);
        }
        pre_activations.push(z);
    }
    let logits = pre_activations[last].clone();
    Ok(ForwardCache {
        input: batch.clone(),
        pre_activations,
        activations,
        logits,
    })
}

/// Rows on the probability simplex, one per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    probs: DenseMatrix,
}

impl PredictionBatch {
    /// Validate that every row is a probability vector.
    pub fn new(probs: DenseMatrix) -> Result<Self> {
        for (r, row) in probs.row_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Input(format!("row {r} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Input(format!("row {r} sums to {s}, not 1")));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &DenseMatrix {
        &self.probs
    }

    pub fn batch_size(&self) -> usize {
        self.probs.rows
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.probs.row(r)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            probs: self.probs.slice_rows(start, end),
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &DenseMatrix) -> Result<PredictionBatch> {
    if !logits.is_finite() {
        return Err(Error::Numeric("softmax received non-finite logits".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(PredictionBatch { probs: out })
}

fn check_labels(probs: &PredictionBatch, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.batch_size() {
        return Err(Error::Input(format!(
            "{} labels for a batch of {}",
            labels.len(),
            probs.batch_size()
        )));
    }
    let k = probs.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean of `−log max(p_y, ε)` over the batch.
pub fn cross_entropy(probs: &PredictionBatch, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.probs.get(r, y).max(PROB_EPS).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits behind `probs`.
///
/// Where the clamp is active (`p_y < ε`) the loss is locally constant and the
/// row's gradient is zero.
pub fn cross_entropy_grad(probs: &PredictionBatch, labels: &[usize]) -> Result<DenseMatrix> {
    check_labels(probs, labels)?;
    let (b, k) = (probs.batch_size(), probs.num_classes());
    let mut g = DenseMatrix::zeros(b, k);
    let inv_b = 1.0 / b.max(1) as f64;
    for (r, &y) in labels.iter().enumerate() {
        if probs.probs.get(r, y) < PROB_EPS {
            continue;
        }
        let row = g.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            let p = probs.probs.get(r, c);
            *v = (p - if c == y { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok(g)
}

/// Backpropagate `upstream = ∂loss/∂logits` to every parameter.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    upstream: &DenseMatrix,
) -> Result<GradientSet> {
    if upstream.rows != cache.logits.rows || upstream.cols != cache.logits.cols {
        return Err(Error::Config(format!(
            "upstream gradient is {}×{}, logits are {}×{}",
            upstream.rows, upstream.cols, cache.logits.rows, cache.logits.cols
        )));
    }
    let mut grads = GradientSet::zeros_like(params);
    let mut delta = upstream.clone();
    for l in (0..params.layers.len()).rev() {
        let input = if l == 0 {
            &cache.input
        } else {
            &cache.activations[l - 1]
        };
        let g = &mut grads.layers[l];
        let n_out = delta.cols;
        for r in 0..delta.rows {
            let d = delta.row(r);
            for (gb, dv) in g.bias.iter_mut().zip(d) {
                *gb += dv;
            }
            for (i, &a) in input.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let gw = &mut g.weight.data[i * n_out..(i + 1) * n_out];
                for (w, dv) in gw.iter_mut().zip(d) {
                    *w += a * dv;
                }
            }
        }
        if l > 0 {
            let w = &params.layers[l].weight;
            let z_prev = &cache.pre_activations[l - 1];
            let mut next = DenseMatrix::zeros(delta.rows, w.rows);
            for r in 0..delta.rows {
                let d = delta.row(r);
                for i in 0..w.rows {
                    if z_prev.get(r, i) <= 0.0 {
                        continue;
                    }
                    let s: f64 = w.row(i).iter().zip(d).map(|(wv, dv)| wv * dv).sum();
                    next.set(r, i, s);
                }
            }
            delta = next;
        }
    }
    Ok(grads)
}

/// `θ ← θ − lr·g`, returning the updated parameters.
pub fn sgd_step(params: &MlpParams, grads: &GradientSet, lr: f64) -> Result<MlpParams> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!(
            "learning rate must be ≥ 0, got {lr}"
        )));
    }
    if !grads.is_congruent(params) {
        return Err(Error::Config(
            "gradient shape does not match parameters".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let mut out = params.clone();
    for (p, g) in out.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in p.weight.data.iter_mut().zip(&g.weight.data) {
            *w -= lr * gw;
        }
        for (b, gb) in p.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(out)
}

/// Index of the largest logit per row (first one on ties).
pub fn argmax_rows(m: &DenseMatrix) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
