//! Minimal deterministic feed-forward network engine.
//!
//! Multilayer perceptrons with ReLU between consecutive dense layers and an
//! affine output layer. Forward and backward passes optionally apply a
//! binary weight mask: masked weights act as zero in the forward pass and
//! receive exactly zero gradient. Gradients are computed analytically for
//! mean cross-entropy; there is no autodiff.
//!
//! Every operation is a pure function of its inputs. Identical inputs at
//! identical precision produce bitwise-identical outputs.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::rng::chacha;
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite values produced in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Architecture description: base unit counts per layer plus a width
/// multiplier applied to the hidden layers only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub width_multiplier: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, width_multiplier: usize) -> Result<Self> {
        let spec = ModelSpec {
            layer_sizes,
            width_multiplier,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(EngineError::InvalidSpec(
                "need at least input and output sizes".into(),
            ));
        }
        if self.layer_sizes.iter().any(|&d| d == 0) {
            return Err(EngineError::InvalidSpec("zero-width layer".into()));
        }
        if self.width_multiplier == 0 {
            return Err(EngineError::InvalidSpec("width multiplier must be >= 1".into()));
        }
        Ok(())
    }

    /// Unit counts after applying the width multiplier to hidden layers.
    pub fn effective_sizes(&self) -> Vec<usize> {
        let last = self.layer_sizes.len() - 1;
        self.layer_sizes
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if i == 0 || i == last {
                    d
                } else {
                    d * self.width_multiplier
                }
            })
            .collect()
    }

    /// Number of dense layers.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Per-layer weights and biases instantiating a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    pub spec: ModelSpec,
    pub weights: Vec<Tensor<S>>,
    pub biases: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let sizes = spec.effective_sizes();
        let weights = (1..sizes.len())
            .map(|l| Tensor::zeros(vec![sizes[l], sizes[l - 1]]))
            .collect();
        let biases = (1..sizes.len()).map(|l| Tensor::zeros(vec![sizes[l]])).collect();
        ParamSet {
            spec: spec.clone(),
            weights,
            biases,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Total weight-matrix element count (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.all_finite()) && self.biases.iter().all(|b| b.all_finite())
    }

    /// Elementwise visit of all parameters in a fixed order (weights then
    /// bias, layer by layer). Used by the interpolation and plane code.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut S)) {
        for l in 0..self.weights.len() {
            for v in self.weights[l].data_mut() {
                f(v);
            }
            for v in self.biases[l].data_mut() {
                f(v);
            }
        }
    }

    pub fn flat_len(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Zero out weights wherever the mask is zero.
    pub fn apply_mask(&mut self, mask: &Mask) {
        for (w, m) in self.weights.iter_mut().zip(&mask.layers) {
            for (v, &keep) in w.data_mut().iter_mut().zip(m.data()) {
                if keep == 0 {
                    *v = S::ZERO;
                }
            }
        }
    }
}

/// Binary mask over the weight matrices of a model. Biases are unmasked.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub layers: Vec<Tensor<u8>>,
}

impl Mask {
    pub fn ones(spec: &ModelSpec) -> Self {
        let sizes = spec.effective_sizes();
        let layers = (1..sizes.len())
            .map(|l| Tensor::filled(vec![sizes[l], sizes[l - 1]], 1u8))
            .collect();
        Mask { layers }
    }

    pub fn from_layers(layers: Vec<Tensor<u8>>) -> Self {
        for t in &layers {
            debug_assert!(t.data().iter().all(|&v| v <= 1), "mask entries must be 0/1");
        }
        Mask { layers }
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|t| t.len()).sum()
    }

    pub fn ones_count(&self) -> usize {
        self.layers
            .iter()
            .map(|t| t.data().iter().filter(|&&v| v == 1).count())
            .sum()
    }

    /// Fraction of weights fixed to zero.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.ones_count() as f64 / self.total() as f64
    }

    pub fn matches_spec(&self, spec: &ModelSpec) -> bool {
        let sizes = spec.effective_sizes();
        self.layers.len() + 1 == sizes.len()
            && self
                .layers
                .iter()
                .enumerate()
                .all(|(i, t)| t.shape() == [sizes[i + 1], sizes[i]])
    }
}

/// He-normal initialization: W entries i.i.d. N(0, 2/fan_in), biases zero.
/// Fully determined by `(spec, seed)`.
pub fn init_params<S: Scalar>(spec: &ModelSpec, seed: u64) -> ParamSet<S> {
    let mut params = ParamSet::zeros(spec);
    let mut rng = chacha(seed);
    for w in &mut params.weights {
        let fan_in = w.cols();
        let normal = Normal::new(0.0_f64, (2.0 / fan_in as f64).sqrt()).unwrap();
        for v in w.data_mut() {
            *v = S::from_f64(normal.sample(&mut rng));
        }
    }
    params
}

fn check_input<S: Scalar>(params: &ParamSet<S>, mask: Option<&Mask>, x: &Tensor<S>) -> Result<()> {
    let d0 = params.spec.effective_sizes()[0];
    if x.shape().len() != 2 || x.cols() != d0 {
        return Err(EngineError::ShapeMismatch {
            what: "input",
            expected: vec![x.shape().first().copied().unwrap_or(0), d0],
            got: x.shape().to_vec(),
        });
    }
    if let Some(m) = mask {
        if !m.matches_spec(&params.spec) {
            return Err(EngineError::ShapeMismatch {
                what: "mask",
                expected: params.weights.iter().flat_map(|w| w.shape().to_vec()).collect(),
                got: m.layers.iter().flat_map(|t| t.shape().to_vec()).collect(),
            });
        }
    }
    Ok(())
}

fn masked_weight<S: Scalar>(w: &Tensor<S>, m: Option<&Tensor<u8>>) -> Tensor<S> {
    match m {
        None => w.clone(),
        Some(m) => {
            let mut out = w.clone();
            for (v, &keep) in out.data_mut().iter_mut().zip(m.data()) {
                if keep == 0 {
                    *v = S::ZERO;
                }
            }
            out
        }
    }
}

fn affine<S: Scalar>(h: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let n = h.rows();
    let d = w.rows();
    let mut z = Tensor::zeros(vec![n, d]);
    matmul_nt(h, w, &mut z);
    for i in 0..n {
        let row = z.row_mut(i);
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    z
}

fn relu_inplace<S: Scalar>(t: &mut Tensor<S>) {
    for v in t.data_mut() {
        if *v < S::ZERO {
            *v = S::ZERO;
        }
    }
}

/// Full forward state kept for the backward pass.
struct ForwardCache<S> {
    /// Post-activation of each boundary, `hs[0]` is the input batch.
    hs: Vec<Tensor<S>>,
    /// Pre-activation of each layer.
    zs: Vec<Tensor<S>>,
}

fn forward_cached<S: Scalar>(
    params: &ParamSet<S>,
    mask: Option<&Mask>,
    x: &Tensor<S>,
) -> Result<ForwardCache<S>> {
    check_input(params, mask, x)?;
    let layers = params.num_layers();
    let mut hs = Vec::with_capacity(layers + 1);
    let mut zs = Vec::with_capacity(layers);
    hs.push(x.clone());
    for l in 0..layers {
        let w = masked_weight(&params.weights[l], mask.map(|m| &m.layers[l]));
        let mut z = affine(hs.last().unwrap(), &w, &params.biases[l]);
        zs.push(z.clone());
        if l + 1 < layers {
            relu_inplace(&mut z);
        }
        hs.push(z);
    }
    if !hs.last().unwrap().all_finite() {
        return Err(EngineError::NonFinite("forward logits"));
    }
    Ok(ForwardCache { hs, zs })
}

/// Logits for a batch; `X` is `n x d_0`, the result is `n x d_L`.
pub fn forward<S: Scalar>(
    params: &ParamSet<S>,
    mask: Option<&Mask>,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let cache = forward_cached(params, mask, x)?;
    Ok(cache.hs.into_iter().last().unwrap())
}

/// Forward pass that also records the post-ReLU activation matrix of each
/// hidden boundary, transposed to `d_l x n` as the alignment code expects.
pub fn forward_recording<S: Scalar>(
    params: &ParamSet<S>,
    mask: Option<&Mask>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let cache = forward_cached(params, mask, x)?;
    let layers = params.num_layers();
    let taps = cache.hs[1..layers].iter().map(|h| h.transposed()).collect();
    Ok((cache.hs.into_iter().last().unwrap(), taps))
}

/// Pre-activation matrices (`n x d_l`) of every hidden layer; used by the
/// variance-correction pass.
pub fn forward_preactivations<S: Scalar>(
    params: &ParamSet<S>,
    mask: Option<&Mask>,
    x: &Tensor<S>,
) -> Result<Vec<Tensor<S>>> {
    let mut cache = forward_cached(params, mask, x)?;
    cache.zs.pop();
    Ok(cache.zs)
}

/// Mean cross-entropy with natural log, stabilized by max-subtraction.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(EngineError::ShapeMismatch {
            what: "labels",
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    let mut total = 0.0_f64;
    for i in 0..n {
        let label = labels[i];
        if label >= c {
            return Err(EngineError::LabelOutOfRange { label, classes: c });
        }
        total += log_softmax_at(logits.row(i), label).to_f64();
    }
    Ok(S::from_f64(-total / n as f64))
}

fn log_softmax_at<S: Scalar>(row: &[S], label: usize) -> S {
    let mut m = row[0];
    for &v in &row[1..] {
        m = m.max(v);
    }
    let mut sum = S::ZERO;
    for &v in row {
        sum += (v - m).exp();
    }
    row[label] - m - sum.ln()
}

/// Row-wise softmax probabilities.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut m = row[0];
        for &v in row.iter().skip(1) {
            m = m.max(v);
        }
        let mut sum = S::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = S::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Gradient of [`cross_entropy`] with respect to all parameters. Weight
/// gradients are multiplied elementwise by the mask; bias gradients are not
/// masked.
pub fn backward<S: Scalar>(
    params: &ParamSet<S>,
    mask: Option<&Mask>,
    x: &Tensor<S>,
    labels: &[usize],
) -> Result<ParamSet<S>> {
    Ok(loss_and_grad(params, mask, x, labels)?.1)
}

/// Loss plus gradients in one pass; the training loop uses this directly.
pub fn loss_and_grad<S: Scalar>(
    params: &ParamSet<S>,
    mask: Option<&Mask>,
    x: &Tensor<S>,
    labels: &[usize],
) -> Result<(S, ParamSet<S>)> {
    let cache = forward_cached(params, mask, x)?;
    let layers = params.num_layers();
    let logits = &cache.hs[layers];
    let loss = cross_entropy(logits, labels)?;

    let n = x.rows();
    let inv_n = S::from_f64(1.0 / n as f64);
    // dL/dz_L = (softmax - onehot) / n
    let mut g = softmax_rows(logits);
    for i in 0..n {
        *g.at_mut(i, labels[i]) -= S::ONE;
    }
    for v in g.data_mut() {
        *v *= inv_n;
    }

    let mut grads = ParamSet::zeros(&params.spec);
    for l in (0..layers).rev() {
        // dW_l = g^T h_{l-1}; db_l = column sums of g
        matmul_tn(&g, &cache.hs[l], &mut grads.weights[l]);
        {
            let db = grads.biases[l].data_mut();
            for i in 0..n {
                for (acc, &v) in db.iter_mut().zip(g.row(i)) {
                    *acc += v;
                }
            }
        }
        if let Some(m) = mask {
            for (gv, &keep) in grads.weights[l].data_mut().iter_mut().zip(m.layers[l].data()) {
                if keep == 0 {
                    *gv = S::ZERO;
                }
            }
        }
        if l > 0 {
            let w = masked_weight(&params.weights[l], mask.map(|m| &m.layers[l]));
            let mut dh = Tensor::zeros(vec![n, w.cols()]);
            matmul_nn(&g, &w, &mut dh);
            // Gate through ReLU: derivative is 1 where z > 0.
            for (v, &z) in dh.data_mut().iter_mut().zip(cache.zs[l - 1].data()) {
                if z <= S::ZERO {
                    *v = S::ZERO;
                }
            }
            g = dh;
        }
    }
    if !grads.all_finite() {
        return Err(EngineError::NonFinite("gradients"));
    }
    Ok((loss, grads))
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss, accuracy and 0-1 error over a dataset, evaluated in batches.
pub fn evaluate<S: Scalar>(
    params: &ParamSet<S>,
    mask: Option<&Mask>,
    dataset: &Dataset<S>,
) -> Result<Evaluation> {
    let n = dataset.len();
    if n == 0 {
        return Err(EngineError::EmptyDataset);
    }
    let mut loss_sum = 0.0_f64;
    let mut correct = 0usize;
    let chunk = 1024;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let x = dataset.features_slice(start, end);
        let labels = &dataset.labels[start..end];
        let logits = forward(params, mask, &x)?;
        for (i, &label) in labels.iter().enumerate() {
            if label >= logits.cols() {
                return Err(EngineError::LabelOutOfRange {
                    label,
                    classes: logits.cols(),
                });
            }
            loss_sum -= log_softmax_at(logits.row(i), label).to_f64();
            if argmax_row(logits.row(i)) == label {
                correct += 1;
            }
        }
        start = end;
    }
    let accuracy = correct as f64 / n as f64;
    Ok(Evaluation {
        loss: loss_sum / n as f64,
        accuracy,
        error: 1.0 - accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub error: f64,
}
