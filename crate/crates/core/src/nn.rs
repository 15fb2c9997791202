//! Minimal differentiable classifier.
//!
//! A model is a flat `f64` parameter vector with a canonical layout derived
//! from its [`ModelSpec`]: layers in order, row-major weights then biases.
//! The flat layout is what makes parameter-space algebra (cosine similarity,
//! interpolation) well-defined across the whole engine.
//!
//! Two architectures are supported: dense multi-layer perceptrons and small
//! convolutional nets (3x3 kernels, stride 1, valid padding, global average
//! pooling before the classifier head). Activations are ReLU, outputs are
//! softmax class probabilities, gradients are analytic. All arithmetic is
//! 64-bit and single-threaded deterministic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Input dimensions as (length, width, channels).
pub type Dims = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// Fully-connected layers; `hidden_layers` are widths.
    Dense,
    /// 3x3/stride-1/valid convolutions; `hidden_layers` are channel counts.
    /// Global average pooling feeds a dense classifier head.
    Conv,
}

/// Architecture description defining forward/backward semantics and the
/// canonical parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dims: Dims,
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_loss")]
    pub loss_kind: LossKind,
    #[serde(default = "default_arch")]
    pub arch: ArchKind,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

fn default_arch() -> ArchKind {
    ArchKind::Dense
}

/// Offsets of one layer's parameters inside the flat vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerShape {
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl ModelSpec {
    /// A one-hidden-layer dense net, the desk-scale reference model.
    pub fn dense(input_dims: Dims, hidden_layers: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            input_dims,
            hidden_layers,
            num_classes,
            activation: Activation::Relu,
            loss_kind: LossKind::CrossEntropy,
            arch: ArchKind::Dense,
        }
    }

    pub fn input_len(&self) -> usize {
        let (l, w, c) = self.input_dims;
        l * w * c
    }

    pub fn validate(&self) -> Result<()> {
        let (l, w, c) = self.input_dims;
        if l == 0 || w == 0 || c == 0 {
            return Err(Error::config("input dimensions must all be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.hidden_layers.is_empty() {
            return Err(Error::config("at least one hidden layer is required"));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden layer sizes must be positive"));
        }
        if self.arch == ArchKind::Conv {
            let shrink = 2 * self.hidden_layers.len();
            if l <= shrink || w <= shrink {
                return Err(Error::config(format!(
                    "input {l}x{w} too small for {} valid 3x3 convolutions",
                    self.hidden_layers.len()
                )));
            }
        }
        Ok(())
    }

    /// Canonical layer layout: weights then biases, layers in order.
    pub fn layout(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::new();
        let mut offset = 0;
        let mut push = |weight_len: usize, bias_len: usize, fan_in: usize, fan_out: usize| {
            shapes.push(LayerShape {
                weight_offset: offset,
                weight_len,
                bias_offset: offset + weight_len,
                bias_len,
                fan_in,
                fan_out,
            });
            offset += weight_len + bias_len;
        };
        match self.arch {
            ArchKind::Dense => {
                let mut din = self.input_len();
                for &h in &self.hidden_layers {
                    push(din * h, h, din, h);
                    din = h;
                }
                push(din * self.num_classes, self.num_classes, din, self.num_classes);
            }
            ArchKind::Conv => {
                let mut cin = self.input_dims.2;
                for &cout in &self.hidden_layers {
                    // 3x3 kernels; fans follow the Glorot convention for conv.
                    push(cout * cin * 9, cout, cin * 9, cout * 9);
                    cin = cout;
                }
                push(cin * self.num_classes, self.num_classes, cin, self.num_classes);
            }
        }
        shapes
    }

    /// Total parameter count, a deterministic function of the spec.
    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|s| s.weight_len + s.bias_len)
            .sum()
    }

    /// Width of the penultimate representation (input to the classifier head).
    pub fn feature_dim(&self) -> usize {
        *self
            .hidden_layers
            .last()
            .expect("validated spec has at least one hidden layer")
    }
}

/// Flat, fixed-layout vector of all model weights; the unit of
/// parameter-space algebra.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Bit-exact equality, the standard for determinism checks.
    pub fn bits_eq(&self, other: &ParamVector) -> bool {
        self.len() == other.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// SGD-with-momentum state.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, param_len: usize) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(OptimState {
            learning_rate,
            momentum,
            velocity: vec![0.0; param_len],
        })
    }
}

/// A labeled minibatch: flat inputs (batch x input_len) and class indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_len: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_len: usize) -> Result<Self> {
        if input_len == 0 || inputs.len() != labels.len() * input_len {
            return Err(Error::config(format!(
                "batch shape mismatch: {} inputs vs {} labels x {} pixels",
                inputs.len(),
                labels.len(),
                input_len
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            input_len,
        })
    }

    pub fn from_images(images: &[&[f64]], labels: &[usize]) -> Result<Self> {
        let input_len = images.first().map(|i| i.len()).unwrap_or(0);
        let mut inputs = Vec::with_capacity(images.len() * input_len);
        for img in images {
            if img.len() != input_len {
                return Err(Error::config("images in a batch must share dimensions"));
            }
            inputs.extend_from_slice(img);
        }
        Batch::new(inputs, labels.to_vec(), input_len)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How parameter end-points are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Every call with the same seed returns the identical vector; used to
    /// start all subspace end-points at one point.
    ConstantShared,
    /// Varies with the seed; callers derive one seed per point.
    PerPointRandom,
}

/// Initializes parameters uniformly in +/- sqrt(6 / (fan_in + fan_out)) per
/// layer, biases zero. Deterministic in (spec, seed, mode).
pub fn init_params(spec: &ModelSpec, seed: u64, mode: InitMode) -> Result<ParamVector> {
    spec.validate()?;
    let tag = match mode {
        InitMode::ConstantShared => stream::INIT_CONSTANT,
        InitMode::PerPointRandom => stream::INIT_RANDOM,
    };
    let mut gen = rng::rng(rng::derive(seed, tag));
    let mut values = vec![0.0; spec.param_count()];
    for shape in spec.layout() {
        let bound = (6.0 / (shape.fan_in + shape.fan_out) as f64).sqrt();
        for v in &mut values[shape.weight_offset..shape.weight_offset + shape.weight_len] {
            *v = gen.gen_range(-bound..bound);
        }
        // biases stay zero
    }
    Ok(ParamVector::new(values))
}

fn check_shapes(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<()> {
    if batch.input_len != spec.input_len() {
        return Err(Error::config(format!(
            "batch input length {} does not match model input length {}",
            batch.input_len,
            spec.input_len()
        )));
    }
    if params.len() != spec.param_count() {
        return Err(Error::config(format!(
            "parameter vector length {} does not match spec parameter count {}",
            params.len(),
            spec.param_count()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes
        )));
    }
    Ok(())
}

/// Row-wise softmax with max-subtraction; `logits` is batch x k in place.
fn softmax_rows(logits: &mut [f64], k: usize) {
    for row in logits.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Everything the backward pass needs from a forward pass.
struct ForwardTrace {
    /// Post-activation values per layer. For dense nets: one entry per hidden
    /// layer (batch x width). For conv nets: one entry per conv layer in
    /// channel-first layout (batch x channels x h x w), plus the pooled
    /// features appended last (batch x channels).
    acts: Vec<Vec<f64>>,
    /// Spatial sizes (h, w) per conv layer output; empty for dense.
    conv_sizes: Vec<(usize, usize)>,
    logits: Vec<f64>,
}

fn forward_trace(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> ForwardTrace {
    let p = params.values();
    let b = batch.len();
    let k = spec.num_classes;
    let layout = spec.layout();
    match spec.arch {
        ArchKind::Dense => {
            let mut acts: Vec<Vec<f64>> = Vec::with_capacity(spec.hidden_layers.len());
            let mut cur: &[f64] = &batch.inputs;
            let mut din = spec.input_len();
            for (li, &h) in spec.hidden_layers.iter().enumerate() {
                let shape = layout[li];
                let w = &p[shape.weight_offset..shape.weight_offset + shape.weight_len];
                let bias = &p[shape.bias_offset..shape.bias_offset + shape.bias_len];
                let mut out = vec![0.0; b * h];
                for bi in 0..b {
                    let x = &cur[bi * din..(bi + 1) * din];
                    let o = &mut out[bi * h..(bi + 1) * h];
                    o.copy_from_slice(bias);
                    for (i, &xi) in x.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let wrow = &w[i * h..(i + 1) * h];
                        for (oj, &wij) in o.iter_mut().zip(wrow) {
                            *oj += xi * wij;
                        }
                    }
                    for v in o.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                acts.push(out);
                cur = acts.last().unwrap();
                din = h;
            }
            let shape = layout[layout.len() - 1];
            let w = &p[shape.weight_offset..shape.weight_offset + shape.weight_len];
            let bias = &p[shape.bias_offset..shape.bias_offset + shape.bias_len];
            let mut logits = vec![0.0; b * k];
            for bi in 0..b {
                let x = &cur[bi * din..(bi + 1) * din];
                let o = &mut logits[bi * k..(bi + 1) * k];
                o.copy_from_slice(bias);
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let wrow = &w[i * k..(i + 1) * k];
                    for (oj, &wij) in o.iter_mut().zip(wrow) {
                        *oj += xi * wij;
                    }
                }
            }
            ForwardTrace {
                acts,
                conv_sizes: Vec::new(),
                logits,
            }
        }
        ArchKind::Conv => {
            let (l, w0, c0) = spec.input_dims;
            let mut acts: Vec<Vec<f64>> = Vec::new();
            let mut conv_sizes: Vec<(usize, usize)> = Vec::new();
            let mut cin = c0;
            let (mut h, mut w) = (l, w0);
            for (li, &cout) in spec.hidden_layers.iter().enumerate() {
                let shape = layout[li];
                let ker = &p[shape.weight_offset..shape.weight_offset + shape.weight_len];
                let bias = &p[shape.bias_offset..shape.bias_offset + shape.bias_len];
                let (oh, ow) = (h - 2, w - 2);
                let mut out = vec![0.0; b * cout * oh * ow];
                for bi in 0..b {
                    for oc in 0..cout {
                        let kbase = oc * cin * 9;
                        for y in 0..oh {
                            for x in 0..ow {
                                let mut acc = bias[oc];
                                for ic in 0..cin {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let iv = if li == 0 {
                                                // channel-last input pixels
                                                batch.inputs[bi * spec.input_len()
                                                    + ((y + ky) * w + (x + kx)) * cin
                                                    + ic]
                                            } else {
                                                acts[li - 1][bi * cin * h * w
                                                    + ic * h * w
                                                    + (y + ky) * w
                                                    + (x + kx)]
                                            };
                                            acc += iv * ker[kbase + ic * 9 + ky * 3 + kx];
                                        }
                                    }
                                }
                                out[bi * cout * oh * ow + oc * oh * ow + y * ow + x] =
                                    if acc < 0.0 { 0.0 } else { acc };
                            }
                        }
                    }
                }
                acts.push(out);
                conv_sizes.push((oh, ow));
                cin = cout;
                h = oh;
                w = ow;
            }
            // global average pooling
            let spatial = (h * w) as f64;
            let mut pooled = vec![0.0; b * cin];
            let last = acts.last().unwrap();
            for bi in 0..b {
                for ch in 0..cin {
                    let base = bi * cin * h * w + ch * h * w;
                    pooled[bi * cin + ch] =
                        last[base..base + h * w].iter().sum::<f64>() / spatial;
                }
            }
            let shape = layout[layout.len() - 1];
            let wh = &p[shape.weight_offset..shape.weight_offset + shape.weight_len];
            let bias = &p[shape.bias_offset..shape.bias_offset + shape.bias_len];
            let mut logits = vec![0.0; b * k];
            for bi in 0..b {
                let x = &pooled[bi * cin..(bi + 1) * cin];
                let o = &mut logits[bi * k..(bi + 1) * k];
                o.copy_from_slice(bias);
                for (i, &xi) in x.iter().enumerate() {
                    let wrow = &wh[i * k..(i + 1) * k];
                    for (oj, &wij) in o.iter_mut().zip(wrow) {
                        *oj += xi * wij;
                    }
                }
            }
            acts.push(pooled);
            ForwardTrace {
                acts,
                conv_sizes,
                logits,
            }
        }
    }
}

/// Forward pass returning softmax class probabilities (batch x k, flat).
pub fn forward(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
    check_shapes(spec, params, batch)?;
    let mut trace = forward_trace(spec, params, batch);
    softmax_rows(&mut trace.logits, spec.num_classes);
    Ok(trace.logits)
}

/// Penultimate-layer representation (batch x feature_dim): the last hidden
/// activations for dense nets, the pooled features for conv nets.
pub fn forward_features(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
    check_shapes(spec, params, batch)?;
    let trace = forward_trace(spec, params, batch);
    Ok(trace.acts.last().cloned().unwrap_or_default())
}

/// Mean loss over the batch and its analytic gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(spec, params, batch)?;
    if batch.is_empty() {
        return Err(Error::config("cannot compute loss on an empty batch"));
    }
    let trace = forward_trace(spec, params, batch);
    let b = batch.len();
    let k = spec.num_classes;
    let inv_b = 1.0 / b as f64;

    // loss and dL/dlogits
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; b * k];
    match spec.loss_kind {
        LossKind::CrossEntropy => {
            for bi in 0..b {
                let row = &trace.logits[bi * k..(bi + 1) * k];
                let y = batch.labels[bi];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
                loss += max + sum.ln() - row[y];
                let drow = &mut dlogits[bi * k..(bi + 1) * k];
                for (j, dz) in drow.iter_mut().enumerate() {
                    let p = (row[j] - max).exp() / sum;
                    *dz = (p - if j == y { 1.0 } else { 0.0 }) * inv_b;
                }
            }
        }
        LossKind::MeanSquaredError => {
            for bi in 0..b {
                let row = &trace.logits[bi * k..(bi + 1) * k];
                let y = batch.labels[bi];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
                let probs: Vec<f64> = row.iter().map(|&z| (z - max).exp() / sum).collect();
                let g: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| 2.0 * (p - if j == y { 1.0 } else { 0.0 }))
                    .collect();
                loss += probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        let t = if j == y { 1.0 } else { 0.0 };
                        (p - t) * (p - t)
                    })
                    .sum::<f64>();
                let dot: f64 = g.iter().zip(&probs).map(|(gi, pi)| gi * pi).sum();
                let drow = &mut dlogits[bi * k..(bi + 1) * k];
                for j in 0..k {
                    drow[j] = probs[j] * (g[j] - dot) * inv_b;
                }
            }
        }
    }
    loss *= inv_b;

    let mut grad = vec![0.0; params.len()];
    backward(spec, params, batch, &trace, &dlogits, &mut grad);
    Ok((loss, grad))
}

fn backward(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    trace: &ForwardTrace,
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let p = params.values();
    let b = batch.len();
    let k = spec.num_classes;
    let layout = spec.layout();
    match spec.arch {
        ArchKind::Dense => {
            let nh = spec.hidden_layers.len();
            let mut delta = dlogits.to_vec(); // batch x dout of current layer
            for li in (0..=nh).rev() {
                let shape = layout[li];
                let din = shape.fan_in;
                let dout = shape.fan_out;
                let prev: &[f64] = if li == 0 {
                    &batch.inputs
                } else {
                    &trace.acts[li - 1]
                };
                {
                    let (wgrad, rest) = grad[shape.weight_offset..].split_at_mut(shape.weight_len);
                    let bgrad = &mut rest[..shape.bias_len];
                    for bi in 0..b {
                        let x = &prev[bi * din..(bi + 1) * din];
                        let d = &delta[bi * dout..(bi + 1) * dout];
                        for (j, &dj) in d.iter().enumerate() {
                            bgrad[j] += dj;
                        }
                        for (i, &xi) in x.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            let wrow = &mut wgrad[i * dout..(i + 1) * dout];
                            for (g, &dj) in wrow.iter_mut().zip(d) {
                                *g += xi * dj;
                            }
                        }
                    }
                }
                if li == 0 {
                    break;
                }
                // propagate to previous activations, applying the ReLU mask
                let w = &p[shape.weight_offset..shape.weight_offset + shape.weight_len];
                let act = &trace.acts[li - 1];
                let mut dprev = vec![0.0; b * din];
                for bi in 0..b {
                    let d = &delta[bi * dout..(bi + 1) * dout];
                    let a = &act[bi * din..(bi + 1) * din];
                    let dp = &mut dprev[bi * din..(bi + 1) * din];
                    for i in 0..din {
                        if a[i] > 0.0 {
                            let wrow = &w[i * dout..(i + 1) * dout];
                            let mut acc = 0.0;
                            for (wij, dj) in wrow.iter().zip(d) {
                                acc += wij * dj;
                            }
                            dp[i] = acc;
                        }
                    }
                }
                delta = dprev;
            }
        }
        ArchKind::Conv => {
            let (l, w0, c0) = spec.input_dims;
            let nconv = spec.hidden_layers.len();
            let clast = spec.hidden_layers[nconv - 1];
            let (lh, lw) = trace.conv_sizes[nconv - 1];
            let pooled = &trace.acts[nconv]; // batch x clast

            // classifier head
            let shape = layout[nconv];
            {
                let (wgrad, rest) = grad[shape.weight_offset..].split_at_mut(shape.weight_len);
                let bgrad = &mut rest[..shape.bias_len];
                for bi in 0..b {
                    let x = &pooled[bi * clast..(bi + 1) * clast];
                    let d = &dlogits[bi * k..(bi + 1) * k];
                    for (j, &dj) in d.iter().enumerate() {
                        bgrad[j] += dj;
                    }
                    for (i, &xi) in x.iter().enumerate() {
                        for (g, &dj) in wgrad[i * k..(i + 1) * k].iter_mut().zip(d) {
                            *g += xi * dj;
                        }
                    }
                }
            }
            // through pooling into the last conv output (ReLU mask applied)
            let wh = &p[shape.weight_offset..shape.weight_offset + shape.weight_len];
            let spatial = (lh * lw) as f64;
            let mut delta = vec![0.0; b * clast * lh * lw];
            let last_act = &trace.acts[nconv - 1];
            for bi in 0..b {
                let d = &dlogits[bi * k..(bi + 1) * k];
                for ch in 0..clast {
                    let mut dpool = 0.0;
                    for (j, &dj) in d.iter().enumerate() {
                        dpool += wh[ch * k + j] * dj;
                    }
                    dpool /= spatial;
                    let base = bi * clast * lh * lw + ch * lh * lw;
                    for s in 0..lh * lw {
                        if last_act[base + s] > 0.0 {
                            delta[base + s] = dpool;
                        }
                    }
                }
            }

            // conv layers, last to first
            let mut h = lh;
            let mut w = lw;
            for li in (0..nconv).rev() {
                let cout = spec.hidden_layers[li];
                let cin = if li == 0 { c0 } else { spec.hidden_layers[li - 1] };
                let (ih, iw) = (h + 2, w + 2);
                let shape = layout[li];
                let ker = &p[shape.weight_offset..shape.weight_offset + shape.weight_len];
                let mut dprev = vec![0.0; b * cin * ih * iw];
                {
                    let (wgrad, rest) = grad[shape.weight_offset..].split_at_mut(shape.weight_len);
                    let bgrad = &mut rest[..shape.bias_len];
                    for bi in 0..b {
                        for oc in 0..cout {
                            let dbase = bi * cout * h * w + oc * h * w;
                            let kbase = oc * cin * 9;
                            for y in 0..h {
                                for x in 0..w {
                                    let dj = delta[dbase + y * w + x];
                                    if dj == 0.0 {
                                        continue;
                                    }
                                    bgrad[oc] += dj;
                                    for ic in 0..cin {
                                        for ky in 0..3 {
                                            for kx in 0..3 {
                                                let iv = if li == 0 {
                                                    batch.inputs[bi * spec.input_len()
                                                        + ((y + ky) * iw + (x + kx)) * cin
                                                        + ic]
                                                } else {
                                                    trace.acts[li - 1][bi * cin * ih * iw
                                                        + ic * ih * iw
                                                        + (y + ky) * iw
                                                        + (x + kx)]
                                                };
                                                wgrad[kbase + ic * 9 + ky * 3 + kx] += iv * dj;
                                                dprev[bi * cin * ih * iw
                                                    + ic * ih * iw
                                                    + (y + ky) * iw
                                                    + (x + kx)] +=
                                                    ker[kbase + ic * 9 + ky * 3 + kx] * dj;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if li > 0 {
                    // ReLU mask of the previous conv layer's activations
                    let act = &trace.acts[li - 1];
                    for (dp, &a) in dprev.iter_mut().zip(act.iter()) {
                        if a <= 0.0 {
                            *dp = 0.0;
                        }
                    }
                    delta = dprev;
                    h = ih;
                    w = iw;
                }
                let _ = (l, w0);
            }
        }
    }
}

/// One SGD-with-momentum step, in place:
/// `velocity <- momentum * velocity + grad; params <- params - lr * velocity`.
pub fn sgd_step(params: &mut ParamVector, grad: &[f64], opt: &mut OptimState) -> Result<()> {
    if grad.len() != params.len() || opt.velocity.len() != params.len() {
        return Err(Error::config(
            "parameter, gradient, and velocity lengths must match",
        ));
    }
    let lr = opt.learning_rate;
    let m = opt.momentum;
    for ((p, v), g) in params
        .values_mut()
        .iter_mut()
        .zip(opt.velocity.iter_mut())
        .zip(grad)
    {
        *v = m * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Cosine similarity dot(a,b) / (|a| |b|), in [-1, 1].
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config("cosine similarity requires equal lengths"));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.values().iter().zip(b.values()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Cosine similarity plus its gradient with respect to `a`:
/// `d cos / d a = b / (|a| |b|) - cos * a / |a|^2`.
pub fn cosine_similarity_with_grad(a: &ParamVector, b: &ParamVector) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::config("cosine similarity requires equal lengths"));
    }
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (&x, &y) in a.values().iter().zip(b.values()) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let na = na2.sqrt();
    let nb = nb2.sqrt();
    let cos = dot / (na * nb);
    let inv = 1.0 / (na * nb);
    let grad = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| y * inv - cos * x / na2)
        .collect();
    Ok((cos, grad))
}

const ALPHA_EPS: f64 = 1e-9;

/// Validates interpolation coefficients: each in [0, 1], sum at most N.
pub fn validate_alphas(alphas: &[f64], n_points: usize) -> Result<()> {
    if alphas.len() != n_points {
        return Err(Error::InvalidCoefficients(format!(
            "{} coefficients for {} points",
            alphas.len(),
            n_points
        )));
    }
    if alphas.is_empty() {
        return Err(Error::InvalidCoefficients("empty coefficient list".into()));
    }
    for &a in alphas {
        if !a.is_finite() || a < -ALPHA_EPS || a > 1.0 + ALPHA_EPS {
            return Err(Error::InvalidCoefficients(format!(
                "coefficient {a} outside [0, 1]"
            )));
        }
    }
    let sum: f64 = alphas.iter().sum();
    if sum > n_points as f64 + ALPHA_EPS {
        return Err(Error::InvalidCoefficients(format!(
            "coefficient sum {sum} exceeds {n_points}"
        )));
    }
    Ok(())
}

/// Elementwise weighted sum of parameter points. Zero-weight terms are
/// skipped so one-hot coefficients return the end-point bit-exactly.
pub fn interpolate(points: &[ParamVector], alphas: &[f64]) -> Result<ParamVector> {
    if points.is_empty() {
        return Err(Error::InvalidCoefficients("no points to interpolate".into()));
    }
    validate_alphas(alphas, points.len())?;
    let len = points[0].len();
    if points.iter().any(|p| p.len() != len) {
        return Err(Error::config("interpolation points must share length"));
    }
    let mut out = vec![0.0; len];
    let mut first = true;
    for (point, &a) in points.iter().zip(alphas) {
        if a == 0.0 {
            continue;
        }
        if first {
            // assignment, not accumulation: one-hot coefficients return the
            // end-point bit-exactly
            for (o, &v) in out.iter_mut().zip(point.values()) {
                *o = a * v;
            }
            first = false;
        } else {
            for (o, &v) in out.iter_mut().zip(point.values()) {
                *o += a * v;
            }
        }
    }
    Ok(ParamVector::new(out))
}

/// The uniform coefficient vector 1/N, whose interpolation is the subspace centre.
pub fn uniform_alphas(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toy_spec() -> ModelSpec {
        ModelSpec::dense((2, 1, 1), vec![2], 2)
    }

    #[test]
    fn param_count_is_deterministic() {
        let spec = ModelSpec::dense((16, 16, 1), vec![32], 10);
        // 256*32 + 32 + 32*10 + 10
        assert_eq!(spec.param_count(), 8554);
        let conv = ModelSpec {
            arch: ArchKind::Conv,
            ..ModelSpec::dense((16, 16, 3), vec![16, 32, 32], 10)
        };
        // convs: 16*3*9+16, 32*16*9+32, 32*32*9+32; head: 32*10+10
        assert_eq!(conv.param_count(), 448 + 4640 + 9248 + 330);
    }

    #[test]
    fn constant_shared_init_is_bit_identical() {
        let spec = ModelSpec::dense((8, 8, 1), vec![8], 3);
        let a = init_params(&spec, 3407, InitMode::ConstantShared).unwrap();
        let b = init_params(&spec, 3407, InitMode::ConstantShared).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn per_point_random_varies_with_seed() {
        let spec = ModelSpec::dense((8, 8, 1), vec![8], 3);
        let a = init_params(&spec, 1, InitMode::PerPointRandom).unwrap();
        let b = init_params(&spec, 2, InitMode::PerPointRandom).unwrap();
        assert!(!a.bits_eq(&b));
    }

    #[test]
    fn biases_init_to_zero() {
        let spec = ModelSpec::dense((8, 8, 1), vec![8, 4], 3);
        for mode in [InitMode::ConstantShared, InitMode::PerPointRandom] {
            let p = init_params(&spec, 3407, mode).unwrap();
            for shape in spec.layout() {
                for &b in &p.values()[shape.bias_offset..shape.bias_offset + shape.bias_len] {
                    assert_eq!(b, 0.0);
                }
            }
        }
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let spec = ModelSpec::dense((4, 4, 1), vec![6], 5);
        let params = init_params(&spec, 7, InitMode::PerPointRandom).unwrap();
        let mut gen = crate::rng::rng(11);
        let inputs: Vec<f64> = (0..3 * 16).map(|_| gen.gen_range(0.0..1.0)).collect();
        let batch = Batch::new(inputs, vec![0, 2, 4], 16).unwrap();
        let probs = forward(&spec, &params, &batch).unwrap();
        for row in probs.chunks(5) {
            let s: f64 = row.iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let spec = ModelSpec::dense((3, 3, 1), vec![4], 4);
        let params = ParamVector::zeros(spec.param_count());
        let batch = Batch::new(vec![0.5; 9], vec![1], 9).unwrap();
        let probs = forward(&spec, &params, &batch).unwrap();
        for &p in &probs {
            assert_relative_eq!(p, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_matches_hand_computed_toy_net() {
        // 2-2-2 dense net, parameters set by hand. Layout: W1 (2x2 row-major),
        // b1, W2 (2x2), b2.
        let spec = toy_spec();
        let params = ParamVector::new(vec![
            0.1, -0.2, 0.3, 0.4, // W1
            0.05, -0.05, // b1
            0.2, -0.1, -0.3, 0.5, // W2
            0.0, 0.1, // b2
        ]);
        let batch = Batch::new(vec![1.0, 0.5, 0.0, 1.0], vec![0, 1], 2).unwrap();
        let probs = forward(&spec, &params, &batch).unwrap();
        // example 1: z1 = (0.30, -0.05) -> a = (0.30, 0); z2 = (0.06, 0.07)
        let p0 = 1.0 / (1.0 + (0.07f64 - 0.06).exp());
        assert_relative_eq!(probs[0], p0, epsilon = 1e-12);
        assert_relative_eq!(probs[1], 1.0 - p0, epsilon = 1e-12);
        // example 2: z1 = (0.35, 0.35) -> z2 = (-0.035, 0.24)
        let q0 = 1.0 / (1.0 + (0.24f64 + 0.035).exp());
        assert_relative_eq!(probs[2], q0, epsilon = 1e-12);
        assert_relative_eq!(probs[3], 1.0 - q0, epsilon = 1e-12);
    }

    /// Central finite differences, h = 1e-5; the independent gradient oracle.
    fn finite_diff_grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Vec<f64> {
        let h = 1e-5;
        let mut fd = vec![0.0; params.len()];
        let mut work = params.clone();
        for i in 0..params.len() {
            let orig = work.values()[i];
            work.values_mut()[i] = orig + h;
            let (lp, _) = loss_and_grad(spec, &work, batch).unwrap();
            work.values_mut()[i] = orig - h;
            let (lm, _) = loss_and_grad(spec, &work, batch).unwrap();
            work.values_mut()[i] = orig;
            fd[i] = (lp - lm) / (2.0 * h);
        }
        fd
    }

    pub(crate) fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut gen = crate::rng::rng(99);
        for (spec, nb) in [
            (ModelSpec::dense((3, 2, 1), vec![4], 3), 5),
            (
                ModelSpec {
                    loss_kind: LossKind::MeanSquaredError,
                    ..ModelSpec::dense((3, 2, 1), vec![4, 3], 3)
                },
                4,
            ),
            (
                ModelSpec {
                    arch: ArchKind::Conv,
                    ..ModelSpec::dense((8, 8, 1), vec![2, 3], 2)
                },
                3,
            ),
        ] {
            let params = init_params(&spec, 5, InitMode::PerPointRandom).unwrap();
            let n = spec.input_len();
            let inputs: Vec<f64> = (0..nb * n).map(|_| gen.gen_range(0.0..1.0)).collect();
            let labels: Vec<usize> =
                (0..nb).map(|_| gen.gen_range(0..spec.num_classes)).collect();
            let batch = Batch::new(inputs, labels, n).unwrap();
            let (_, grad) = loss_and_grad(&spec, &params, &batch).unwrap();
            let fd = finite_diff_grad(&spec, &params, &batch);
            let err = max_rel_err(&grad, &fd);
            assert!(err < 1e-4, "max relative error {err} for {spec:?}");
        }
    }

    #[test]
    fn confident_correct_predictions_have_near_zero_loss() {
        // One pass-through hidden unit, output biases +-100: softmax is
        // saturated at the correct class for label-0 examples.
        let spec = ModelSpec::dense((1, 1, 1), vec![1], 2);
        let params = ParamVector::new(vec![
            1.0, // W1
            0.0, // b1
            0.0, 0.0, // W2
            100.0, -100.0, // b2
        ]);
        let batch = Batch::new(vec![0.3, 0.8], vec![0, 0], 1).unwrap();
        let (loss, _) = loss_and_grad(&spec, &params, &batch).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn duplicated_batch_has_identical_loss() {
        let spec = ModelSpec::dense((2, 2, 1), vec![3], 3);
        let params = init_params(&spec, 21, InitMode::PerPointRandom).unwrap();
        let inputs = vec![0.1, 0.9, 0.4, 0.2, 0.8, 0.3, 0.5, 0.7];
        let batch = Batch::new(inputs.clone(), vec![0, 2], 4).unwrap();
        let doubled = Batch::new(
            [inputs.clone(), inputs].concat(),
            vec![0, 2, 0, 2],
            4,
        )
        .unwrap();
        let (l1, _) = loss_and_grad(&spec, &params, &batch).unwrap();
        let (l2, _) = loss_and_grad(&spec, &params, &doubled).unwrap();
        assert_relative_eq!(l1, l2, epsilon = 1e-12);
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut params = ParamVector::new(vec![1.0, -2.0, 3.0]);
        let before = params.clone();
        let mut opt = OptimState::new(0.1, 0.9, 3).unwrap();
        sgd_step(&mut params, &[0.0, 0.0, 0.0], &mut opt).unwrap();
        assert!(params.bits_eq(&before));
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut params = ParamVector::new(vec![1.0, 2.0]);
        let mut opt = OptimState::new(0.5, 0.0, 2).unwrap();
        sgd_step(&mut params, &[0.2, -0.4], &mut opt).unwrap();
        assert_relative_eq!(params.values()[0], 1.0 - 0.5 * 0.2, epsilon = 1e-15);
        assert_relative_eq!(params.values()[1], 2.0 + 0.5 * 0.4, epsilon = 1e-15);
    }

    #[test]
    fn sgd_momentum_second_step_displacement() {
        // constant gradient g, momentum 0.9: v1 = g, v2 = 1.9 g, so the
        // second step moves by lr * 1.9 * g
        let mut params = ParamVector::new(vec![0.0]);
        let mut opt = OptimState::new(0.1, 0.9, 1).unwrap();
        let g = [2.0];
        sgd_step(&mut params, &g, &mut opt).unwrap();
        let after_first = params.values()[0];
        sgd_step(&mut params, &g, &mut opt).unwrap();
        let second_disp = params.values()[0] - after_first;
        assert_relative_eq!(second_disp, -0.1 * 1.9 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn cosine_identities() {
        let v = ParamVector::new(vec![1.0, 2.0, -3.0]);
        let neg = ParamVector::new(vec![-1.0, -2.0, 3.0]);
        assert_relative_eq!(cosine_similarity(&v, &v).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(cosine_similarity(&v, &neg).unwrap(), -1.0, epsilon = 1e-12);
        let a = ParamVector::new(vec![1.0, 0.0]);
        let b = ParamVector::new(vec![0.0, 5.0]);
        assert_relative_eq!(cosine_similarity(&a, &b).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_degenerate() {
        let z = ParamVector::zeros(3);
        let v = ParamVector::new(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            cosine_similarity(&z, &v),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let a = ParamVector::new(vec![0.4, -1.2, 0.7, 2.0]);
        let b = ParamVector::new(vec![-0.3, 0.9, 1.1, -0.5]);
        let (_, grad) = cosine_similarity_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap.values_mut()[i] += h;
            let mut am = a.clone();
            am.values_mut()[i] -= h;
            let fd = (cosine_similarity(&ap, &b).unwrap() - cosine_similarity(&am, &b).unwrap())
                / (2.0 * h);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn interpolate_one_hot_returns_endpoint_bit_exactly() {
        let points = vec![
            ParamVector::new(vec![1.0, -0.0, 3.5]),
            ParamVector::new(vec![-2.0, 4.0, 0.25]),
        ];
        let mut alphas = vec![0.0, 0.0];
        for i in 0..2 {
            alphas.iter_mut().for_each(|a| *a = 0.0);
            alphas[i] = 1.0;
            let out = interpolate(&points, &alphas).unwrap();
            assert!(out.bits_eq(&points[i]));
        }
    }

    #[test]
    fn interpolate_uniform_is_mean_and_midpoint() {
        let points = vec![
            ParamVector::new(vec![1.0, 0.0]),
            ParamVector::new(vec![0.0, 1.0]),
        ];
        let mid = interpolate(&points, &[0.5, 0.5]).unwrap();
        assert_eq!(mid.values(), &[0.5, 0.5]);
        let mean = interpolate(&points, &uniform_alphas(2)).unwrap();
        assert_eq!(mean.values(), &[0.5, 0.5]);
    }

    #[test]
    fn interpolate_rejects_bad_coefficients() {
        let points = vec![ParamVector::zeros(2), ParamVector::zeros(2)];
        assert!(matches!(
            interpolate(&points, &[1.5, 0.0]),
            Err(Error::InvalidCoefficients(_))
        ));
        assert!(matches!(
            interpolate(&points, &[0.5]),
            Err(Error::InvalidCoefficients(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let spec = toy_spec();
        let params = ParamVector::zeros(spec.param_count());
        let batch = Batch::new(vec![0.0; 3], vec![0], 3).unwrap();
        assert!(matches!(
            forward(&spec, &params, &batch),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            xs in proptest::collection::vec(-5.0f64..5.0, 4..12),
            ys in proptest::collection::vec(-5.0f64..5.0, 4..12),
            c in 0.01f64..100.0,
        ) {
            let n = xs.len().min(ys.len());
            let a = ParamVector::new(xs[..n].to_vec());
            let b = ParamVector::new(ys[..n].to_vec());
            prop_assume!(a.values().iter().any(|&v| v != 0.0));
            prop_assume!(b.values().iter().any(|&v| v != 0.0));
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let scaled = ParamVector::new(a.values().iter().map(|&v| c * v).collect());
            let sab = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((ab - sab).abs() < 1e-10);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        }

        #[test]
        fn interpolate_is_linear_in_coefficients(
            vals in proptest::collection::vec(-3.0f64..3.0, 6),
            a0 in 0.0f64..0.5, a1 in 0.0f64..0.5,
            b0 in 0.0f64..0.5, b1 in 0.0f64..0.5,
        ) {
            let points = vec![
                ParamVector::new(vals[..3].to_vec()),
                ParamVector::new(vals[3..].to_vec()),
            ];
            let lhs = interpolate(&points, &[a0 + b0, a1 + b1]).unwrap();
            let pa = interpolate(&points, &[a0, a1]).unwrap();
            let pb = interpolate(&points, &[b0, b1]).unwrap();
            for i in 0..3 {
                let sum = pa.values()[i] + pb.values()[i];
                prop_assert!((lhs.values()[i] - sum).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_always_normalized(
            seed in 0u64..1000,
            nb in 1usize..5,
        ) {
            let spec = ModelSpec::dense((3, 3, 1), vec![5], 4);
            let params = init_params(&spec, seed, InitMode::PerPointRandom).unwrap();
            let mut gen = crate::rng::rng(seed ^ 0xABCD);
            let inputs: Vec<f64> = (0..nb * 9).map(|_| gen.gen_range(0.0..1.0)).collect();
            let labels = vec![0; nb];
            let batch = Batch::new(inputs, labels, 9).unwrap();
            let probs = forward(&spec, &params, &batch).unwrap();
            for row in probs.chunks(4) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
