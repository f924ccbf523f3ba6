//! Fixed-architecture classifier with activation capture and input gradients.
//!
//! A [`Model`] is an ordered list of layers ending in `Dense -> Softmax`.
//! Layer shapes are checked once at construction. Forward passes record the
//! output of every layer so that attribution can read intermediate neurons,
//! and backward passes route gradients to the input (and, during training,
//! to the parameters).
//!
//! Weight layouts follow the Keras convention: convolution kernels are
//! `[kh, kw, cin, cout]`, dense weights are `[in, out]`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{
    argmax, check_finite, dot, log_sum_exp, maxpool_forward, softmax_slice, ConvGeometry,
    Padding, Tensor,
};

mod incremental;
mod persist;
mod training;

pub use incremental::{IncrementalForward, MaskedView};
pub use training::{train_classifier, ArchitectureConfig, EpochLog, TrainingConfig, TrainingLog};

/// One layer of the network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: Padding,
    },
    MaxPool2x2,
    Relu,
    Flatten,
    Dense {
        weights: Tensor,
        bias: Tensor,
    },
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
            Layer::Softmax => "softmax",
        }
    }
}

/// Shape bookkeeping for one layer, computed at construction.
#[derive(Debug, Clone)]
pub(crate) struct LayerPlan {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub conv: Option<ConvGeometry>,
}

impl LayerPlan {
    pub fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }
    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }
}

/// Free-form provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub architecture: Option<ArchitectureConfig>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub notes: std::collections::BTreeMap<String, String>,
}

/// Immutable classifier. The only interior mutability is the pair of query
/// counters, which are atomics so concurrent readers stay safe.
#[derive(Debug)]
pub struct Model {
    layers: Vec<Layer>,
    plan: Vec<LayerPlan>,
    input_shape: [usize; 3],
    num_classes: usize,
    metadata: ModelMetadata,
    forward_passes: AtomicU64,
    gradient_passes: AtomicU64,
    hash: OnceLock<String>,
}

impl Clone for Model {
    /// Clones weights and metadata; counters start from zero.
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            plan: self.plan.clone(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            metadata: self.metadata.clone(),
            forward_passes: AtomicU64::new(0),
            gradient_passes: AtomicU64::new(0),
            hash: OnceLock::new(),
        }
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.input_shape == other.input_shape
            && self.num_classes == other.num_classes
            && self.metadata == other.metadata
    }
}

/// Outputs of every layer for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub input: Tensor,
    pub per_layer: Vec<Tensor>,
    pub logits: Tensor,
    pub probs: Tensor,
    pub predicted_class: usize,
    pool_indices: Vec<Vec<usize>>,
}

impl LayerActivations {
    pub fn confidence(&self) -> f64 {
        self.probs.data()[self.predicted_class]
    }

    /// Logit of `class` minus the largest other logit.
    pub fn logit_margin(&self, class: usize) -> f64 {
        let z = self.logits.data();
        z[class] - z[best_other(z, class)]
    }
}

/// Which class the margin loss compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelector {
    /// Highest-scoring class other than the source.
    BestOther,
    Class(usize),
}

/// Scalar objective whose input gradient can be requested.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    /// `logsumexp(z) - z[label]`.
    CrossEntropy { label: usize },
    /// `z[source] - z[target] + offset`.
    LogitMargin {
        source: usize,
        target: TargetSelector,
        offset: f64,
    },
    /// A single logit `z[class]`.
    Logit { class: usize },
    /// A single softmax probability `p[class]`.
    Probability { class: usize },
}

pub(crate) fn best_other(z: &[f64], class: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in z.iter().enumerate() {
        if j != class && (best == usize::MAX || v > z[best]) {
            best = j;
        }
    }
    best
}

impl LossSpec {
    fn check(&self, num_classes: usize) -> Result<()> {
        let idx = match *self {
            LossSpec::CrossEntropy { label } => vec![label],
            LossSpec::LogitMargin { source, target, .. } => match target {
                TargetSelector::BestOther => vec![source],
                TargetSelector::Class(t) => vec![source, t],
            },
            LossSpec::Logit { class } | LossSpec::Probability { class } => vec![class],
        };
        if let Some(bad) = idx.into_iter().find(|&i| i >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} outside [0, {num_classes})"
            )));
        }
        if matches!(*self, LossSpec::LogitMargin { source, target: TargetSelector::Class(t), .. } if t == source)
        {
            return Err(Error::InvalidArgument("margin target equals source".into()));
        }
        Ok(())
    }

    fn target(&self, logits: &[f64]) -> Option<usize> {
        match *self {
            LossSpec::LogitMargin { source, target, .. } => Some(match target {
                TargetSelector::BestOther => best_other(logits, source),
                TargetSelector::Class(t) => t,
            }),
            _ => None,
        }
    }

    pub fn value(&self, acts: &LayerActivations) -> f64 {
        let z = acts.logits.data();
        match *self {
            LossSpec::CrossEntropy { label } => log_sum_exp(z) - z[label],
            LossSpec::LogitMargin { source, offset, .. } => {
                z[source] - z[self.target(z).unwrap()] + offset
            }
            LossSpec::Logit { class } => z[class],
            LossSpec::Probability { class } => acts.probs.data()[class],
        }
    }

    /// Derivative of the loss with respect to the logits.
    pub fn logit_gradient(&self, acts: &LayerActivations) -> Vec<f64> {
        let z = acts.logits.data();
        let p = acts.probs.data();
        let mut g = vec![0.0; z.len()];
        match *self {
            LossSpec::CrossEntropy { label } => {
                g.copy_from_slice(p);
                g[label] -= 1.0;
            }
            LossSpec::LogitMargin { source, .. } => {
                g[source] = 1.0;
                g[self.target(z).unwrap()] = -1.0;
            }
            LossSpec::Logit { class } => g[class] = 1.0,
            LossSpec::Probability { class } => {
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = -p[class] * p[j];
                }
                g[class] += p[class];
            }
        }
        g
    }
}

/// Accumulated parameter gradients, one slot per layer.
#[derive(Debug, Clone)]
pub(crate) struct ParamGrads {
    pub slots: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl ParamGrads {
    pub fn zeros_like(model: &Model) -> Self {
        let slots = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { kernels, bias, .. } | Layer::Dense { weights: kernels, bias } => {
                    Some((vec![0.0; kernels.len()], vec![0.0; bias.len()]))
                }
                _ => None,
            })
            .collect();
        Self { slots }
    }
}

impl Model {
    /// Builds a model, checking that every layer's output feeds the next.
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>, metadata: ModelMetadata) -> Result<Self> {
        if input_shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("input shape {input_shape:?} has a zero extent")));
        }
        let n = layers.len();
        if n < 2 || !matches!(layers[n - 1], Layer::Softmax) || !matches!(layers[n - 2], Layer::Dense { .. }) {
            return Err(Error::Shape("model must end with Dense followed by Softmax".into()));
        }
        let mut plan = Vec::with_capacity(n);
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            let err = |msg: String| Error::Shape(format!("layer {i} ({}): {msg}", layer.kind()));
            let mut conv = None;
            let out_shape = match layer {
                Layer::Conv {
                    kernels,
                    bias,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(err(format!("expects HWC input, got {shape:?}")));
                    }
                    if kernels.rank() != 4 {
                        return Err(err(format!("kernels must be rank 4, got {:?}", kernels.shape())));
                    }
                    let k = kernels.shape();
                    if bias.shape() != [k[3]] {
                        return Err(err(format!("bias {:?} vs {} channels", bias.shape(), k[3])));
                    }
                    let g = ConvGeometry::new([shape[0], shape[1], shape[2]], [k[0], k[1], k[2], k[3]], *stride, *padding)
                        .map_err(|e| err(e.to_string()))?;
                    conv = Some(g);
                    vec![g.out_h, g.out_w, g.out_c]
                }
                Layer::MaxPool2x2 => {
                    if shape.len() != 3 || shape[0] % 2 != 0 || shape[1] % 2 != 0 {
                        return Err(err(format!("needs HWC input with even extents, got {shape:?}")));
                    }
                    vec![shape[0] / 2, shape[1] / 2, shape[2]]
                }
                Layer::Relu => shape.clone(),
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Dense { weights, bias } => {
                    let in_len: usize = shape.iter().product();
                    if weights.rank() != 2 || weights.shape()[0] != in_len {
                        return Err(err(format!(
                            "weights {:?} do not accept {in_len} inputs",
                            weights.shape()
                        )));
                    }
                    if bias.shape() != [weights.shape()[1]] {
                        return Err(err(format!("bias {:?} vs weights {:?}", bias.shape(), weights.shape())));
                    }
                    vec![weights.shape()[1]]
                }
                Layer::Softmax => {
                    if i != n - 1 {
                        return Err(err("softmax is only allowed as the final layer".into()));
                    }
                    shape.clone()
                }
            };
            plan.push(LayerPlan {
                in_shape: shape.clone(),
                out_shape: out_shape.clone(),
                conv,
            });
            shape = out_shape;
        }
        let num_classes = shape[0];
        if num_classes < 2 {
            return Err(Error::Shape("classifier needs at least two classes".into()));
        }
        Ok(Self {
            layers,
            plan,
            input_shape,
            num_classes,
            metadata,
            forward_passes: AtomicU64::new(0),
            gradient_passes: AtomicU64::new(0),
            hash: OnceLock::new(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn layer_output_shape(&self, layer: usize) -> &[usize] {
        &self.plan[layer].out_shape
    }

    pub fn layer_output_len(&self, layer: usize) -> usize {
        self.plan[layer].out_len()
    }

    #[cfg(test)]
    pub(crate) fn plan(&self) -> &[LayerPlan] {
        &self.plan
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        self.hash = OnceLock::new();
        &mut self.layers
    }

    /// Forward passes since construction or the last [`Model::reset_counters`].
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::SeqCst)
    }

    /// Backward (gradient) passes since construction or the last reset.
    pub fn gradient_passes(&self) -> u64 {
        self.gradient_passes.load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        self.forward_passes.store(0, Ordering::SeqCst);
        self.gradient_passes.store(0, Ordering::SeqCst);
    }

    pub(crate) fn count_forward(&self, n: u64) {
        self.forward_passes.fetch_add(n, Ordering::SeqCst);
    }

    fn check_input(&self, x: &[f64], shape: Option<&[usize]>) -> Result<()> {
        if let Some(s) = shape {
            if s != self.input_shape {
                return Err(Error::Shape(format!(
                    "input {s:?} does not match model input {:?}",
                    self.input_shape
                )));
            }
        }
        if x.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.input_len()
            )));
        }
        check_finite(x, "model input")
    }

    pub fn forward(&self, x: &Tensor) -> Result<LayerActivations> {
        self.check_input(x.data(), Some(x.shape()))?;
        Ok(self.forward_unchecked(&[x.data()])?.pop().unwrap())
    }

    /// Forward pass over several inputs at once. Each sample's result is
    /// bitwise identical to a single-sample [`Model::forward`].
    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<LayerActivations>> {
        for x in xs {
            self.check_input(x, None)?;
        }
        self.forward_unchecked(xs)
    }

    /// Predicted class only.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.forward(x)?.predicted_class)
    }

    fn forward_unchecked(&self, xs: &[&[f64]]) -> Result<Vec<LayerActivations>> {
        let n = xs.len();
        self.count_forward(n as u64);
        let mut outputs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(self.layers.len()); n];
        let mut pools: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(self.layers.len()); n];
        for (l, (layer, plan)) in self.layers.iter().zip(&self.plan).enumerate() {
            let inputs: Vec<&[f64]> = (0..n)
                .map(|s| if l == 0 { xs[s] } else { outputs[s][l - 1].as_slice() })
                .collect();
            let mut results: Vec<Vec<f64>> = Vec::with_capacity(n);
            let mut pool_idx: Vec<Vec<usize>> = vec![Vec::new(); n];
            match layer {
                Layer::Conv { kernels, bias, .. } => {
                    let g = plan.conv.as_ref().unwrap();
                    for x in &inputs {
                        let mut out = vec![0.0; plan.out_len()];
                        g.forward(x, kernels.data(), bias.data(), &mut out);
                        results.push(out);
                    }
                }
                Layer::MaxPool2x2 => {
                    let s = &plan.in_shape;
                    for (x, idx_slot) in inputs.iter().zip(pool_idx.iter_mut()) {
                        let mut out = vec![0.0; plan.out_len()];
                        let mut idx = vec![0; plan.out_len()];
                        maxpool_forward([s[0], s[1], s[2]], x, &mut out, &mut idx);
                        results.push(out);
                        *idx_slot = idx;
                    }
                }
                Layer::Relu => {
                    for x in &inputs {
                        results.push(x.iter().map(|&v| relu(v)).collect());
                    }
                }
                Layer::Flatten => {
                    for x in &inputs {
                        results.push(x.to_vec());
                    }
                }
                Layer::Dense { weights, bias } => {
                    results = dense_forward_batch(&inputs, weights.data(), bias.data(), plan.out_len());
                }
                Layer::Softmax => {
                    for x in &inputs {
                        results.push(softmax_slice(x)?);
                    }
                }
            }
            for (s, out) in results.into_iter().enumerate() {
                check_finite(&out, &format!("layer {l} ({}) output", layer.kind()))?;
                outputs[s].push(out);
            }
            for (s, idx) in pool_idx.into_iter().enumerate() {
                pools[s].push(idx);
            }
        }
        Ok(outputs
            .into_iter()
            .zip(pools)
            .zip(xs)
            .map(|((outs, pool_indices), x)| self.package(x, outs, pool_indices))
            .collect())
    }

    fn package(&self, x: &[f64], outs: Vec<Vec<f64>>, pool_indices: Vec<Vec<usize>>) -> LayerActivations {
        let per_layer: Vec<Tensor> = outs
            .into_iter()
            .zip(&self.plan)
            .map(|(o, p)| Tensor::from_parts_unchecked(p.out_shape.clone(), o))
            .collect();
        let l = per_layer.len();
        let logits = per_layer[l - 2].clone();
        let probs = per_layer[l - 1].clone();
        let predicted_class = argmax(probs.data());
        LayerActivations {
            input: Tensor::from_parts_unchecked(self.input_shape.to_vec(), x.to_vec()),
            per_layer,
            logits,
            probs,
            predicted_class,
            pool_indices,
        }
    }

    /// Gradient of `loss` with respect to the input.
    pub fn input_gradient(&self, x: &Tensor, loss: &LossSpec) -> Result<Tensor> {
        Ok(self.value_and_gradient(x, loss)?.1)
    }

    /// Loss value, input gradient and the activations they were computed from.
    pub fn value_and_gradient(&self, x: &Tensor, loss: &LossSpec) -> Result<(f64, Tensor, LayerActivations)> {
        loss.check(self.num_classes)?;
        let acts = self.forward(x)?;
        let value = loss.value(&acts);
        let grad = self.vector_jacobian_product(&acts, &loss.logit_gradient(&acts))?;
        Ok((value, grad, acts))
    }

    /// Batched version of [`Model::value_and_gradient`], one loss per input.
    pub fn value_and_gradient_batch(
        &self,
        xs: &[&[f64]],
        losses: &[LossSpec],
    ) -> Result<Vec<(f64, Vec<f64>, LayerActivations)>> {
        if xs.len() != losses.len() {
            return Err(Error::InvalidArgument("one loss per input required".into()));
        }
        for l in losses {
            l.check(self.num_classes)?;
        }
        let acts = self.forward_batch(xs)?;
        let cot: Vec<Vec<f64>> = acts.iter().zip(losses).map(|(a, l)| l.logit_gradient(a)).collect();
        let refs: Vec<&LayerActivations> = acts.iter().collect();
        let grads = self.backward(&refs, cot, None, true)?;
        Ok(acts
            .into_iter()
            .zip(grads)
            .zip(losses)
            .map(|((a, g), l)| (l.value(&a), g, a))
            .collect())
    }

    /// Input gradient of `cotangent · logits` for an existing forward pass.
    pub fn vector_jacobian_product(&self, acts: &LayerActivations, cotangent: &[f64]) -> Result<Tensor> {
        if cotangent.len() != self.num_classes {
            return Err(Error::Shape(format!(
                "cotangent has {} entries, model has {} classes",
                cotangent.len(),
                self.num_classes
            )));
        }
        let g = self.backward(&[acts], vec![cotangent.to_vec()], None, true)?.pop().unwrap();
        Ok(Tensor::from_parts_unchecked(self.input_shape.to_vec(), g))
    }

    /// `C x d` matrix whose row `j` is the input gradient of logit `j`.
    /// One forward pass shared by `C` backward passes.
    pub fn logit_jacobian(&self, x: &Tensor) -> Result<(Tensor, LayerActivations)> {
        let acts = self.forward(x)?;
        let c = self.num_classes;
        let cots: Vec<Vec<f64>> = (0..c)
            .map(|j| {
                let mut v = vec![0.0; c];
                v[j] = 1.0;
                v
            })
            .collect();
        let refs = vec![&acts; c];
        let rows = self.backward(&refs, cots, None, true)?;
        let d = self.input_len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Ok((Tensor::from_parts_unchecked(vec![c, d], data), acts))
    }

    /// Reverse pass from logit cotangents down to the input.
    pub(crate) fn backward(
        &self,
        acts: &[&LayerActivations],
        cotangents: Vec<Vec<f64>>,
        mut params: Option<&mut ParamGrads>,
        need_input: bool,
    ) -> Result<Vec<Vec<f64>>> {
        let n = acts.len();
        self.gradient_passes.fetch_add(n as u64, Ordering::SeqCst);
        let mut grads = cotangents;
        let last = self.layers.len() - 2;
        for l in (0..=last).rev() {
            let plan = &self.plan[l];
            let layer_in = |s: usize| -> &[f64] {
                if l == 0 {
                    acts[s].input.data()
                } else {
                    acts[s].per_layer[l - 1].data()
                }
            };
            grads = match &self.layers[l] {
                Layer::Dense { weights, .. } => {
                    let (in_len, out_len) = (plan.in_len(), plan.out_len());
                    let w = weights.data();
                    if let Some(pg) = params.as_deref_mut() {
                        let (gw, gb) = pg.slots[l].as_mut().unwrap();
                        for (s, g) in grads.iter().enumerate() {
                            for (b, &d) in gb.iter_mut().zip(g) {
                                *b += d;
                            }
                            let x = layer_in(s);
                            for k in 0..in_len {
                                let xk = x[k];
                                if xk == 0.0 {
                                    continue;
                                }
                                for (gwk, &d) in gw[k * out_len..(k + 1) * out_len].iter_mut().zip(g) {
                                    *gwk += xk * d;
                                }
                            }
                        }
                    }
                    if l == 0 && !need_input {
                        vec![Vec::new(); n]
                    } else {
                        let mut out = vec![vec![0.0; in_len]; n];
                        for k in 0..in_len {
                            let row = &w[k * out_len..(k + 1) * out_len];
                            for (o, g) in out.iter_mut().zip(&grads) {
                                o[k] = dot(row, g);
                            }
                        }
                        out
                    }
                }
                Layer::Relu => grads
                    .into_iter()
                    .enumerate()
                    .map(|(s, g)| {
                        let x = layer_in(s);
                        g.into_iter()
                            .zip(x)
                            .map(|(d, &v)| if v > 0.0 { d } else { 0.0 })
                            .collect()
                    })
                    .collect(),
                Layer::MaxPool2x2 => grads
                    .into_iter()
                    .enumerate()
                    .map(|(s, g)| {
                        let mut out = vec![0.0; plan.in_len()];
                        for (o, &src) in acts[s].pool_indices[l].iter().enumerate() {
                            out[src] += g[o];
                        }
                        out
                    })
                    .collect(),
                Layer::Flatten => grads,
                Layer::Conv { kernels, .. } => {
                    let geom = plan.conv.as_ref().unwrap();
                    let mut out = Vec::with_capacity(n);
                    for (s, g) in grads.iter().enumerate() {
                        if let Some(pg) = params.as_deref_mut() {
                            let (gk, gb) = pg.slots[l].as_mut().unwrap();
                            geom.backward_params(layer_in(s), g, gk, gb);
                        }
                        if l == 0 && !need_input {
                            out.push(Vec::new());
                        } else {
                            let mut gi = vec![0.0; plan.in_len()];
                            geom.backward_input(g, kernels.data(), &mut gi);
                            out.push(gi);
                        }
                    }
                    out
                }
                Layer::Softmax => unreachable!("softmax is never traversed backwards"),
            };
        }
        for g in &grads {
            check_finite(g, "input gradient")?;
        }
        Ok(grads)
    }

    /// SHA-256 of the serialized model, computed once.
    pub fn content_hash(&self) -> &str {
        self.hash.get_or_init(|| {
            let bytes = self.to_bytes();
            hex::encode(Sha256::digest(&bytes))
        })
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Dense layer over a batch. For every output the sum runs over inputs in
/// ascending order from 0.0, then the bias is added; zero inputs are skipped.
/// Output columns are processed in tiles so each weight row segment is read
/// once per batch while the accumulators stay in cache.
pub(crate) fn dense_forward_batch(inputs: &[&[f64]], w: &[f64], b: &[f64], out_len: usize) -> Vec<Vec<f64>> {
    const TILE: usize = 128;
    let mut outs = vec![vec![0.0; out_len]; inputs.len()];
    let in_len = inputs.first().map_or(0, |x| x.len());
    let mut j0 = 0;
    while j0 < out_len {
        let j1 = (j0 + TILE).min(out_len);
        for k in 0..in_len {
            let row = &w[k * out_len + j0..k * out_len + j1];
            for (out, x) in outs.iter_mut().zip(inputs) {
                let xk = x[k];
                if xk == 0.0 {
                    continue;
                }
                for (o, &wv) in out[j0..j1].iter_mut().zip(row) {
                    *o += xk * wv;
                }
            }
        }
        j0 = j1;
    }
    for out in &mut outs {
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    }
    outs
}
