//! Forward passes on inputs that differ from a fixed clean input in a few
//! positions.
//!
//! Only the activations reachable from the changed inputs are recomputed.
//! Convolution, relu and pooling outputs are recomputed exactly; a dense layer
//! fed by a sparse change is updated as `clean + sum_k delta_k * W[k, :]`,
//! which agrees with a full pass up to rounding. Each evaluation counts as one
//! forward pass on the model.

use crate::error::{Error, Result};
use crate::numerics::{check_finite, maxpool_window, softmax_slice};

use super::{dense_forward_batch, relu, Layer, LayerActivations, Model};

pub struct IncrementalForward<'m> {
    model: &'m Model,
    clean: LayerActivations,
    /// Level 0 is the input, level `l + 1` the output of layer `l`.
    scratch: Vec<Vec<f64>>,
    written: Vec<Vec<usize>>,
    whole: Vec<bool>,
    stamp: Vec<Vec<u32>>,
    epoch: u32,
    buf: Vec<f64>,
}

/// Activations of one masked evaluation.
pub struct MaskedView<'a> {
    levels: &'a [Vec<f64>],
}

impl MaskedView<'_> {
    /// Output of layer `layer`.
    pub fn layer_output(&self, layer: usize) -> &[f64] {
        &self.levels[layer + 1]
    }

    pub fn value(&self, layer: usize, index: usize) -> f64 {
        self.levels[layer + 1][index]
    }

    pub fn probs(&self) -> &[f64] {
        self.levels.last().unwrap()
    }
}

impl<'m> IncrementalForward<'m> {
    /// Runs the clean forward pass for `x` (counted once).
    pub fn new(model: &'m Model, x: &crate::numerics::Tensor) -> Result<Self> {
        let clean = model.forward(x)?;
        Ok(Self::from_activations(model, clean))
    }

    /// Reuses an existing clean pass without running the model again.
    pub fn from_activations(model: &'m Model, clean: LayerActivations) -> Self {
        let mut scratch = Vec::with_capacity(clean.per_layer.len() + 1);
        scratch.push(clean.input.data().to_vec());
        scratch.extend(clean.per_layer.iter().map(|t| t.data().to_vec()));
        let levels = scratch.len();
        Self {
            model,
            stamp: scratch.iter().map(|v| vec![0; v.len()]).collect(),
            written: vec![Vec::new(); levels],
            whole: vec![false; levels],
            scratch,
            clean,
            epoch: 0,
            buf: Vec::new(),
        }
    }

    pub fn clean(&self) -> &LayerActivations {
        &self.clean
    }

    fn clean_level(&self, level: usize) -> &[f64] {
        if level == 0 {
            self.clean.input.data()
        } else {
            self.clean.per_layer[level - 1].data()
        }
    }

    fn revert(&mut self) {
        for level in 0..self.scratch.len() {
            if self.whole[level] {
                let src = if level == 0 {
                    self.clean.input.data()
                } else {
                    self.clean.per_layer[level - 1].data()
                };
                self.scratch[level].copy_from_slice(src);
                self.whole[level] = false;
            } else {
                for &i in &self.written[level] {
                    self.scratch[level][i] = if level == 0 {
                        self.clean.input.data()[i]
                    } else {
                        self.clean.per_layer[level - 1].data()[i]
                    };
                }
            }
            self.written[level].clear();
        }
    }

    fn next_epoch(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            for s in &mut self.stamp {
                s.iter_mut().for_each(|v| *v = 0);
            }
            self.epoch = 1;
        }
    }

    /// Forward pass on the clean input with `changes` (flat index, value)
    /// applied.
    pub fn evaluate(&mut self, changes: &[(usize, f64)]) -> Result<MaskedView<'_>> {
        let d = self.scratch[0].len();
        if let Some(&(i, _)) = changes.iter().find(|(i, _)| *i >= d) {
            return Err(Error::InvalidArgument(format!("masked index {i} outside input of {d}")));
        }
        check_finite(&changes.iter().map(|c| c.1).collect::<Vec<_>>(), "masked value")?;
        self.revert();
        self.model.count_forward(1);
        self.next_epoch();

        let mut changed: Vec<usize> = Vec::new();
        for &(i, v) in changes {
            self.written[0].push(i);
            if self.scratch[0][i] != v {
                self.scratch[0][i] = v;
                if self.stamp[0][i] != self.epoch {
                    self.stamp[0][i] = self.epoch;
                    changed.push(i);
                }
            }
        }
        // A later entry may restore the clean value.
        changed.retain(|&i| self.scratch[0][i] != self.clean.input.data()[i]);

        let model = self.model;
        for (l, (layer, plan)) in model.layers.iter().zip(&model.plan).enumerate() {
            if changed.is_empty() {
                break;
            }
            let (lower, upper) = self.scratch.split_at_mut(l + 1);
            let input = &lower[l];
            let out = &mut upper[0];
            let out_level = l + 1;
            let mut next = Vec::new();
            match layer {
                Layer::Conv { kernels, bias, .. } => {
                    let g = plan.conv.as_ref().unwrap();
                    let oc = g.out_c;
                    self.buf.resize(oc, 0.0);
                    let stamp = &mut self.stamp[out_level];
                    let epoch = self.epoch;
                    let mut positions = Vec::new();
                    for &i in &changed {
                        let pix = i / g.in_c;
                        let (iy, ix) = (pix / g.in_w, pix % g.in_w);
                        g.affected_outputs(iy, ix, |oy, ox| {
                            let p = oy * g.out_w + ox;
                            if stamp[p * oc] != epoch {
                                stamp[p * oc] = epoch;
                                positions.push((oy, ox));
                            }
                        });
                    }
                    for (oy, ox) in positions {
                        g.position(input, kernels.data(), bias.data(), oy, ox, &mut self.buf);
                        let base = (oy * g.out_w + ox) * oc;
                        for (c, &v) in self.buf.iter().enumerate() {
                            if out[base + c] != v {
                                out[base + c] = v;
                                next.push(base + c);
                            }
                            self.written[out_level].push(base + c);
                        }
                    }
                }
                Layer::Relu => {
                    for &i in &changed {
                        let v = relu(input[i]);
                        self.written[out_level].push(i);
                        if out[i] != v {
                            out[i] = v;
                            next.push(i);
                        }
                    }
                }
                Layer::MaxPool2x2 => {
                    let s = &plan.in_shape;
                    let (w, c) = (s[1], s[2]);
                    let ow = w / 2;
                    let stamp = &mut self.stamp[out_level];
                    let epoch = self.epoch;
                    for &i in &changed {
                        let pix = i / c;
                        let (oy, ox) = (pix / w / 2, (pix % w) / 2);
                        let p = oy * ow + ox;
                        if stamp[p * c] == epoch {
                            continue;
                        }
                        stamp[p * c] = epoch;
                        let written = &mut self.written[out_level];
                        maxpool_window([s[0], w, c], input, oy, ox, |ch, v, _| {
                            let o = p * c + ch;
                            written.push(o);
                            if out[o] != v {
                                out[o] = v;
                                next.push(o);
                            }
                        });
                    }
                }
                Layer::Flatten => {
                    for &i in &changed {
                        self.written[out_level].push(i);
                        out[i] = input[i];
                    }
                    next = std::mem::take(&mut changed);
                }
                Layer::Dense { weights, bias } => {
                    let in_len = plan.in_len();
                    let out_len = plan.out_len();
                    let w = weights.data();
                    if changed.len() * 4 < in_len {
                        let clean_in = if l == 0 {
                            self.clean.input.data()
                        } else {
                            self.clean.per_layer[l - 1].data()
                        };
                        changed.sort_unstable();
                        for &k in &changed {
                            let delta = input[k] - clean_in[k];
                            let row = &w[k * out_len..(k + 1) * out_len];
                            for (o, &wv) in out.iter_mut().zip(row) {
                                *o += delta * wv;
                            }
                        }
                    } else {
                        let fresh = dense_forward_batch(&[input.as_slice()], w, bias.data(), out_len);
                        out.copy_from_slice(&fresh[0]);
                    }
                    self.whole[out_level] = true;
                    next = (0..out_len).collect();
                }
                Layer::Softmax => {
                    let p = softmax_slice(input)?;
                    out.copy_from_slice(&p);
                    self.whole[out_level] = true;
                }
            }
            check_finite_indices(out, &next, l)?;
            changed = next;
        }
        Ok(MaskedView { levels: &self.scratch })
    }

    /// Input dimensionality of the underlying model.
    pub fn input_len(&self) -> usize {
        self.clean_level(0).len()
    }
}

fn check_finite_indices(out: &[f64], idx: &[usize], layer: usize) -> Result<()> {
    for &i in idx {
        if !out[i].is_finite() {
            return Err(Error::NonFinite(format!("layer {layer} output {i} under masking")));
        }
    }
    Ok(())
}
