//! Leave-one-out attribution for the output and for intermediate neurons,
//! plus Integrated Gradients.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::network::{IncrementalForward, Layer, LossSpec, Model};
use crate::numerics::Tensor;

/// How a masking position maps to input scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Every scalar is its own position.
    PerScalar,
    /// A position is a pixel; all of its channels are masked together.
    PerPixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub reference_value: f64,
    pub granularity: Granularity,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            reference_value: 0.0,
            granularity: Granularity::PerPixel,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reference_value) {
            return Err(Error::InvalidArgument(format!(
                "reference value {} outside [0, 1]",
                self.reference_value
            )));
        }
        Ok(())
    }

    /// Number of masking positions for an input of shape `[h, w, c]`.
    pub fn num_positions(&self, shape: [usize; 3]) -> usize {
        match self.granularity {
            Granularity::PerScalar => shape.iter().product(),
            Granularity::PerPixel => shape[0] * shape[1],
        }
    }

    fn changes(&self, shape: [usize; 3], position: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        match self.granularity {
            Granularity::PerScalar => out.push((position, self.reference_value)),
            Granularity::PerPixel => {
                let c = shape[2];
                out.extend((0..c).map(|ch| (position * c + ch, self.reference_value)));
            }
        }
    }
}

/// Neurons of one layer whose attributions are recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub layer: usize,
    pub neurons: Vec<usize>,
}

/// Neurons recorded by multi-layer attribution. Row 0 of every record is the
/// predicted-class probability; `entries` follow in order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerSelection {
    pub entries: Vec<SelectionEntry>,
}

impl LayerSelection {
    /// Only the predicted-class probability.
    pub fn output_only() -> Self {
        Self::default()
    }

    /// Total number of rows `m`, including the output row.
    pub fn num_neurons(&self) -> usize {
        1 + self.entries.iter().map(|e| e.neurons.len()).sum::<usize>()
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        let softmax = model.num_layers() - 1;
        for e in &self.entries {
            if e.layer >= softmax {
                return Err(Error::InvalidArgument(format!(
                    "layer {} is not an intermediate layer (softmax is {softmax})",
                    e.layer
                )));
            }
            let width = model.layer_output_len(e.layer);
            if let Some(&n) = e.neurons.iter().find(|&&n| n >= width) {
                return Err(Error::InvalidArgument(format!(
                    "neuron {n} outside layer {} of width {width}",
                    e.layer
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("selection serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Loo,
    Ig,
}

/// `m x d` attribution scores; row 0 is the output-layer attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionRecord {
    pub input_id: usize,
    pub num_features: usize,
    pub per_neuron: Tensor,
    pub layer_selection: LayerSelection,
    pub method: AttributionMethod,
    pub mask: MaskSpec,
}

const RECORD_MAGIC: &[u8; 8] = b"MLLOOATR";
const RECORD_FORMAT: &str = "mlloo-attribution";
const RECORD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    format: String,
    version: u32,
    input_id: usize,
    method: AttributionMethod,
    mask: MaskSpec,
    selection: LayerSelection,
}

impl AttributionRecord {
    pub fn num_neurons(&self) -> usize {
        self.per_neuron.shape()[0]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let d = self.num_features;
        &self.per_neuron.data()[n * d..(n + 1) * d]
    }

    /// Magic, u32 LE header length, JSON header, then the `m x d` tensor.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&RecordHeader {
            format: RECORD_FORMAT.into(),
            version: RECORD_VERSION,
            input_id: self.input_id,
            method: self.method,
            mask: self.mask,
            selection: self.layer_selection.clone(),
        })
        .expect("header serializes");
        let mut out = RECORD_MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.per_neuron.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            kind: "attribution",
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 12 || &bytes[..8] != RECORD_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| fmt("truncated header".into()))?;
        let h: RecordHeader = serde_json::from_slice(body).map_err(|e| fmt(e.to_string()))?;
        if h.format != RECORD_FORMAT || h.version != RECORD_VERSION {
            return Err(fmt(format!("unsupported format {} v{}", h.format, h.version)));
        }
        let mut rest = &bytes[12 + hlen..];
        let t = Tensor::read_from(&mut rest).map_err(|e| fmt(e.to_string()))?;
        if !rest.is_empty() {
            return Err(fmt("trailing bytes".into()));
        }
        let m = h.selection.num_neurons();
        if t.rank() != 2 || t.shape()[0] != m {
            return Err(fmt(format!("tensor {:?} does not match {m} neurons", t.shape())));
        }
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(fmt("non-finite score".into()));
        }
        Ok(Self {
            input_id: h.input_id,
            num_features: t.shape()[1],
            per_neuron: t,
            layer_selection: h.selection,
            method: h.method,
            mask: h.mask,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// `phi_i = f(x)_c - f(x_(i))_c`, with `c` the clean prediction, using one
/// clean and `d` masked forward passes.
pub fn loo_attribution(model: &Model, x: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    let rec = ml_loo_attribution(model, x, &LayerSelection::output_only(), mask, 0)?;
    let d = rec.num_features;
    Tensor::new(vec![d], rec.per_neuron.into_data())
}

/// Attribution of every selected neuron from a single sweep of masked
/// passes: one clean pass plus one per masking position, regardless of how
/// many neurons are selected.
pub fn ml_loo_attribution(
    model: &Model,
    x: &Tensor,
    selection: &LayerSelection,
    mask: &MaskSpec,
    input_id: usize,
) -> Result<AttributionRecord> {
    mask.validate()?;
    selection.validate(model)?;
    let shape = model.input_shape();
    if x.shape() != shape {
        return Err(Error::Shape(format!(
            "input {:?} does not match model input {shape:?}",
            x.shape()
        )));
    }
    let d = mask.num_positions(shape);
    let m = selection.num_neurons();
    let mut inc = IncrementalForward::new(model, x)?;
    let c = inc.clean().predicted_class;
    let softmax = model.num_layers() - 1;
    let mut clean_vals = Vec::with_capacity(m);
    clean_vals.push(inc.clean().probs.data()[c]);
    for e in &selection.entries {
        let out = inc.clean().per_layer[e.layer].data();
        clean_vals.extend(e.neurons.iter().map(|&n| out[n]));
    }
    let mut scores = vec![0.0; m * d];
    let mut changes = Vec::new();
    for i in 0..d {
        mask.changes(shape, i, &mut changes);
        let view = inc.evaluate(&changes)?;
        scores[i] = clean_vals[0] - view.value(softmax, c);
        let mut row = 1;
        for e in &selection.entries {
            let out = view.layer_output(e.layer);
            for &n in &e.neurons {
                scores[row * d + i] = clean_vals[row] - out[n];
                row += 1;
            }
        }
    }
    Ok(AttributionRecord {
        input_id,
        num_features: d,
        per_neuron: Tensor::new(vec![m, d], scores)?,
        layer_selection: selection.clone(),
        method: AttributionMethod::Loo,
        mask: *mask,
    })
}

/// Integrated Gradients of the clean-pass class probability with a right
/// Riemann sum of `steps` points on the path from `baseline` to `x`.
pub fn integrated_gradients(model: &Model, x: &Tensor, baseline: &Tensor, steps: usize) -> Result<Tensor> {
    let c = model.forward(x)?.predicted_class;
    integrated_gradients_of(model, x, baseline, steps, LossSpec::Probability { class: c })
}

/// Integrated Gradients of an arbitrary scalar of the logits.
pub(crate) fn integrated_gradients_of(
    model: &Model,
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
    loss: LossSpec,
) -> Result<Tensor> {
    if baseline.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "baseline {:?} vs input {:?}",
            baseline.shape(),
            x.shape()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    let (xv, bv) = (x.data(), baseline.data());
    let diff: Vec<f64> = xv.iter().zip(bv).map(|(a, b)| a - b).collect();
    let mut total = vec![0.0; xv.len()];
    const CHUNK: usize = 16;
    let mut k = 1;
    while k <= steps {
        let end = (k + CHUNK).min(steps + 1);
        let points: Vec<Vec<f64>> = (k..end)
            .map(|j| {
                let a = j as f64 / steps as f64;
                bv.iter().zip(&diff).map(|(b, dd)| b + a * dd).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let losses = vec![loss; refs.len()];
        for (_, g, _) in model.value_and_gradient_batch(&refs, &losses)? {
            for (t, gi) in total.iter_mut().zip(&g) {
                *t += gi;
            }
        }
        k = end;
    }
    let data = total
        .iter()
        .zip(&diff)
        .map(|(t, dd)| dd * (t / steps as f64))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Output-only attribution record from Integrated Gradients with a zero
/// baseline, summed over channels for per-pixel granularity.
pub fn ig_record(model: &Model, x: &Tensor, steps: usize, mask: &MaskSpec, input_id: usize) -> Result<AttributionRecord> {
    let baseline = Tensor::from_parts_unchecked(x.shape().to_vec(), vec![mask.reference_value; x.len()]);
    let ig = integrated_gradients(model, x, &baseline, steps)?;
    let shape = model.input_shape();
    let d = mask.num_positions(shape);
    let scores: Vec<f64> = match mask.granularity {
        Granularity::PerScalar => ig.into_data(),
        Granularity::PerPixel => ig.data().chunks(shape[2]).map(|ch| ch.iter().sum()).collect(),
    };
    Ok(AttributionRecord {
        input_id,
        num_features: d,
        per_neuron: Tensor::new(vec![1, d], scores)?,
        layer_selection: LayerSelection::output_only(),
        method: AttributionMethod::Ig,
        mask: *mask,
    })
}

/// Largest calibration subset used for variance ranking.
pub const CALIBRATION_LIMIT: usize = 256;

/// Picks up to `per_layer_cap` neurons from every relu output: all of them if
/// the layer is small enough, otherwise those with the highest activation
/// variance over the calibration images (ties to the lower index). A
/// calibration set larger than [`CALIBRATION_LIMIT`] is subsampled with
/// `seed`.
pub fn select_layers(model: &Model, calibration: &[Tensor], per_layer_cap: usize, seed: u64) -> Result<LayerSelection> {
    if calibration.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    let chosen: Vec<&Tensor> = if calibration.len() > CALIBRATION_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, calibration.len(), CALIBRATION_LIMIT).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &calibration[i]).collect()
    } else {
        calibration.iter().collect()
    };
    let relu_layers: Vec<usize> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Relu))
        .map(|(i, _)| i)
        .collect();
    let mut sums: Vec<Vec<f64>> = relu_layers.iter().map(|&l| vec![0.0; model.layer_output_len(l)]).collect();
    let mut acts = Vec::with_capacity(chosen.len());
    for x in &chosen {
        let a = model.forward(x)?;
        for (s, &l) in sums.iter_mut().zip(&relu_layers) {
            for (acc, v) in s.iter_mut().zip(a.per_layer[l].data()) {
                *acc += v;
            }
        }
        acts.push(a);
    }
    let n = chosen.len() as f64;
    let mut entries = Vec::new();
    for (s, &l) in sums.iter().zip(&relu_layers) {
        let width = s.len();
        let neurons: Vec<usize> = if width <= per_layer_cap {
            (0..width).collect()
        } else {
            let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
            let mut var = vec![0.0; width];
            for a in &acts {
                for ((acc, v), mu) in var.iter_mut().zip(a.per_layer[l].data()).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            let mut order: Vec<usize> = (0..width).collect();
            order.sort_by(|&i, &j| var[j].total_cmp(&var[i]).then(i.cmp(&j)));
            let mut top = order[..per_layer_cap].to_vec();
            top.sort_unstable();
            top
        };
        if !neurons.is_empty() {
            entries.push(SelectionEntry { layer: l, neurons });
        }
    }
    Ok(LayerSelection { entries })
}

#[cfg(test)]
mod tests;
