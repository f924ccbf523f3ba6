//! Model file format.
//!
//! ```text
//! magic      8 bytes  "MLLOOMDL"
//! header_len u32 LE   length of the JSON header in bytes
//! header     JSON     ModelHeader
//! blobs               tensors in layer order: conv kernels, conv bias,
//!                     dense weights, dense bias (tensor on-disk form)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Padding, Tensor};

use super::{Layer, Model, ModelMetadata};

const MAGIC: &[u8; 8] = b"MLLOOMDL";
const FORMAT: &str = "mlloo-model";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDescriptor {
    Conv {
        kernel_shape: [usize; 4],
        stride: usize,
        padding: Padding,
    },
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Relu,
    Flatten,
    Dense { inputs: usize, outputs: usize },
    Softmax,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<LayerDescriptor>,
    metadata: ModelMetadata,
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv {
                    kernels,
                    stride,
                    padding,
                    ..
                } => {
                    let k = kernels.shape();
                    LayerDescriptor::Conv {
                        kernel_shape: [k[0], k[1], k[2], k[3]],
                        stride: *stride,
                        padding: *padding,
                    }
                }
                Layer::MaxPool2x2 => LayerDescriptor::MaxPool2x2,
                Layer::Relu => LayerDescriptor::Relu,
                Layer::Flatten => LayerDescriptor::Flatten,
                Layer::Dense { weights, .. } => LayerDescriptor::Dense {
                    inputs: weights.shape()[0],
                    outputs: weights.shape()[1],
                },
                Layer::Softmax => LayerDescriptor::Softmax,
            })
            .collect();
        let header = ModelHeader {
            format: FORMAT.into(),
            version: VERSION,
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            layers,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for l in &self.layers {
            if let Layer::Conv { kernels: w, bias, .. } | Layer::Dense { weights: w, bias } = l {
                w.write_to(&mut out).expect("vec write");
                bias.write_to(&mut out).expect("vec write");
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            kind: "model",
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| fmt("truncated header".into()))?;
        let header: ModelHeader =
            serde_json::from_slice(body).map_err(|e| fmt(format!("header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(fmt(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut cursor = &bytes[12 + hlen..];
        let mut read = |expect: &[usize]| -> Result<Tensor> {
            let t = Tensor::read_from(&mut cursor).map_err(|e| fmt(e.to_string()))?;
            if t.shape() != expect {
                return Err(fmt(format!("blob {:?}, descriptor says {expect:?}", t.shape())));
            }
            Ok(t)
        };
        let mut layers = Vec::with_capacity(header.layers.len());
        for d in &header.layers {
            layers.push(match *d {
                LayerDescriptor::Conv {
                    kernel_shape,
                    stride,
                    padding,
                } => Layer::Conv {
                    kernels: read(&kernel_shape)?,
                    bias: read(&[kernel_shape[3]])?,
                    stride,
                    padding,
                },
                LayerDescriptor::MaxPool2x2 => Layer::MaxPool2x2,
                LayerDescriptor::Relu => Layer::Relu,
                LayerDescriptor::Flatten => Layer::Flatten,
                LayerDescriptor::Dense { inputs, outputs } => Layer::Dense {
                    weights: read(&[inputs, outputs])?,
                    bias: read(&[outputs])?,
                },
                LayerDescriptor::Softmax => Layer::Softmax,
            });
        }
        if !cursor.is_empty() {
            return Err(fmt(format!("{} trailing bytes", cursor.len())));
        }
        let model = Model::new(header.input_shape, layers, header.metadata)
            .map_err(|e| fmt(e.to_string()))?;
        if model.num_classes != header.num_classes {
            return Err(fmt("class count disagrees with layers".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
