//! Architecture registry and the mini-batch SGD training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Padding, Tensor};

use super::{Layer, LayerActivations, Model, ModelMetadata, ParamGrads};

/// Built-in architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchitectureConfig {
    /// `blocks` x (conv same-padded, relu, 2x2 max-pool), then
    /// flatten, dense `dense_units`, relu, dense C, softmax.
    MnistCnn {
        filters: usize,
        kernel_size: usize,
        blocks: usize,
        dense_units: usize,
    },
    /// Flatten, then dense + relu per hidden width, then dense C, softmax.
    Mlp { hidden: Vec<usize> },
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig::MnistCnn {
            filters: 32,
            kernel_size: 3,
            blocks: 2,
            dense_units: 1024,
        }
    }
}

impl ArchitectureConfig {
    /// Builds a model with He-uniform weights and zero biases.
    pub fn build(&self, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut shape = input_shape;
        let flat = match self {
            ArchitectureConfig::MnistCnn {
                filters,
                kernel_size,
                blocks,
                dense_units,
            } => {
                if *filters == 0 || *kernel_size == 0 || *dense_units == 0 {
                    return Err(Error::Config("mnist_cnn sizes must be positive".into()));
                }
                for _ in 0..*blocks {
                    let fan_in = kernel_size * kernel_size * shape[2];
                    layers.push(Layer::Conv {
                        kernels: he_uniform(&mut rng, vec![*kernel_size, *kernel_size, shape[2], *filters], fan_in),
                        bias: Tensor::from_parts_unchecked(vec![*filters], vec![0.0; *filters]),
                        stride: 1,
                        padding: Padding::Same,
                    });
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool2x2);
                    if shape[0] % 2 != 0 || shape[1] % 2 != 0 {
                        return Err(Error::Config(format!(
                            "{blocks} pooling blocks do not fit input {input_shape:?}"
                        )));
                    }
                    shape = [shape[0] / 2, shape[1] / 2, *filters];
                }
                layers.push(Layer::Flatten);
                let n = shape.iter().product();
                layers.push(dense(&mut rng, n, *dense_units));
                layers.push(Layer::Relu);
                *dense_units
            }
            ArchitectureConfig::Mlp { hidden } => {
                layers.push(Layer::Flatten);
                let mut n: usize = shape.iter().product();
                for &h in hidden {
                    if h == 0 {
                        return Err(Error::Config("mlp hidden width must be positive".into()));
                    }
                    layers.push(dense(&mut rng, n, h));
                    layers.push(Layer::Relu);
                    n = h;
                }
                n
            }
        };
        layers.push(dense(&mut rng, flat, num_classes));
        layers.push(Layer::Softmax);
        Model::new(
            input_shape,
            layers,
            ModelMetadata {
                architecture: Some(self.clone()),
                seed: Some(seed),
                notes: Default::default(),
            },
        )
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let n = shape.iter().product();
    Tensor::from_parts_unchecked(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

fn dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Layer {
    Layer::Dense {
        weights: he_uniform(rng, vec![inputs, outputs], inputs),
        bias: Tensor::from_parts_unchecked(vec![outputs], vec![0.0; outputs]),
    }
}

/// SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 32,
            epochs: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

/// Trains a fresh model of architecture `arch` on `train`.
///
/// Shuffling and initialisation draw from generators seeded by `hp.seed`,
/// so a run is bit-reproducible. Zero epochs returns the initial model.
pub fn train_classifier(
    train: &Dataset,
    arch: &ArchitectureConfig,
    hp: &TrainingConfig,
) -> Result<(Model, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if hp.batch_size == 0 || !(hp.lr > 0.0 && hp.lr.is_finite()) {
        return Err(Error::Config(format!(
            "batch size must be positive and lr finite positive, got {} / {}",
            hp.batch_size, hp.lr
        )));
    }
    let mut model = arch.build(train.shape(), train.num_classes(), hp.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let diverged = |loss: f64| Error::Diverged { epoch, batch: b, loss };
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| train.pixels(i)).collect();
            let acts = match model.forward_unchecked(&xs) {
                Ok(a) => a,
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            let mut cots = Vec::with_capacity(chunk.len());
            for (a, &i) in acts.iter().zip(chunk) {
                let y = train.label(i);
                let z = a.logits.data();
                batch_loss += log_sum_exp(z) - z[y];
                correct += usize::from(a.predicted_class == y);
                let mut g: Vec<f64> = a.probs.data().iter().map(|p| p * scale).collect();
                g[y] -= scale;
                cots.push(g);
            }
            if !batch_loss.is_finite() {
                return Err(diverged(batch_loss));
            }
            loss_sum += batch_loss;
            let refs: Vec<&LayerActivations> = acts.iter().collect();
            let mut grads = ParamGrads::zeros_like(&model);
            model.backward(&refs, cots, Some(&mut grads), false)?;
            apply_sgd(&mut model, &grads, hp.lr);
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        };
        tracing::info!(epoch, loss = entry.mean_loss, accuracy = entry.accuracy, "epoch done");
        log.epochs.push(entry);
    }
    model.reset_counters();
    Ok((model, log))
}

fn apply_sgd(model: &mut Model, grads: &ParamGrads, lr: f64) {
    for (layer, slot) in model.layers_mut().iter_mut().zip(&grads.slots) {
        let Some((gw, gb)) = slot else { continue };
        let (w, b) = match layer {
            Layer::Conv { kernels, bias, .. } => (kernels, bias),
            Layer::Dense { weights, bias } => (weights, bias),
            _ => continue,
        };
        for (v, g) in w.data_mut().iter_mut().zip(gw) {
            *v -= lr * g;
        }
        for (v, g) in b.data_mut().iter_mut().zip(gb) {
            *v -= lr * g;
        }
    }
}
