//! Small models and tensors shared by unit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::network::{Layer, Model, ModelMetadata};
use crate::numerics::{Padding, Tensor};

pub fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

pub fn rand_t(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// `logits = W x + b` over a `[1, d, 1]` input; `rows[j]` is the weight row of class `j`.
pub fn linear(rows: &[Vec<f64>], bias: &[f64]) -> Model {
    let c = rows.len();
    let d = rows[0].len();
    let mut w = vec![0.0; d * c];
    for (j, row) in rows.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            w[i * c + j] = v;
        }
    }
    Model::new(
        [1, d, 1],
        vec![
            Layer::Dense {
                weights: t(vec![d, c], w),
                bias: t(vec![c], bias.to_vec()),
            },
            Layer::Softmax,
        ],
        ModelMetadata::default(),
    )
    .unwrap()
}

/// conv -> relu -> pool -> flatten -> dense -> relu -> dense -> softmax on `[6, 6, 1]`.
pub fn small_cnn(rng: &mut ChaCha8Rng, classes: usize) -> Model {
    let layers = vec![
        Layer::Conv {
            kernels: rand_t(rng, vec![3, 3, 1, 3], -0.8, 0.8),
            bias: rand_t(rng, vec![3], -0.1, 0.1),
            stride: 1,
            padding: Padding::Same,
        },
        Layer::Relu,
        Layer::MaxPool2x2,
        Layer::Flatten,
        Layer::Dense {
            weights: rand_t(rng, vec![27, 8], -0.6, 0.6),
            bias: rand_t(rng, vec![8], -0.1, 0.1),
        },
        Layer::Relu,
        Layer::Dense {
            weights: rand_t(rng, vec![8, classes], -1.5, 1.5),
            bias: rand_t(rng, vec![classes], -0.1, 0.1),
        },
        Layer::Softmax,
    ];
    Model::new([6, 6, 1], layers, ModelMetadata::default()).unwrap()
}
