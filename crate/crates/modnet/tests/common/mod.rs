//! Shared fixtures for the integration tests.

use modnet::nn::{init_params, LayerSpec, ModelArchitecture, ParameterSet};
use modnet::scalar::Scalar;
use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A miniature version of the training stack: one conv block plus the
/// classifier head, small enough for exhaustive finite differences.
pub fn tiny_model<T: Scalar>(seed: u64) -> (ModelArchitecture, ParameterSet<T>) {
    let arch = ModelArchitecture {
        input_channels: 2,
        num_classes: 4,
        layers: vec![
            LayerSpec::Conv { name: "conv1".into(), in_ch: 2, out_ch: 3 },
            LayerSpec::Relu,
            LayerSpec::BatchNorm { name: "bn1".into(), ch: 3 },
            LayerSpec::MaxPool2,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { name: "fc".into(), in_dim: 3, out_dim: 4 },
        ],
    };
    let params = init_params(&arch, seed).unwrap();
    (arch, params)
}

pub fn random_batch<T: Scalar>(n: usize, ch: usize, h: usize, w: usize, seed: u64) -> (Array4<T>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = Array4::from_shape_fn((n, ch, h, w), |_| T::uniform01(&mut rng));
    let labels = (0..n).map(|_| rng.random_range(0..4)).collect();
    (batch, labels)
}
