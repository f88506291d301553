#![allow(dead_code)]

use cbt_core::continual::{CbtConfig, UnlabeledSet};
use cbt_core::model::{Activation, EncoderConfig, EncoderKind};
use cbt_core::numerics::{AdamConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// A small MLP encoder on 3×8×8 images.
pub fn tiny_mlp(seed: u64) -> EncoderConfig {
    EncoderConfig {
        input_shape: (3, 8, 8),
        kind: EncoderKind::Mlp,
        hidden_widths: vec![6],
        embed_dim: 4,
        projector_widths: vec![5],
        activation: Activation::Tanh,
        init_seed: seed,
    }
}

/// A small convolutional encoder on 3×8×8 images.
pub fn tiny_conv(seed: u64) -> EncoderConfig {
    EncoderConfig {
        input_shape: (3, 8, 8),
        kind: EncoderKind::TinyConv,
        hidden_widths: vec![2, 3],
        embed_dim: 3,
        projector_widths: vec![4],
        activation: Activation::Tanh,
        init_seed: seed,
    }
}

pub fn images(n: usize, seed: u64) -> Tensor {
    random_tensor(&[n, 3, 8, 8], &mut rng(seed))
}

pub fn task(name: &str, n: usize, seed: u64) -> UnlabeledSet {
    UnlabeledSet::new(name, images(n, seed)).unwrap()
}

pub fn small_cbt(lambda: f64, epochs: usize, batch_size: usize) -> CbtConfig {
    CbtConfig {
        lambda,
        epochs,
        batch_size,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        ..CbtConfig::default()
    }
}
