#![allow(dead_code)]

use cfl_core::backbone::{BackboneSpec, MlpSpec, TransformerSpec};
use cfl_core::feedback::{AdapterInit, AdapterSpec, AdapterVariant, ProjectorSpec};
use cfl_core::{Activation, CflModel, ModelSpec, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn mlp(d_x: usize, d_h: usize, d_y: usize, layers: usize) -> BackboneSpec {
    BackboneSpec::Mlp(MlpSpec {
        d_x,
        d_h,
        d_y,
        layers,
        activation: Activation::Gelu,
    })
}

pub fn transformer(vocab: usize, d_h: usize, d_y: usize, layers: usize) -> BackboneSpec {
    BackboneSpec::Transformer(TransformerSpec {
        vocab,
        max_len: 16,
        d_h,
        d_y,
        layers,
        heads: 2,
        mlp_ratio: 2,
    })
}

pub fn adapter(variant: AdapterVariant, init: AdapterInit) -> AdapterSpec {
    AdapterSpec {
        init,
        rank: 2,
        ..AdapterSpec::new(variant)
    }
}

pub fn random_init() -> AdapterInit {
    AdapterInit::Random { scale: 0.5 }
}

pub fn tiny(variant: AdapterVariant, init: AdapterInit, seed: u64) -> CflModel {
    CflModel::new(ModelSpec {
        backbone: mlp(3, 4, 3, 2),
        projector: ProjectorSpec::LowRank { d_z: 2, rank: 2 },
        adapter: adapter(variant, init),
        seed,
    })
    .unwrap()
}

pub fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
