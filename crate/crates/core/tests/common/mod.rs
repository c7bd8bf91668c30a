#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use subspace_fusion::data::{generate, Dataset, SynthConfig};
use subspace_fusion::fusion::FusionConfig;
use subspace_fusion::objectives::Task;
use subspace_fusion::tensor::Tensor;
use subspace_fusion::train::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Small cohort and model that train in well under a second per epoch.
pub fn small_synth(n_samples: usize) -> SynthConfig {
    SynthConfig {
        n_samples,
        n_genes: 30,
        n_tumour_genes: 10,
        n_tme_genes: 20,
        height: 3,
        width: 3,
        channels: 4,
        snr: 3.0,
        ..SynthConfig::default()
    }
}

pub fn small_dataset(n_samples: usize, seed: u64) -> Dataset {
    generate(&small_synth(n_samples), seed).expect("valid small config")
}

pub fn small_train_config(task: Task, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        fusion: FusionConfig {
            heads: 2,
            embed_dim: 8,
            grid_h: 3,
            grid_w: 3,
            ..FusionConfig::default()
        },
        ..TrainConfig::new(task)
    }
}
