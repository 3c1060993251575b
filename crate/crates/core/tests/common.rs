#![allow(dead_code)]

use auvire_core::datagen::{LabeledVideo, SyntheticConfig, SyntheticGenerator};
use auvire_core::network::{FeaturePair, ModelConfig};
use diffkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every layer count 1, small widths.
pub fn toy_config(d: usize, d_a: usize) -> ModelConfig {
    ModelConfig {
        d,
        d_a,
        q: d_a,
        kernel: 3,
        l_pre_r: 1,
        l_down_r: 1,
        l_up_r: 1,
        l_post_r: 1,
        l_retain_e: 1,
        l_down_e: 1,
        ..ModelConfig::default()
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn random_pair(seed: u64, t: usize, d: usize) -> FeaturePair<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeaturePair::new(random_tensor(&mut rng, &[t, d], 1.0), random_tensor(&mut rng, &[t, d], 1.0), 25.0).unwrap()
}

pub fn synthetic(t: usize, d: usize, n: u64, seed: u64) -> Vec<LabeledVideo> {
    let gen = SyntheticGenerator::new(SyntheticConfig {
        t,
        d,
        latent_dim: 4.min(d),
        seed,
        fake_duration_s: (0.2, 0.6),
        ..SyntheticConfig::default()
    })
    .unwrap();
    (0..n).map(|i| LabeledVideo::from_sample(gen.sample(i).unwrap())).collect()
}
