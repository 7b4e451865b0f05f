#![allow(dead_code)]

use std::path::Path;

use dae_core::data::{synth_corpus, Dataset, SynthSpec};
use dae_core::model::ModelConfig;
use dae_core::volume::{Manifest, ModalityTag, Split, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tags(names: &[&str]) -> Vec<ModalityTag> {
    names.iter().map(|n| ModalityTag::new(n).unwrap()).collect()
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        patch: [2, 2, 2],
        input: [8, 8, 8],
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        latent_dim: 4,
    }
}

pub fn random_volume(dims: [usize; 3], seed: u64, modality: &str) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let vox = (0..n).map(|_| rng.random_range(0.0..1.0f32)).collect();
    Volume::new(dims, vox, ModalityTag::new(modality).unwrap()).unwrap()
}

/// Three-modality corpus of `count` phantoms each; returns (train, val).
pub fn corpus(dir: &Path, count: usize, dims: [usize; 3]) -> (Dataset, Dataset) {
    let spec = SynthSpec {
        seed: 0,
        count,
        modalities: tags(&["SYNTH_A", "SYNTH_B", "SYNTH_C"]),
        dims,
        val_fraction: 0.25,
        test_fraction: 0.0,
    };
    let path = synth_corpus(dir, &spec).unwrap();
    let m = Manifest::load(&path).unwrap();
    (
        Dataset::load(&m, Split::Train, true).unwrap(),
        Dataset::load(&m, Split::Val, true).unwrap(),
    )
}
