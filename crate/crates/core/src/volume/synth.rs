//! Ellipsoid phantoms standing in for clinical scans.
//!
//! The anatomy (ellipsoids, labels, texture) depends only on the seed; the
//! modality only selects a monotone intensity transform, so one seed yields
//! the same label volume under every modality.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Dims, LabelVolume, ModalityTag, Volume};
use crate::error::{DaeError, Result};

pub const MIN_SYNTH_DIM: usize = 8;

const BACKGROUND: f64 = 0.1;
const LEVELS: [f64; 4] = [0.35, 0.55, 0.75, 0.95];
const TEXTURE: f64 = 0.04;

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    level: f64,
}

fn intensity_transform(modality: &ModalityTag) -> Box<dyn Fn(f64) -> f64> {
    match modality.as_str() {
        ModalityTag::SYNTH_A | ModalityTag::CT => Box::new(|a| a),
        ModalityTag::SYNTH_B | ModalityTag::T2 => Box::new(|a| 1.0 - a),
        ModalityTag::SYNTH_C => Box::new(|a| a * a),
        ModalityTag::T1 => Box::new(f64::sqrt),
        ModalityTag::FLAIR => Box::new(|a| 1.0 - a * a),
        ModalityTag::T1CE => Box::new(|a| a.powf(1.5)),
        other => {
            let digest = Sha256::digest(other.as_bytes());
            let gamma = 0.5 + 1.5 * f64::from(digest[0]) / 255.0;
            Box::new(move |a| a.powf(gamma))
        }
    }
}

/// Deterministic phantom of 1–4 ellipsoids plus its label volume.
pub fn synth_volume(seed: u64, modality: &ModalityTag, dims: Dims) -> Result<(Volume, LabelVolume)> {
    if dims.iter().any(|&d| d < MIN_SYNTH_DIM) {
        return Err(DaeError::Parameter(format!(
            "synthetic volumes need at least {MIN_SYNTH_DIM} voxels per axis, got {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=4);
    let mut levels = LEVELS;
    levels.shuffle(&mut rng);
    let shapes: Vec<Ellipsoid> = levels[..count]
        .iter()
        .map(|&level| Ellipsoid {
            center: dims.map(|d| rng.random_range(0.25..0.75) * d as f64),
            radii: dims.map(|d| rng.random_range(0.12..0.3) * d as f64),
            level,
        })
        .collect();
    let freq: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.05..0.2));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let transform = intensity_transform(modality);
    let n: usize = dims.iter().product();
    let mut voxels = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let mut level = BACKGROUND;
                let mut label = 0u8;
                for (i, e) in shapes.iter().enumerate() {
                    let r2: f64 = (0..3).map(|a| ((p[a] - e.center[a]) / e.radii[a]).powi(2)).sum();
                    if r2 <= 1.0 {
                        level = e.level;
                        label = i as u8 + 1;
                    }
                }
                let texture = TEXTURE * (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase).sin();
                let base = (level + texture).clamp(0.0, 1.0);
                voxels.push(transform(base) as f32);
                labels.push(label);
            }
        }
    }
    let volume = Volume::new(dims, voxels, modality.clone())?.normalized();
    Ok((volume, LabelVolume::new(dims, labels)?))
}
