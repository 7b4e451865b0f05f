//! Input disruptions: additive Gaussian noise, down/up resampling and local
//! masking of token channel embeddings.
//!
//! Noise and resampling act on volumes before tokenization; local masking
//! zeroes a fixed number of channels in every token afterwards.

use dae_tensor::{Element, Tape, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DaeError, Result};
use crate::model::TokenGrid;
use crate::volume::{Dims, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct DisruptionConfig {
    pub noise_mu: f64,
    pub noise_sigma: f64,
    pub downsample_ratio: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Mask the same channel subset in every token instead of drawing one
    /// subset per token.
    pub mask_shared_channels: bool,
}

impl Default for DisruptionConfig {
    fn default() -> Self {
        Self {
            noise_mu: 0.0,
            noise_sigma: 0.1,
            downsample_ratio: 4.0,
            mask_ratio: 0.6,
            seed: 0,
            mask_shared_channels: false,
        }
    }
}

impl DisruptionConfig {
    /// No noise, no resampling, no masking.
    pub fn identity() -> Self {
        Self {
            noise_mu: 0.0,
            noise_sigma: 0.0,
            downsample_ratio: 1.0,
            mask_ratio: 0.0,
            seed: 0,
            mask_shared_channels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 || !self.noise_mu.is_finite() || !self.noise_sigma.is_finite() {
            return Err(DaeError::Parameter(format!(
                "noise needs finite mu and sigma >= 0, got mu={} sigma={}",
                self.noise_mu, self.noise_sigma
            )));
        }
        if self.downsample_ratio.is_nan() || self.downsample_ratio < 1.0 || !self.downsample_ratio.is_finite() {
            return Err(DaeError::Parameter(format!(
                "downsample_ratio must be >= 1, got {}",
                self.downsample_ratio
            )));
        }
        check_ratio(self.mask_ratio)
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(DaeError::Parameter(format!("mask_ratio must lie in [0, 1], got {r}")));
    }
    Ok(())
}

/// `x + n` with `n ~ N(mu, sigma^2)` drawn independently per voxel. The
/// result is neither clipped nor renormalized.
pub fn add_noise<R: Rng + ?Sized>(x: &Volume, mu: f64, sigma: f64, rng: &mut R) -> Result<Volume> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(DaeError::Parameter(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let voxels = x
        .voxels()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + (mu + sigma * z) as f32
        })
        .collect();
    x.with_voxels(voxels)
}

/// Downsamples by `epsilon` with trilinear interpolation and upsamples back
/// to the original grid the same way.
pub fn down_up(x: &Volume, epsilon: f64) -> Result<Volume> {
    if epsilon.is_nan() || epsilon < 1.0 {
        return Err(DaeError::Parameter(format!("downsample ratio must be >= 1, got {epsilon}")));
    }
    let dims = x.dims();
    if dims.iter().any(|&d| (d as f64) < epsilon) {
        return Err(DaeError::Parameter(format!(
            "volume {dims:?} is smaller than downsample ratio {epsilon}"
        )));
    }
    let low = dims.map(|d| ((d as f64 / epsilon).floor() as usize).max(1));
    let small = resize_trilinear(x.voxels(), dims, low);
    x.with_voxels(resize_trilinear(&small, low, dims))
}

/// Separable trilinear resize using half-voxel-centred coordinates, with
/// source positions clamped to the grid.
pub fn resize_trilinear(src: &[f32], from: Dims, to: Dims) -> Vec<f32> {
    let mut data = src.to_vec();
    let mut shape = from;
    for axis in (0..3).rev() {
        if shape[axis] != to[axis] {
            data = resize_axis(&data, shape, axis, to[axis]);
            shape[axis] = to[axis];
        }
    }
    data
}

fn resize_axis(src: &[f32], shape: Dims, axis: usize, out_len: usize) -> Vec<f32> {
    let in_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let scale = in_len as f64 / out_len as f64;
    let taps: Vec<(usize, usize, f32)> = (0..out_len)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect();
    let mut out = Vec::with_capacity(outer * out_len * inner);
    for o in 0..outer {
        let base = o * in_len * inner;
        for &(i0, i1, w) in &taps {
            let r0 = &src[base + i0 * inner..base + (i0 + 1) * inner];
            let r1 = &src[base + i1 * inner..base + (i1 + 1) * inner];
            out.extend(r0.iter().zip(r1).map(|(&a, &b)| a + w * (b - a)));
        }
    }
    out
}

/// Noise first, then down/up resampling. Local masking happens later, on
/// tokens.
pub fn disrupt<R: Rng + ?Sized>(x: &Volume, cfg: &DisruptionConfig, rng: &mut R) -> Result<Volume> {
    cfg.validate()?;
    let noisy = add_noise(x, cfg.noise_mu, cfg.noise_sigma, rng)?;
    down_up(&noisy, cfg.downsample_ratio)
}

/// The exact `(token, channel)` positions zeroed by local masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    token_count: usize,
    channel_count: usize,
    masked: Vec<Vec<usize>>,
    seed: u64,
}

/// Number of channels masked per token: `floor(r * C)`.
pub fn mask_count(ratio: f64, channels: usize) -> usize {
    (ratio * channels as f64).floor() as usize
}

impl MaskPlan {
    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sorted masked channel indices of one token.
    pub fn masked(&self, token: usize) -> &[usize] {
        &self.masked[token]
    }

    pub fn is_empty(&self) -> bool {
        self.masked.iter().all(Vec::is_empty)
    }

    /// `N×C` tensor of ones with zeros at masked positions.
    pub fn keep_tensor<T: Element>(&self) -> Tensor<T> {
        let c = self.channel_count;
        let mut t = Tensor::ones(&[self.token_count, c]);
        let data = t.data_mut();
        for (token, chans) in self.masked.iter().enumerate() {
            for &ch in chans {
                data[token * c + ch] = T::zero();
            }
        }
        t
    }
}

/// Draws `floor(r * C)` distinct channels per token, uniformly.
pub fn make_mask_plan(tokens: usize, channels: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    make_mask_plan_with(tokens, channels, ratio, seed, false)
}

/// Like [`make_mask_plan`]; with `shared` one subset is reused for every
/// token.
pub fn make_mask_plan_with(
    tokens: usize,
    channels: usize,
    ratio: f64,
    seed: u64,
    shared: bool,
) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let k = mask_count(ratio, channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let mut v = index::sample(rng, channels, k).into_vec();
        v.sort_unstable();
        v
    };
    let masked = if shared {
        let one = draw(&mut rng);
        vec![one; tokens]
    } else {
        (0..tokens).map(|_| draw(&mut rng)).collect()
    };
    Ok(MaskPlan {
        token_count: tokens,
        channel_count: channels,
        masked,
        seed,
    })
}

/// Zeroes the planned channels. Unmasked values pass through unchanged and
/// only they receive gradient.
pub fn apply_local_mask<T: Element>(tape: &mut Tape<T>, tokens: &TokenGrid, plan: &MaskPlan) -> Result<TokenGrid> {
    let shape = tape.shape(tokens.tokens).to_vec();
    if shape != [plan.token_count, plan.channel_count] {
        return Err(DaeError::Contract(format!(
            "mask plan is {}x{} but tokens are {shape:?}",
            plan.token_count, plan.channel_count
        )));
    }
    if plan.is_empty() {
        return Ok(tokens.clone());
    }
    let keep = tape.constant(plan.keep_tensor());
    let masked = tape.mul(tokens.tokens, keep)?;
    Ok(TokenGrid {
        tokens: masked,
        ..tokens.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::ModalityTag;

    fn tag() -> ModalityTag {
        ModalityTag::new("SYNTH_A").unwrap()
    }

    fn ramp(dims: Dims) -> Volume {
        let mut v = Vec::new();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    v.push(0.01 * z as f32 + 0.02 * y as f32 - 0.015 * x as f32);
                }
            }
        }
        Volume::new(dims, v, tag()).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let x = ramp([4, 4, 4]);
        let y = add_noise(&x, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let x = ramp([6, 6, 6]);
        let a = add_noise(&x, 0.0, 0.1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = add_noise(&x, 0.0, 0.1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn down_up_unit_ratio_is_identity() {
        let x = ramp([8, 8, 8]);
        assert_eq!(down_up(&x, 1.0).unwrap(), x);
    }

    #[test]
    fn down_up_preserves_constants() {
        let x = Volume::filled([12, 8, 16], 0.37, tag()).unwrap();
        for eps in [2.0, 3.0, 4.0] {
            let y = down_up(&x, eps).unwrap();
            assert!(y.voxels().iter().all(|&v| (v - 0.37).abs() <= 1e-6));
        }
    }

    #[test]
    fn down_up_reproduces_ramp_away_from_edges() {
        let x = ramp([16, 16, 16]);
        let y = down_up(&x, 4.0).unwrap();
        for z in 2..14 {
            for yy in 2..14 {
                for xx in 2..14 {
                    assert!((x.at(z, yy, xx) - y.at(z, yy, xx)).abs() < 1e-4, "at {z},{yy},{xx}");
                }
            }
        }
    }

    #[test]
    fn down_up_rejects_small_volume() {
        let x = Volume::filled([3, 8, 8], 0.0, tag()).unwrap();
        assert!(matches!(down_up(&x, 4.0), Err(DaeError::Parameter(_))));
    }

    #[test]
    fn plan_counts_match_floor() {
        let p = make_mask_plan(5, 10, 0.6, 1).unwrap();
        for t in 0..5 {
            assert_eq!(p.masked(t).len(), 6);
        }
        assert!(make_mask_plan(5, 10, 0.0, 1).unwrap().is_empty());
        let full = make_mask_plan(3, 10, 1.0, 1).unwrap();
        assert_eq!(full.masked(2), &(0..10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn shared_plan_reuses_subset() {
        let p = make_mask_plan_with(6, 12, 0.5, 9, true).unwrap();
        assert!((1..6).all(|t| p.masked(t) == p.masked(0)));
    }

    #[test]
    fn bad_ratio_rejected() {
        assert!(make_mask_plan(2, 4, 1.5, 0).is_err());
        let cfg = DisruptionConfig {
            downsample_ratio: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn disrupt_keeps_geometry_and_modality() {
        let x = ramp([8, 8, 8]);
        let y = disrupt(&x, &DisruptionConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert_eq!(y.modality(), x.modality());
        let id = disrupt(&x, &DisruptionConfig::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(id, x);
    }
}
