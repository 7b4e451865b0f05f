//! Named finite-difference checks of every differentiable building block,
//! from single ops up to a full forward pass.

use dae_tensor::gradcheck::{check_f32, check_f64, DiffFn, GradCheckConfig, GradCheckReport};
use dae_tensor::{Element, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::disruption::{make_mask_plan, MaskPlan};
use crate::error::{DaeError, Result};
use crate::losses::{cmcl_loss, dice_loss, label_matrix, pretrain_loss, similarity, LossConfig};
use crate::model::{Bound, DaeModel, Head, ModelConfig};
use crate::volume::{ModalityTag, Volume};

/// Bound for single ops and losses in 64-bit mode.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Bound for the 32-bit end-to-end forward check.
pub const FORWARD_TOLERANCE: f64 = 1e-3;

fn tensor_err(e: DaeError) -> TensorError {
    match e {
        DaeError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

/// Contracts an output against fixed irregular weights so every element
/// has a distinct slope.
fn weighted_sum<T: Element>(tape: &mut Tape<T>, y: Var) -> dae_tensor::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |i| T::of((i as f64 * 0.7).sin() + 1.1)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Configuration of the miniature model used by the block and forward checks.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        patch: [2, 2, 2],
        input: [8, 8, 8],
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        latent_dim: 4,
    }
}

const BLOCK_PARAMS: [&str; 12] = [
    "blocks.0.norm1.weight",
    "blocks.0.norm1.bias",
    "blocks.0.attn.qkv.weight",
    "blocks.0.attn.qkv.bias",
    "blocks.0.attn.proj.weight",
    "blocks.0.attn.proj.bias",
    "blocks.0.norm2.weight",
    "blocks.0.norm2.bias",
    "blocks.0.mlp.fc1.weight",
    "blocks.0.mlp.fc1.bias",
    "blocks.0.mlp.fc2.weight",
    "blocks.0.mlp.fc2.bias",
];

#[derive(Clone, Debug)]
enum Case {
    Matmul,
    Softmax,
    LayerNorm,
    Gelu,
    Sigmoid,
    L1,
    AttentionBlock,
    Cmcl(Vec<ModalityTag>),
    Dice(Vec<u8>),
    Forward {
        crops: Vec<Volume>,
        plans: Vec<MaskPlan>,
        names: Vec<String>,
    },
}

impl DiffFn for Case {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, v: &[Var]) -> dae_tensor::Result<Var> {
        match self {
            Case::Matmul => {
                let y = tape.matmul(v[0], v[1])?;
                weighted_sum(tape, y)
            }
            Case::Softmax => {
                let a = tape.softmax(v[0], 0)?;
                let b = tape.softmax(v[0], 1)?;
                let y = tape.mul(a, b)?;
                weighted_sum(tape, y)
            }
            Case::LayerNorm => {
                let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(tape, y)
            }
            Case::Gelu => {
                let y = tape.gelu(v[0]);
                weighted_sum(tape, y)
            }
            Case::Sigmoid => {
                let y = tape.sigmoid(v[0]);
                weighted_sum(tape, y)
            }
            Case::L1 => tape.l1(v[0], v[1]),
            Case::AttentionBlock => {
                let model = DaeModel::<T>::new(check_model_config(), Head::Reconstruction, 0).map_err(tensor_err)?;
                let names: Vec<String> = BLOCK_PARAMS.iter().map(|s| s.to_string()).collect();
                let b = Bound::from_vars(&names, v[1..].to_vec()).map_err(tensor_err)?;
                let y = model.block(tape, &b, v[0], 0).map_err(tensor_err)?;
                weighted_sum(tape, y)
            }
            Case::Cmcl(mods) => {
                let z = tape.normalize_rows(v[0])?;
                let sim = similarity(tape, z, 0.07).map_err(tensor_err)?;
                cmcl_loss(tape, &sim, &label_matrix(mods), 0.05).map_err(tensor_err)
            }
            Case::Dice(labels) => {
                let p = tape.softmax(v[0], 0)?;
                dice_loss(tape, p, labels, 1e-5).map_err(tensor_err)
            }
            Case::Forward { crops, plans, names } => {
                let model = DaeModel::<T>::new(check_model_config(), Head::Reconstruction, 0).map_err(tensor_err)?;
                let b = Bound::from_vars(names, v.to_vec()).map_err(tensor_err)?;
                let mut recons = Vec::new();
                let mut targets = Vec::new();
                let mut latents = Vec::new();
                for (crop, plan) in crops.iter().zip(plans) {
                    let (r, z) = model.forward_disrupted(tape, &b, crop, plan).map_err(tensor_err)?;
                    recons.push(r);
                    latents.push(z);
                    let t = model.patch_rows(crop).map_err(tensor_err)?;
                    targets.push(tape.constant(t));
                }
                let recon = tape.concat(&recons, 0)?;
                let target = tape.concat(&targets, 0)?;
                let z = tape.concat(&latents, 0)?;
                let mods: Vec<_> = crops.iter().map(|c| c.modality().clone()).collect();
                let loss = pretrain_loss(tape, recon, target, z, &mods, &LossConfig::default()).map_err(tensor_err)?;
                Ok(loss.total)
            }
        }
    }
}

fn case_inputs(name: &str, seed: u64) -> Result<(Case, Vec<Tensor<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let out = match name {
        "matmul" => (Case::Matmul, vec![random(&[3, 4], r, -1.5, 1.5), random(&[4, 5], r, -1.5, 1.5)]),
        "softmax" => (Case::Softmax, vec![random(&[4, 5], r, -2.0, 2.0)]),
        "layer_norm" => (
            Case::LayerNorm,
            vec![random(&[3, 6], r, -1.5, 1.5), random(&[6], r, 0.5, 1.5), random(&[6], r, -0.5, 0.5)],
        ),
        "gelu" => (Case::Gelu, vec![random(&[3, 4], r, -3.0, 3.0)]),
        "sigmoid" => (Case::Sigmoid, vec![random(&[3, 4], r, -4.0, 4.0)]),
        "l1" => {
            // Keep |a - b| well clear of the kink at zero.
            let a = random(&[4, 5], r, -1.0, 1.0);
            let b = Tensor::from_fn(&[4, 5], |i| {
                let gap = r.random_range(0.1..1.0);
                a.data()[i] + if r.random::<bool>() { gap } else { -gap }
            });
            (Case::L1, vec![a, b])
        }
        "attention_block" => {
            let model = DaeModel::<f64>::new(check_model_config(), Head::Reconstruction, seed)?;
            let c = model.config().embed_dim;
            let mut inputs = vec![random(&[6, c], r, -1.0, 1.0)];
            for p in BLOCK_PARAMS {
                // Wider than the 0.02 init so attention is far from uniform.
                let shape = model.params().require(p)?.shape().to_vec();
                let base = if p.ends_with("norm1.weight") || p.ends_with("norm2.weight") { 1.0 } else { 0.0 };
                inputs.push(Tensor::from_fn(&shape, |_| base + r.random_range(-0.5..0.5)));
            }
            (Case::AttentionBlock, inputs)
        }
        "cmcl_loss" => {
            let tags = ["SYNTH_A", "SYNTH_B", "SYNTH_A", "SYNTH_C"];
            let mods = tags.iter().map(|t| ModalityTag::new(t)).collect::<Result<_>>()?;
            (Case::Cmcl(mods), vec![random(&[4, 5], r, -1.0, 1.0)])
        }
        "dice_loss" => {
            let labels = (0..12).map(|_| r.random_range(0..3u8)).collect();
            (Case::Dice(labels), vec![random(&[3, 12], r, -2.0, 2.0)])
        }
        "full_forward" => {
            let cfg = check_model_config();
            let model = DaeModel::<f64>::new(cfg.clone(), Head::Reconstruction, seed)?;
            let names = model.params().names().to_vec();
            let n: usize = cfg.input.iter().product();
            let mut crops = Vec::new();
            let mut plans = Vec::new();
            for tag in ["SYNTH_A", "SYNTH_B"] {
                let vox = (0..n).map(|_| r.random_range(0.5..1.0f32)).collect();
                crops.push(Volume::new(cfg.input, vox, ModalityTag::new(tag)?)?);
                plans.push(make_mask_plan(cfg.tokens(), cfg.embed_dim, 0.5, r.random())?);
            }
            // O(0.3) parameters instead of the 0.02 init: with tiny weights
            // the vector entering row normalization is as small as the
            // difference step. The decoder bias keeps every reconstruction
            // below every target, away from the L1 kink.
            let inputs = model
                .params()
                .iter()
                .map(|(name, t)| {
                    let base = if name.contains(".norm") && name.ends_with(".weight") {
                        1.0
                    } else if name == "decoder.bias" {
                        -2.0
                    } else {
                        0.0
                    };
                    Tensor::from_fn(t.shape(), |_| base + r.random_range(-0.3..0.3))
                })
                .collect();
            (Case::Forward { crops, plans, names }, inputs)
        }
        other => return Err(DaeError::Parameter(format!("unknown gradient check {other:?}"))),
    };
    Ok(out)
}

/// Names of the checks run by [`run_suite`], in order.
pub const CHECKS: [&str; 10] = [
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "l1",
    "attention_block",
    "cmcl_loss",
    "dice_loss",
    "full_forward",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// `"f64"` or `"f32"`: precision of the analytic gradients.
    pub precision: &'static str,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Runs one named check over seeds `0..seeds`, reporting the worst error.
pub fn run_check(name: &'static str, seeds: usize) -> Result<CheckOutcome> {
    let forward = name == "full_forward";
    let mut worst = GradCheckReport::default();
    for seed in 0..seeds as u64 {
        let (case, inputs) = case_inputs(name, seed)?;
        let report = if forward {
            let cfg = GradCheckConfig {
                max_entries: Some(4),
                ..Default::default()
            };
            check_f32(&case, &inputs, cfg)?
        } else {
            check_f64(&case, &inputs, GradCheckConfig::default())?
        };
        if !report.max_rel_error.is_finite() {
            return Err(DaeError::Numeric(format!("{name}: non-finite gradient error at seed {seed}")));
        }
        worst.max_rel_error = worst.max_rel_error.max(report.max_rel_error);
    }
    Ok(CheckOutcome {
        name,
        seeds,
        max_rel_error: worst.max_rel_error,
        tolerance: if forward { FORWARD_TOLERANCE } else { OP_TOLERANCE },
        precision: if forward { "f32" } else { "f64" },
    })
}

pub fn run_suite(seeds: usize) -> Result<Vec<CheckOutcome>> {
    CHECKS.iter().map(|&name| run_check(name, seeds)).collect()
}
