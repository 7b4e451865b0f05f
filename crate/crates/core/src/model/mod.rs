//! A small ViT-style disruptive autoencoder: patch tokenization, full
//! self-attention blocks, a per-token linear decoder and a pooled latent head.

mod params;
mod patch;

pub use params::{Bound, ParamStore};
pub use patch::{grid_dims, patchify, unpatchify};

use dae_tensor::{Element, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::disruption::{apply_local_mask, disrupt, make_mask_plan_with, DisruptionConfig, MaskPlan};
use crate::error::{DaeError, Result};
use crate::volume::{Dims, Volume};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Token embeddings together with the patch geometry they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    /// `N×C` on the tape.
    pub tokens: Var,
    pub grid: Dims,
    pub patch: Dims,
}

impl TokenGrid {
    pub fn token_count(&self) -> usize {
        self.grid.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: Dims,
    /// Crop extents the positional embeddings are sized for.
    pub input: Dims,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub latent_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: [4, 4, 4],
            input: [32, 32, 32],
            embed_dim: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            latent_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let Some(_) = grid_dims(self.input, self.patch) else {
            return Err(DaeError::Config(format!(
                "patch {:?} does not divide crop {:?}",
                self.patch, self.input
            )));
        };
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(DaeError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 || self.latent_dim == 0 {
            return Err(DaeError::Config("mlp_ratio and latent_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Dims {
        grid_dims(self.input, self.patch).expect("validated config")
    }

    pub fn tokens(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_volume(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Output projection attached after the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Per-token voxel decoder plus the contrastive latent head.
    Reconstruction,
    /// Per-token projection to `classes` logits per voxel.
    Segmentation { classes: usize },
}

/// Parameters shared by both heads.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("patch_embed.") || name == "pos_embed" || name.starts_with("blocks.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DaeModel<T> {
    config: ModelConfig,
    head: Head,
    params: ParamStore<T>,
}

fn trunc_normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let x: f64 = StandardNormal.sample(rng);
            if x.abs() <= 2.0 {
                break x * INIT_STD;
            }
        })
        .collect()
}

impl<T: Element> DaeModel<T> {
    /// Fresh weights: truncated normal matrices, zero biases and positional
    /// embeddings, unit layer-norm scales. Encoder weights depend only on
    /// the seed and config, not on the head.
    pub fn new(config: ModelConfig, head: Head, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Head::Segmentation { classes } = head {
            if classes < 2 {
                return Err(DaeError::Config(format!("segmentation needs >= 2 classes, got {classes}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let c = config.embed_dim;
        let p = config.patch_volume();
        let n = config.tokens();
        let hidden = c * config.mlp_ratio;
        let mut weight = |params: &mut ParamStore<T>, name: &str, rows: usize, cols: usize| {
            let data = trunc_normal(&mut rng, rows * cols).into_iter().map(T::of).collect();
            params.insert(format!("{name}.weight"), Tensor::from_vec(vec![rows, cols], data).expect("sized"));
            params.insert(format!("{name}.bias"), Tensor::zeros(&[cols]));
        };
        let norm = |params: &mut ParamStore<T>, name: &str| {
            params.insert(format!("{name}.weight"), Tensor::ones(&[c]));
            params.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
        };

        weight(&mut params, "patch_embed", p, c);
        params.insert("pos_embed", Tensor::zeros(&[n, c]));
        for i in 0..config.depth {
            norm(&mut params, &format!("blocks.{i}.norm1"));
            weight(&mut params, &format!("blocks.{i}.attn.qkv"), c, 3 * c);
            weight(&mut params, &format!("blocks.{i}.attn.proj"), c, c);
            norm(&mut params, &format!("blocks.{i}.norm2"));
            weight(&mut params, &format!("blocks.{i}.mlp.fc1"), c, hidden);
            weight(&mut params, &format!("blocks.{i}.mlp.fc2"), hidden, c);
        }
        match head {
            Head::Reconstruction => {
                weight(&mut params, "decoder", c, p);
                weight(&mut params, "latent_head", c, config.latent_dim);
            }
            Head::Segmentation { classes } => weight(&mut params, "seg_head", c, p * classes),
        }
        Ok(Self { config, head, params })
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, head: Head, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(config, head, 0)?;
        if reference.params.names() != params.names() {
            return Err(DaeError::Contract(format!(
                "parameter names do not match a {head:?} model with this config"
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(DaeError::Contract(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: reference.config,
            head: reference.head,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Digest of config, head and every parameter name and shape.
    pub fn architecture_hash(&self) -> String {
        self.params.shape_digest(&format!("{:?}|{:?}", self.config, self.head))
    }

    /// Copies encoder parameters from `other`, which must share the encoder
    /// architecture. Returns the number of tensors copied.
    pub fn load_encoder_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        let names: Vec<String> = self.params.names().iter().filter(|n| is_encoder_param(n)).cloned().collect();
        for name in names {
            let src = other
                .get(&name)
                .ok_or_else(|| DaeError::Contract(format!("source checkpoint lacks {name}")))?;
            let dst = self.params.require(&name)?;
            if src.shape() != dst.shape() {
                return Err(DaeError::Contract(format!(
                    "{name}: source shape {:?} differs from {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            self.params.insert(name, src.clone());
            copied += 1;
        }
        Ok(copied)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.params.bind(tape)
    }

    /// Volume voxels as patch rows `N×P`.
    pub fn patch_rows(&self, x: &Volume) -> Result<Tensor<T>> {
        if x.dims() != self.config.input {
            return Err(DaeError::Config(format!(
                "crop {:?} does not match model input {:?}",
                x.dims(),
                self.config.input
            )));
        }
        let rows = patchify(x.voxels(), self.config.input, self.config.patch);
        Ok(Tensor::from_vec(
            vec![self.config.tokens(), self.config.patch_volume()],
            rows.into_iter().map(|v| T::of(f64::from(v))).collect(),
        )?)
    }

    /// Patch partition, linear projection to `C` and positional embedding.
    pub fn tokenize(&self, tape: &mut Tape<T>, b: &Bound, x: &Volume) -> Result<TokenGrid> {
        let rows = self.patch_rows(x)?;
        let rows = tape.constant(rows);
        self.tokenize_rows(tape, b, rows)
    }

    pub fn tokenize_rows(&self, tape: &mut Tape<T>, b: &Bound, rows: Var) -> Result<TokenGrid> {
        let h = tape.matmul(rows, b.var("patch_embed.weight")?)?;
        let h = tape.add_row(h, b.var("patch_embed.bias")?)?;
        let tokens = tape.add(h, b.var("pos_embed")?)?;
        Ok(TokenGrid {
            tokens,
            grid: self.config.grid(),
            patch: self.config.patch,
        })
    }

    fn linear(&self, tape: &mut Tape<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let h = tape.matmul(x, b.var(&format!("{name}.weight"))?)?;
        Ok(tape.add_row(h, b.var(&format!("{name}.bias"))?)?)
    }

    fn norm(&self, tape: &mut Tape<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let g = b.var(&format!("{name}.weight"))?;
        let beta = b.var(&format!("{name}.bias"))?;
        Ok(tape.layer_norm(x, g, beta, LN_EPS)?)
    }

    /// Multi-head self-attention over all tokens of `x` (`N×C`).
    pub fn attention(&self, tape: &mut Tape<T>, b: &Bound, x: Var, block: usize) -> Result<Var> {
        let c = self.config.embed_dim;
        let dh = self.config.head_dim();
        let qkv = self.linear(tape, b, x, &format!("blocks.{block}.attn.qkv"))?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = tape.slice(qkv, 1, h * dh, dh)?;
            let k = tape.slice(qkv, 1, c + h * dh, dh)?;
            let v = tape.slice(qkv, 1, 2 * c + h * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, v)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        self.linear(tape, b, merged, &format!("blocks.{block}.attn.proj"))
    }

    /// One pre-norm transformer block.
    pub fn block(&self, tape: &mut Tape<T>, b: &Bound, x: Var, i: usize) -> Result<Var> {
        let h = self.norm(tape, b, x, &format!("blocks.{i}.norm1"))?;
        let h = self.attention(tape, b, h, i)?;
        let x = tape.add(x, h)?;
        let h = self.norm(tape, b, x, &format!("blocks.{i}.norm2"))?;
        let h = self.linear(tape, b, h, &format!("blocks.{i}.mlp.fc1"))?;
        let h = tape.gelu(h);
        let h = self.linear(tape, b, h, &format!("blocks.{i}.mlp.fc2"))?;
        Ok(tape.add(x, h)?)
    }

    pub fn encode(&self, tape: &mut Tape<T>, b: &Bound, tg: &TokenGrid) -> Result<TokenGrid> {
        Ok(self.encode_stages(tape, b, tg)?.pop().expect("stage 0 always present"))
    }

    /// The input grid followed by every block output.
    pub fn encode_stages(&self, tape: &mut Tape<T>, b: &Bound, tg: &TokenGrid) -> Result<Vec<TokenGrid>> {
        let expected = [self.config.tokens(), self.config.embed_dim];
        if tape.shape(tg.tokens) != expected {
            return Err(DaeError::Contract(format!(
                "token grid {:?} does not match model {:?}",
                tape.shape(tg.tokens),
                expected
            )));
        }
        let mut stages = vec![tg.clone()];
        let mut x = tg.tokens;
        for i in 0..self.config.depth {
            x = self.block(tape, b, x, i)?;
            stages.push(TokenGrid { tokens: x, ..tg.clone() });
        }
        Ok(stages)
    }

    /// Per-token voxel predictions, `N×P` in patch-row order.
    pub fn decode(&self, tape: &mut Tape<T>, b: &Bound, tg: &TokenGrid) -> Result<Var> {
        self.require_head(Head::Reconstruction)?;
        self.linear(tape, b, tg.tokens, "decoder")
    }

    /// Reassembles patch rows into a crop.
    pub fn reassemble(&self, rows: &Tensor<T>) -> Vec<f32> {
        let voxels: Vec<f32> = rows.data().iter().map(|v| v.as_f64() as f32).collect();
        unpatchify(&voxels, self.config.input, self.config.patch)
    }

    /// Unit-norm `1×latent_dim` embedding of the mean token.
    pub fn latent(&self, tape: &mut Tape<T>, b: &Bound, tg: &TokenGrid) -> Result<Var> {
        self.require_head(Head::Reconstruction)?;
        let pooled = tape.mean_axis(tg.tokens, 0)?;
        let pooled = tape.reshape(pooled, &[1, self.config.embed_dim])?;
        let z = self.linear(tape, b, pooled, "latent_head")?;
        Ok(tape.normalize_rows(z)?)
    }

    /// Class probabilities `K×V`, voxels in patch-row order.
    pub fn segment(&self, tape: &mut Tape<T>, b: &Bound, tg: &TokenGrid) -> Result<Var> {
        let Head::Segmentation { classes } = self.head else {
            return Err(DaeError::Contract("segment needs a segmentation head".into()));
        };
        let logits = self.linear(tape, b, tg.tokens, "seg_head")?;
        let voxels = self.config.tokens() * self.config.patch_volume();
        let logits = tape.reshape(logits, &[voxels, classes])?;
        let probs = tape.softmax(logits, 1)?;
        Ok(tape.transpose(probs)?)
    }

    /// Tokenize, mask, encode, then decode and pool. `x` is the already
    /// disrupted crop.
    pub fn forward_disrupted(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        x: &Volume,
        plan: &MaskPlan,
    ) -> Result<(Var, Var)> {
        let tg = self.tokenize(tape, b, x)?;
        let tg = apply_local_mask(tape, &tg, plan)?;
        let enc = self.encode(tape, b, &tg)?;
        let recon = self.decode(tape, b, &enc)?;
        let z = self.latent(tape, b, &enc)?;
        Ok((recon, z))
    }

    /// Disrupts `clean`, draws a mask plan from `rng` and runs the
    /// reconstruction pass.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        clean: &Volume,
        cfg: &DisruptionConfig,
        rng: &mut R,
    ) -> Result<ForwardOutput<T>> {
        let disrupted = disrupt(clean, cfg, rng)?;
        let plan = make_mask_plan_with(
            self.config.tokens(),
            self.config.embed_dim,
            cfg.mask_ratio,
            rng.random(),
            cfg.mask_shared_channels,
        )?;
        let (recon, latent) = self.forward_disrupted(tape, b, &disrupted, &plan)?;
        Ok(ForwardOutput {
            recon,
            latent,
            target: self.patch_rows(clean)?,
            plan,
            disrupted,
        })
    }

    fn require_head(&self, head: Head) -> Result<()> {
        if self.head != head {
            return Err(DaeError::Contract(format!("model has a {:?} head, need {head:?}", self.head)));
        }
        Ok(())
    }
}

/// Result of [`DaeModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `N×P` reconstruction in patch-row order.
    pub recon: Var,
    /// `1×latent_dim`, unit norm.
    pub latent: Var,
    /// Clean crop in the same patch-row order as `recon`.
    pub target: Tensor<T>,
    pub plan: MaskPlan,
    pub disrupted: Volume,
}
