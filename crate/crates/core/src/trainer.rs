//! Deterministic pre-training and fine-tuning loops.
//!
//! Every step draws its randomness from a ChaCha stream selected by the step
//! number, so a run resumed from a checkpoint at step `k` replays steps
//! `k+1..` exactly as an uninterrupted run would.

use std::fs;
use std::path::{Path, PathBuf};

use dae_tensor::{Element, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::Config;
use crate::data::Dataset;
use crate::disruption::DisruptionConfig;
use crate::error::{DaeError, Result};
use crate::losses::{dice_loss, hard_dice, pretrain_loss, LossConfig};
use crate::model::{patchify, unpatchify, DaeModel, Head, ModelConfig};
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::volume::{crop_offsets, Dims, LabelVolume, Volume};

pub const PRETRAIN_HEADER: &str = "step,lr,loss_total,loss_l1,loss_cmcl";
pub const FINETUNE_HEADER: &str = "step,lr,loss_dice,val_dice";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between checkpoints; `0` saves only the final one.
    pub checkpoint_every: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            warmup_iters: 500,
            total_iters: 2000,
            batch_size: 2,
            seed: 0,
            checkpoint_every: 500,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.total_iters {
            return Err(DaeError::Config(format!(
                "warmup_iters {} exceeds total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch_size == 0 || self.lr.is_nan() || self.lr < 0.0 {
            return Err(DaeError::Config("batch_size must be positive and lr non-negative".into()));
        }
        Ok(())
    }

    pub fn pretrain_from(cfg: &Config) -> Result<Self> {
        Self::from_config(cfg, "warmup_iters", "total_iters")
    }

    pub fn finetune_from(cfg: &Config) -> Result<Self> {
        Self::from_config(cfg, "finetune_warmup_iters", "finetune_iters")
    }

    fn from_config(cfg: &Config, warmup: &str, total: &str) -> Result<Self> {
        let t = Self {
            lr: cfg.f64("lr")?,
            warmup_iters: cfg.u64(warmup)?,
            total_iters: cfg.u64(total)?,
            batch_size: cfg.usize("batch_size")?,
            seed: cfg.u64("seed")?,
            checkpoint_every: cfg.u64("checkpoint_every")?,
            optimizer: cfg.adamw()?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(step, self.lr, self.warmup_iters, self.total_iters)
    }
}

/// Random stream for one training step.
pub fn step_rng(seed: u64, salt: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    rng.set_stream(step);
    rng
}

/// Trailing moving average over at most `window` values.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Modality uniformly, then a volume of that modality, then a crop offset.
fn draw_crop<R: Rng>(data: &Dataset, groups: &[Vec<usize>], size: Dims, rng: &mut R) -> Result<(usize, Dims)> {
    let group = &groups[rng.random_range(0..groups.len())];
    let idx = group[rng.random_range(0..group.len())];
    let offset = crop_offsets(data.samples[idx].volume.dims(), size, rng)?;
    Ok((idx, offset))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DaeError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| DaeError::io(path, e))
}

/// Metrics rows with `step <= upto` from an earlier run, header excluded.
fn prior_rows(path: &Path, header: &str, upto: u64) -> Result<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(String::new());
    };
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(DaeError::Data(format!("{} does not start with {header:?}", path.display())));
    }
    let mut out = String::new();
    for line in lines {
        let step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DaeError::Data(format!("{}: malformed row {line:?}", path.display())))?;
        if step <= upto {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.daec"))
}

fn save_state(path: &Path, model: &DaeModel<f32>, opt: &AdamW<f32>, step: u64, seed: u64) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        optimizer: Some(OptimizerState {
            m: opt.first_moments().to_vec(),
            v: opt.second_moments().to_vec(),
            step: opt.step_count(),
        }),
        step,
        seed,
    }
    .save(path)
}

fn restore(
    path: &Path,
    expected: &ModelConfig,
    head: Head,
    train: &TrainConfig,
) -> Result<(DaeModel<f32>, AdamW<f32>, u64)> {
    let ck = Checkpoint::load(path)?;
    if ck.model.config() != expected || ck.model.head() != head {
        return Err(DaeError::Config(format!(
            "{} was trained with {:?}/{:?}, not {expected:?}/{head:?}",
            path.display(),
            ck.model.config(),
            ck.model.head()
        )));
    }
    if ck.seed != train.seed {
        return Err(DaeError::Config(format!(
            "{} was trained with seed {}, not {}",
            path.display(),
            ck.seed,
            train.seed
        )));
    }
    let state = ck
        .optimizer
        .ok_or_else(|| DaeError::Data(format!("{} has no optimizer state to resume", path.display())))?;
    let opt = AdamW::from_state(
        train.optimizer.clone(),
        ck.model.params().tensors(),
        state.m,
        state.v,
        state.step,
    )?;
    Ok((ck.model, opt, ck.step))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainJob {
    pub model: ModelConfig,
    pub disruption: DisruptionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop after this step, checkpointing it, as if interrupted.
    pub stop_at: Option<u64>,
}

impl PretrainJob {
    pub fn from_config(cfg: &Config, out_dir: PathBuf) -> Result<Self> {
        let stop = cfg.u64("stop_at")?;
        Ok(Self {
            model: cfg.model()?,
            disruption: cfg.disruption()?,
            loss: cfg.loss()?,
            train: TrainConfig::pretrain_from(cfg)?,
            out_dir,
            resume: cfg.path("resume"),
            stop_at: (stop > 0).then_some(stop),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainRow {
    pub step: u64,
    pub lr: f64,
    pub total: f32,
    pub l1: f32,
    pub cmcl: f32,
}

impl PretrainRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.lr, self.total, self.l1, self.cmcl)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Last checkpoint written (the final one, or the interruption point).
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Rows produced by this invocation.
    pub rows: Vec<PretrainRow>,
    pub model: DaeModel<f32>,
}

/// One pre-training step's loss parts and parameter gradients.
pub fn pretrain_step<T: Element>(
    model: &DaeModel<T>,
    crops: &[Volume],
    disruption: &DisruptionConfig,
    loss: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PretrainRow, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let mut recons = Vec::with_capacity(crops.len());
    let mut targets = Vec::with_capacity(crops.len());
    let mut latents = Vec::with_capacity(crops.len());
    for crop in crops {
        let out = model.forward(&mut tape, &b, crop, disruption, rng)?;
        recons.push(out.recon);
        targets.push(tape.constant(out.target));
        latents.push(out.latent);
    }
    let recon = tape.concat(&recons, 0)?;
    let target = tape.concat(&targets, 0)?;
    let z = tape.concat(&latents, 0)?;
    let modalities: Vec<_> = crops.iter().map(|c| c.modality().clone()).collect();
    let parts = pretrain_loss(&mut tape, recon, target, z, &modalities, loss)?;
    tape.backward(parts.total)?;
    let value = |v| tape.value(v).item().map(|x: T| x.as_f64() as f32);
    let row = PretrainRow {
        step: 0,
        lr: 0.0,
        total: value(parts.total)?,
        l1: value(parts.l1)?,
        cmcl: value(parts.cmcl)?,
    };
    if !row.total.is_finite() {
        return Err(DaeError::Numeric(format!(
            "non-finite loss (l1 {}, cmcl {})",
            row.l1, row.cmcl
        )));
    }
    Ok((row, b.grads(&tape)))
}

pub fn pretrain(data: &Dataset, job: &PretrainJob) -> Result<PretrainOutcome> {
    job.train.validate()?;
    job.model.validate()?;
    job.disruption.validate()?;
    data.require_crop(job.model.input)?;
    let groups: Vec<Vec<usize>> = data.by_modality().into_iter().map(|(_, g)| g).collect();
    if job.loss.cmcl_alpha > 0.0 {
        if job.train.batch_size < 2 {
            return Err(DaeError::Config("contrastive training needs batch_size >= 2".into()));
        }
        if groups.len() < 2 {
            log::warn!("single-modality data: contrastive labels are all ones");
        }
    }

    let head = Head::Reconstruction;
    let (mut model, mut opt, start) = match &job.resume {
        Some(path) => restore(path, &job.model, head, &job.train)?,
        None => {
            let model = DaeModel::new(job.model.clone(), head, job.train.seed)?;
            let opt = AdamW::new(job.train.optimizer.clone(), model.params().tensors());
            (model, opt, 0)
        }
    };
    let end = job.stop_at.map_or(job.train.total_iters, |s| s.min(job.train.total_iters));
    let metrics = job.out_dir.join("metrics.csv");
    let mut csv = format!("{PRETRAIN_HEADER}\n");
    if start > 0 {
        csv.push_str(&prior_rows(&metrics, PRETRAIN_HEADER, start)?);
    }
    log::info!(
        "pretraining {} parameters, steps {}..={end}",
        model.param_count(),
        start + 1
    );

    let names = model.params().names().to_vec();
    let mut rows = Vec::new();
    let mut last_ckpt = None;
    for step in start + 1..=end {
        let mut rng = step_rng(job.train.seed, job.disruption.seed, step);
        let mut crops = Vec::with_capacity(job.train.batch_size);
        for _ in 0..job.train.batch_size {
            let (idx, offset) = draw_crop(data, &groups, job.model.input, &mut rng)?;
            crops.push(data.samples[idx].volume.crop_at(offset, job.model.input)?);
        }
        let (mut row, grads) = pretrain_step(&model, &crops, &job.disruption, &job.loss, &mut rng)?;
        row.step = step;
        row.lr = job.train.lr_at(step);
        opt.step(&names, model.params_mut().tensors_mut(), &grads, row.lr)?;
        csv.push_str(&row.csv());
        csv.push('\n');
        if step % 50 == 0 || step == end {
            log::info!("step {step}: total {} l1 {} cmcl {}", row.total, row.l1, row.cmcl);
        }
        rows.push(row);
        let periodic = job.train.checkpoint_every > 0 && step % job.train.checkpoint_every == 0;
        if periodic || step == end {
            let path = checkpoint_path(&job.out_dir, step);
            save_state(&path, &model, &opt, step, job.train.seed)?;
            last_ckpt = Some(path);
            write_text(&metrics, &csv)?;
        }
    }
    write_text(&metrics, &csv)?;
    let checkpoint = if end == job.train.total_iters {
        let path = job.out_dir.join("final.daec");
        save_state(&path, &model, &opt, end, job.train.seed)?;
        path
    } else {
        last_ckpt.unwrap_or_else(|| checkpoint_path(&job.out_dir, end))
    };
    Ok(PretrainOutcome {
        checkpoint,
        metrics,
        rows,
        model,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneJob {
    pub model: ModelConfig,
    pub classes: usize,
    pub dice_smooth: f64,
    pub train: TrainConfig,
    /// Encoder weights to start from; `None` trains from scratch.
    pub pretrained: Option<PathBuf>,
    pub val_every: u64,
    pub out_dir: PathBuf,
}

impl FinetuneJob {
    pub fn from_config(cfg: &Config, out_dir: PathBuf) -> Result<Self> {
        Ok(Self {
            model: cfg.model()?,
            classes: cfg.usize("num_classes")?,
            dice_smooth: cfg.f64("dice_smooth")?,
            train: TrainConfig::finetune_from(cfg)?,
            pretrained: cfg.path("pretrained"),
            val_every: cfg.u64("val_every")?,
            out_dir,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneRow {
    pub step: u64,
    pub lr: f64,
    pub dice_loss: f32,
    pub val_dice: Option<f64>,
}

impl FinetuneRow {
    pub fn csv(&self) -> String {
        let val = self.val_dice.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{val}", self.step, self.lr, self.dice_loss)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub rows: Vec<FinetuneRow>,
    /// Mean hard Dice over validation volumes after the last step.
    pub final_val_dice: f64,
    pub per_volume: Vec<(PathBuf, f64)>,
    pub model: DaeModel<f32>,
}

/// Labels folded into `classes` bins: anything above the last class joins it.
pub fn fold_labels(labels: &[u8], classes: usize) -> Vec<u8> {
    let top = (classes - 1) as u8;
    labels.iter().map(|&l| l.min(top)).collect()
}

/// Arg-max class per voxel of a crop, in volume order.
pub fn predict_labels<T: Element>(model: &DaeModel<T>, crop: &Volume) -> Result<Vec<u8>> {
    let Head::Segmentation { classes } = model.head() else {
        return Err(DaeError::Contract("prediction needs a segmentation head".into()));
    };
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let tg = model.tokenize(&mut tape, &b, crop)?;
    let enc = model.encode(&mut tape, &b, &tg)?;
    let probs = model.segment(&mut tape, &b, &enc)?;
    let p = tape.value(probs);
    let v = p.shape()[1];
    let rows: Vec<u8> = (0..v)
        .map(|i| {
            let mut best = 0;
            for k in 1..classes {
                if p.data()[k * v + i] > p.data()[best * v + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    let cfg = model.config();
    Ok(unpatchify(&rows, cfg.input, cfg.patch))
}

/// Offset of a centred crop.
pub fn center_offset(dims: Dims, size: Dims) -> Dims {
    [0, 1, 2].map(|a| dims[a].saturating_sub(size[a]) / 2)
}

/// Mean-over-classes hard Dice on the centred crop of every volume.
pub fn evaluate_dice<T: Element>(model: &DaeModel<T>, data: &Dataset) -> Result<Vec<(PathBuf, f64)>> {
    let Head::Segmentation { classes } = model.head() else {
        return Err(DaeError::Contract("evaluation needs a segmentation head".into()));
    };
    let size = model.config().input;
    data.samples
        .iter()
        .map(|s| {
            let labels = s
                .labels
                .as_ref()
                .ok_or_else(|| DaeError::Data(format!("missing labels for {}", s.path.display())))?;
            let offset = center_offset(s.volume.dims(), size);
            let pred = predict_labels(model, &s.volume.crop_at(offset, size)?)?;
            let truth = fold_labels(labels.crop_at(offset, size)?.labels(), classes);
            let per_class = hard_dice(&pred, &truth, classes);
            Ok((s.path.clone(), per_class.iter().sum::<f64>() / classes as f64))
        })
        .collect()
}

fn mean_dice(per_volume: &[(PathBuf, f64)]) -> f64 {
    per_volume.iter().map(|(_, d)| d).sum::<f64>() / per_volume.len().max(1) as f64
}

/// One fine-tuning step: mean soft Dice over the batch and gradients.
pub fn finetune_step<T: Element>(
    model: &DaeModel<T>,
    crops: &[(Volume, LabelVolume)],
    smooth: f64,
) -> Result<(f32, Vec<Tensor<T>>)> {
    let Head::Segmentation { classes } = model.head() else {
        return Err(DaeError::Contract("fine-tuning needs a segmentation head".into()));
    };
    let cfg = model.config();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let mut losses = Vec::with_capacity(crops.len());
    for (x, labels) in crops {
        let tg = model.tokenize(&mut tape, &b, x)?;
        let enc = model.encode(&mut tape, &b, &tg)?;
        let probs = model.segment(&mut tape, &b, &enc)?;
        let truth = patchify(&fold_labels(labels.labels(), classes), cfg.input, cfg.patch);
        losses.push(dice_loss(&mut tape, probs, &truth, smooth)?);
    }
    let sum = losses[1..]
        .iter()
        .try_fold(losses[0], |acc, &l| tape.add(acc, l))?;
    let loss = tape.scale(sum, 1.0 / crops.len() as f64);
    tape.backward(loss)?;
    let value = tape.value(loss).item()?.as_f64() as f32;
    if !value.is_finite() {
        return Err(DaeError::Numeric("non-finite Dice loss".into()));
    }
    Ok((value, b.grads(&tape)))
}

pub fn finetune(train: &Dataset, val: &Dataset, job: &FinetuneJob) -> Result<FinetuneOutcome> {
    job.train.validate()?;
    train.require_crop(job.model.input)?;
    val.require_crop(job.model.input)?;
    for s in train.samples.iter().chain(&val.samples) {
        if s.labels.is_none() {
            return Err(DaeError::Data(format!("missing labels for {}", s.path.display())));
        }
    }
    let head = Head::Segmentation { classes: job.classes };
    let mut model = DaeModel::<f32>::new(job.model.clone(), head, job.train.seed)?;
    if let Some(path) = &job.pretrained {
        let ck = Checkpoint::load(path)?;
        if ck.model.config() != &job.model {
            return Err(DaeError::Contract(format!(
                "{} has model {:?}, fine-tuning expects {:?}",
                path.display(),
                ck.model.config(),
                job.model
            )));
        }
        let n = model.load_encoder_from(ck.model.params())?;
        log::info!("initialized {n} encoder tensors from {}", path.display());
    }
    let mut opt = AdamW::new(job.train.optimizer.clone(), model.params().tensors());
    let groups: Vec<Vec<usize>> = train.by_modality().into_iter().map(|(_, g)| g).collect();
    let names = model.params().names().to_vec();
    let size = job.model.input;
    let mut csv = format!("{FINETUNE_HEADER}\n");
    let mut rows = Vec::new();
    let mut per_volume = Vec::new();
    let total = job.train.total_iters;
    for step in 1..=total {
        let mut rng = step_rng(job.train.seed, 0x5E6, step);
        let mut crops = Vec::with_capacity(job.train.batch_size);
        for _ in 0..job.train.batch_size {
            let (idx, offset) = draw_crop(train, &groups, size, &mut rng)?;
            let s = &train.samples[idx];
            let labels = s.labels.as_ref().expect("checked above");
            crops.push((s.volume.crop_at(offset, size)?, labels.crop_at(offset, size)?));
        }
        let (loss, grads) = finetune_step(&model, &crops, job.dice_smooth)?;
        let lr = job.train.lr_at(step);
        opt.step(&names, model.params_mut().tensors_mut(), &grads, lr)?;
        let validate = step == total || (job.val_every > 0 && step % job.val_every == 0);
        let val_dice = if validate {
            per_volume = evaluate_dice(&model, val)?;
            let d = mean_dice(&per_volume);
            log::info!("finetune step {step}: dice loss {loss}, val dice {d}");
            Some(d)
        } else {
            None
        };
        let row = FinetuneRow {
            step,
            lr,
            dice_loss: loss,
            val_dice,
        };
        csv.push_str(&row.csv());
        csv.push('\n');
        rows.push(row);
    }
    if per_volume.is_empty() {
        per_volume = evaluate_dice(&model, val)?;
    }
    let metrics = job.out_dir.join("metrics.csv");
    write_text(&metrics, &csv)?;
    let mut report = String::from("volume,dice\n");
    for (p, d) in &per_volume {
        report.push_str(&format!("{},{d}\n", p.display()));
    }
    write_text(&job.out_dir.join("val_dice.csv"), &report)?;
    let checkpoint = job.out_dir.join("final.daec");
    save_state(&checkpoint, &model, &opt, total, job.train.seed)?;
    Ok(FinetuneOutcome {
        checkpoint,
        metrics,
        rows,
        final_val_dice: mean_dice(&per_volume),
        per_volume,
        model,
    })
}
