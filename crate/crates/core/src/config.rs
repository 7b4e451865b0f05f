//! `key = value` run configuration with documented defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::disruption::DisruptionConfig;
use crate::error::{DaeError, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::volume::{Dims, ModalityTag};

/// Every accepted key: name, default, description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run_name", "dae_run", "run directory name under runs_root"),
    ("runs_root", "runs", "parent directory of all run outputs"),
    ("seed", "0", "master seed for weights, batching and disruptions"),
    ("data_dir", "", "synth output directory (default: <runs_root>/<run_name>/data)"),
    ("manifest", "", "training manifest (default: <data_dir>/manifest.tsv)"),
    ("count", "30", "synth: phantoms per modality"),
    ("modalities", "SYNTH_A,SYNTH_B,SYNTH_C", "synth: comma-separated modality tags"),
    ("volume_dims", "48,48,48", "synth: volume extents D,H,W"),
    ("val_fraction", "0.2", "synth: fraction of phantoms in the val split"),
    ("test_fraction", "0.1", "synth: fraction of phantoms in the test split"),
    ("noise_mu", "0", "additive noise mean"),
    ("noise_sigma", "0.1", "additive noise standard deviation"),
    ("downsample_ratio", "4", "down/up resampling factor (1 disables)"),
    ("mask_ratio", "0.6", "fraction of channels masked per token"),
    ("disruption_seed", "0", "extra seed mixed into disruption draws"),
    ("mask_shared_channels", "false", "mask one channel subset for all tokens"),
    ("patch", "4,4,4", "patch extents"),
    ("embed_dim", "96", "token width C"),
    ("depth", "4", "transformer blocks"),
    ("heads", "4", "attention heads"),
    ("mlp_ratio", "4", "MLP hidden width as a multiple of C"),
    ("latent_dim", "64", "contrastive latent width"),
    ("cmcl_alpha", "0.05", "contrastive loss weight"),
    ("cmcl_temperature", "0.07", "similarity scale exponent t (scale = exp(t))"),
    ("dice_smooth", "1e-5", "Dice smoothing term"),
    ("lr", "4e-4", "peak learning rate"),
    ("weight_decay", "1e-5", "decoupled weight decay"),
    ("beta1", "0.9", "AdamW first-moment decay"),
    ("beta2", "0.999", "AdamW second-moment decay"),
    ("adam_eps", "1e-8", "AdamW epsilon"),
    ("warmup_iters", "500", "pretrain warm-up steps"),
    ("total_iters", "2000", "pretrain steps"),
    ("batch_size", "2", "crops per step"),
    ("crop", "32,32,32", "training crop extents (model input)"),
    ("grad_clip_norm", "0", "global gradient-norm clip (0 disables)"),
    ("checkpoint_every", "500", "checkpoint interval in steps (0: final only)"),
    ("resume", "", "checkpoint to resume pretraining from"),
    ("stop_at", "0", "stop pretraining after this step, saving a checkpoint (0: run to the end)"),
    ("num_classes", "2", "finetune: segmentation classes"),
    ("pretrained", "", "finetune: pretrained checkpoint (empty: random init)"),
    ("finetune_iters", "500", "finetune steps"),
    ("finetune_warmup_iters", "50", "finetune warm-up steps"),
    ("val_every", "100", "finetune: validation interval in steps"),
    ("checkpoint", "", "reconstruct/cka: pretrained checkpoint (default: this run's final)"),
    ("finetuned", "", "cka: finetuned checkpoint (default: this run's finetune final)"),
    ("probe_count", "16", "reconstruct/cka: number of probe volumes"),
    ("dump_triplets", "false", "reconstruct: write input/disrupted/reconstruction volumes"),
    ("sweep_r", "0,0.3,0.6,0.9", "sweep: mask ratios"),
    ("sweep_iters", "200", "sweep: pretrain steps per ratio"),
    ("smoothing_window", "20", "moving-average window for smoothed losses"),
    ("gradcheck_seeds", "20", "gradcheck: random seeds per operation"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, d, _)| (k, d.to_string())).collect(),
        }
    }
}

fn valid_keys() -> String {
    KEYS.iter().map(|k| k.0).collect::<Vec<_>>().join(", ")
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let mut out = String::from("configuration keys (default in brackets):\n");
    for (k, d, h) in KEYS {
        let _ = writeln!(out, "  {k:<22} {h} [{d}]");
    }
    out
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(&(k, _, _)) = KEYS.iter().find(|e| e.0 == key) else {
            return Err(DaeError::Config(format!("unknown key {key:?}; valid keys: {}", valid_keys())));
        };
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| DaeError::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DaeError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| DaeError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DaeError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.values[k])).collect()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a configuration key"))
    }

    fn typed<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| DaeError::Config(format!("{key} = {raw:?} is not a valid {}", std::any::type_name::<V>())))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.typed(key)?;
        if !v.is_finite() {
            return Err(DaeError::Config(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.typed(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.typed(key)
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| DaeError::Config(format!("{key}: {s:?} is not a number")))
            })
            .collect()
    }

    /// Three extents, or one extent repeated.
    pub fn dims(&self, key: &str) -> Result<Dims> {
        let parts = self.list(key);
        let parsed: Vec<usize> = parts
            .iter()
            .map(|s| s.parse().map_err(|_| DaeError::Config(format!("{key}: {s:?} is not an extent"))))
            .collect::<Result<_>>()?;
        match parsed[..] {
            [d] => Ok([d; 3]),
            [a, b, c] => Ok([a, b, c]),
            _ => Err(DaeError::Config(format!("{key} needs 1 or 3 extents"))),
        }
    }

    /// Empty string maps to `None`.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn run_dir(&self) -> PathBuf {
        Path::new(self.get("runs_root")).join(self.get("run_name"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path("data_dir").unwrap_or_else(|| self.run_dir().join("data"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path("manifest").unwrap_or_else(|| self.data_dir().join("manifest.tsv"))
    }

    pub fn modalities(&self) -> Result<Vec<ModalityTag>> {
        self.list("modalities").iter().map(|m| ModalityTag::new(m)).collect()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            patch: self.dims("patch")?,
            input: self.dims("crop")?,
            embed_dim: self.usize("embed_dim")?,
            depth: self.usize("depth")?,
            heads: self.usize("heads")?,
            mlp_ratio: self.usize("mlp_ratio")?,
            latent_dim: self.usize("latent_dim")?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn disruption(&self) -> Result<DisruptionConfig> {
        let d = DisruptionConfig {
            noise_mu: self.f64("noise_mu")?,
            noise_sigma: self.f64("noise_sigma")?,
            downsample_ratio: self.f64("downsample_ratio")?,
            mask_ratio: self.f64("mask_ratio")?,
            seed: self.u64("disruption_seed")?,
            mask_shared_channels: self.bool("mask_shared_channels")?,
        };
        d.validate().map_err(|e| DaeError::Config(e.to_string()))?;
        Ok(d)
    }

    pub fn loss(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            cmcl_alpha: self.f64("cmcl_alpha")?,
            cmcl_temperature: self.f64("cmcl_temperature")?,
            dice_smooth: self.f64("dice_smooth")?,
        })
    }

    pub fn adamw(&self) -> Result<AdamWConfig> {
        Ok(AdamWConfig {
            weight_decay: self.f64("weight_decay")?,
            beta1: self.f64("beta1")?,
            beta2: self.f64("beta2")?,
            eps: self.f64("adam_eps")?,
            grad_clip_norm: self.f64("grad_clip_norm")?,
        })
    }
}
