//! `dae`: synthesize data, pre-train, fine-tune and analyse from one binary.
//!
//! Every command reads the same `key = value` configuration (file plus
//! `--set` overrides) and writes under `<runs_root>/<run_name>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use dae_core::analysis::{mask_sweep, recon_report, stage_drift_report, write_cka_csv, write_recon_csv, write_sweep_csv};
use dae_core::checkpoint::Checkpoint;
use dae_core::config::{keys_help, Config};
use dae_core::data::{synth_corpus, Dataset, SynthSpec};
use dae_core::gradcheck::run_suite;
use dae_core::trainer::{center_offset, finetune, pretrain, FinetuneJob, PretrainJob};
use dae_core::volume::{Manifest, Split, Volume};
use dae_core::DaeError;

#[derive(Parser, Debug)]
#[command(name = "dae", version, about = "Disruptive autoencoder pre-training toolkit")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write a synthetic multi-modality phantom corpus and manifest.
    Synth,
    /// Pre-train with disruptions, reconstruction and contrastive losses.
    Pretrain,
    /// Fine-tune a segmentation head, optionally from a pre-trained encoder.
    Finetune,
    /// Reconstruction L1/PSNR of a pre-trained checkpoint on probe volumes.
    Reconstruct,
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck,
    /// Per-stage CKA between pre-trained and fine-tuned encoders.
    Cka,
    /// Short pre-training runs across mask ratios.
    Sweep,
}

/// Process exit status for each failure class.
fn exit_code(err: &DaeError) -> u8 {
    match err {
        DaeError::Config(_) | DaeError::Parameter(_) => 1,
        DaeError::Numeric(_) => 3,
        DaeError::Data(_)
        | DaeError::Format { .. }
        | DaeError::Io { .. }
        | DaeError::Contract(_)
        | DaeError::Tensor(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let command = Cli::command().after_long_help(keys_help());
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> dae_core::Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> dae_core::Result<()> {
    let cfg = load_config(cli)?;
    let run_dir = cfg.run_dir();
    match cli.command {
        Command::Synth => synth(&cfg),
        Command::Pretrain => {
            let out = run_dir.join("pretrain");
            let job = PretrainJob::from_config(&cfg, out.clone())?;
            save_config(&cfg, &out)?;
            let data = load_split(&cfg, Split::Train, false)?;
            let result = pretrain(&data, &job)?;
            println!("checkpoint {}", result.checkpoint.display());
            println!("metrics {}", result.metrics.display());
            Ok(())
        }
        Command::Finetune => {
            let out = run_dir.join("finetune");
            let job = FinetuneJob::from_config(&cfg, out.clone())?;
            save_config(&cfg, &out)?;
            let train = load_split(&cfg, Split::Train, true)?;
            let val = load_split(&cfg, Split::Val, true)?;
            let result = finetune(&train, &val, &job)?;
            println!("val_dice {:.6}", result.final_val_dice);
            println!("checkpoint {}", result.checkpoint.display());
            Ok(())
        }
        Command::Reconstruct => reconstruct(&cfg, &run_dir),
        Command::Gradcheck => gradcheck(&cfg),
        Command::Cka => cka(&cfg, &run_dir),
        Command::Sweep => sweep(&cfg, &run_dir),
    }
}

fn save_config(cfg: &Config, dir: &Path) -> dae_core::Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join("config.txt");
    fs::write(&path, cfg.to_text()).map_err(|e| io_error(&path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> DaeError {
    DaeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn synth(cfg: &Config) -> dae_core::Result<()> {
    let spec = SynthSpec {
        seed: cfg.u64("seed")?,
        count: cfg.usize("count")?,
        modalities: cfg.modalities()?,
        dims: cfg.dims("volume_dims")?,
        val_fraction: cfg.f64("val_fraction")?,
        test_fraction: cfg.f64("test_fraction")?,
    };
    let manifest = synth_corpus(&cfg.data_dir(), &spec)?;
    println!("manifest {}", manifest.display());
    Ok(())
}

fn load_split(cfg: &Config, split: Split, labels: bool) -> dae_core::Result<Dataset> {
    let manifest = Manifest::load(cfg.manifest_path())?;
    Dataset::load(&manifest, split, labels)
}

/// Centred crops of up to `probe_count` volumes, preferring the test split.
fn probes(cfg: &Config) -> dae_core::Result<Vec<(String, Volume)>> {
    let manifest = Manifest::load(cfg.manifest_path())?;
    let split = if manifest.split(Split::Test).is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let data = Dataset::load(&manifest, split, false)?;
    let size = cfg.dims("crop")?;
    data.samples
        .iter()
        .take(cfg.usize("probe_count")?)
        .map(|s| {
            let name = s.path.file_stem().map_or_else(|| "volume".into(), |n| n.to_string_lossy().into_owned());
            Ok((name, s.volume.crop_at(center_offset(s.volume.dims(), size), size)?))
        })
        .collect()
}

fn reconstruct(cfg: &Config, run_dir: &Path) -> dae_core::Result<()> {
    let ckpt = cfg.path("checkpoint").unwrap_or_else(|| run_dir.join("pretrain/final.daec"));
    let model = Checkpoint::load(&ckpt)?.model;
    let out = run_dir.join("reconstruct");
    let dump = cfg.bool("dump_triplets")?.then(|| out.join("triplets"));
    if let Some(d) = &dump {
        fs::create_dir_all(d).map_err(|e| io_error(d, e))?;
    }
    let rows = recon_report(&model, &probes(cfg)?, &cfg.disruption()?, cfg.u64("seed")?, dump.as_deref())?;
    let path = write_recon_csv(&out.join("recon.csv"), &rows)?;
    let n = rows.len().max(1) as f64;
    println!(
        "mean l1 {:.6} mean psnr {:.3} over {} volumes",
        rows.iter().map(|r| r.l1).sum::<f64>() / n,
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.len()
    );
    println!("report {}", path.display());
    Ok(())
}

fn gradcheck(cfg: &Config) -> dae_core::Result<()> {
    let outcomes = run_suite(cfg.usize("gradcheck_seeds")?)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "{:<16} {} max_rel_error {:.3e} tolerance {:.0e} {}",
            o.name,
            o.precision,
            o.max_rel_error,
            o.tolerance,
            if o.passed() { "ok" } else { "FAILED" }
        );
        if !o.passed() {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(DaeError::Numeric(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

fn cka(cfg: &Config, run_dir: &Path) -> dae_core::Result<()> {
    let pre = cfg.path("checkpoint").unwrap_or_else(|| run_dir.join("pretrain/final.daec"));
    let tuned = cfg.path("finetuned").unwrap_or_else(|| run_dir.join("finetune/final.daec"));
    let a = Checkpoint::load(&pre)?.model;
    let b = Checkpoint::load(&tuned)?.model;
    let volumes: Vec<Volume> = probes(cfg)?.into_iter().map(|(_, v)| v).collect();
    let rows = stage_drift_report(&a, &b, &volumes)?;
    for (stage, v) in &rows {
        println!("stage {stage} cka {v:.6}");
    }
    let path = write_cka_csv(&run_dir.join("cka/cka_stage.csv"), &rows)?;
    println!("report {}", path.display());
    Ok(())
}

fn sweep(cfg: &Config, run_dir: &Path) -> dae_core::Result<()> {
    let mut base = PretrainJob::from_config(cfg, run_dir.join("sweep"))?;
    // Same schedule shape as the full run, compressed to the sweep length.
    let iters = cfg.u64("sweep_iters")?;
    base.train.warmup_iters = base.train.warmup_iters * iters / base.train.total_iters.max(1);
    base.train.total_iters = iters;
    base.train.checkpoint_every = 0;
    let ratios = cfg.f64_list("sweep_r")?;
    let data = load_split(cfg, Split::Train, false)?;
    let rows = mask_sweep(&data, &base, &ratios, cfg.usize("smoothing_window")?)?;
    for r in &rows {
        println!("r {} final_l1 {:.6}", r.r, r.final_l1);
    }
    let path = write_sweep_csv(&run_dir.join("sweep/mask_sweep.csv"), &rows)?;
    println!("report {}", path.display());
    Ok(())
}
