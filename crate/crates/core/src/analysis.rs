//! Representation similarity across stages, reconstruction quality and
//! masking-ratio sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use dae_tensor::{Element, Tape};

use crate::data::Dataset;
use crate::disruption::DisruptionConfig;
use crate::error::{DaeError, Result};
use crate::model::{is_encoder_param, DaeModel, Head};
use crate::trainer::{center_offset, pretrain, smoothed, step_rng, PretrainJob};
use crate::volume::{save_volume, Volume};

/// Dense row-major `rows × cols` matrix of per-sample features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DaeError::Contract(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    fn centered_gram(&self) -> Vec<f64> {
        let (n, p) = (self.rows, self.cols);
        let mut c = self.data.clone();
        for j in 0..p {
            let mean = (0..n).map(|i| c[i * p + j]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| c[i * p + j] -= mean);
        }
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                g[i * n + k] = (0..p).map(|j| c[i * p + j] * c[k * p + j]).sum();
            }
        }
        g
    }
}

/// Linear CKA, `‖XcᵀYc‖²_F / (‖XcᵀXc‖_F ‖YcᵀYc‖_F)`, evaluated through the
/// centred `n×n` Gram matrices.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(DaeError::Contract(format!("{} vs {} samples", x.rows, y.rows)));
    }
    if x.rows < 2 {
        return Err(DaeError::Contract("CKA needs at least 2 samples".into()));
    }
    let k = x.centered_gram();
    let l = y.centered_gram();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let (kl, kk, ll) = (dot(&k, &l), dot(&k, &k), dot(&l, &l));
    if kk <= 0.0 || ll <= 0.0 {
        return Err(DaeError::Numeric("CKA undefined: a feature matrix has zero variance".into()));
    }
    Ok(kl / (kk.sqrt() * ll.sqrt()))
}

/// Token-mean-pooled features of every probe at each stage: the embedded
/// input, then each transformer block output.
pub fn stage_features<T: Element>(model: &DaeModel<T>, probes: &[Volume]) -> Result<Vec<FeatureMatrix>> {
    let c = model.config().embed_dim;
    let stages = model.config().depth + 1;
    let mut data = vec![Vec::with_capacity(probes.len() * c); stages];
    for probe in probes {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let tg = model.tokenize(&mut tape, &b, probe)?;
        for (s, grid) in model.encode_stages(&mut tape, &b, &tg)?.iter().enumerate() {
            let pooled = tape.mean_axis(grid.tokens, 0)?;
            data[s].extend(tape.value(pooled).data().iter().map(|v| v.as_f64()));
        }
    }
    data.into_iter()
        .map(|d| FeatureMatrix::new(probes.len(), c, d))
        .collect()
}

fn encoder_layout<T: Element>(m: &DaeModel<T>) -> Vec<(String, Vec<usize>)> {
    m.params()
        .iter()
        .filter(|(n, _)| is_encoder_param(n))
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect()
}

/// Checks that two models share encoder config, names and shapes.
pub fn require_same_encoder<A: Element, B: Element>(a: &DaeModel<A>, b: &DaeModel<B>) -> Result<()> {
    if a.config() != b.config() {
        return Err(DaeError::Contract(format!(
            "encoder configs differ: {:?} vs {:?}",
            a.config(),
            b.config()
        )));
    }
    let (ea, eb) = (encoder_layout(a), encoder_layout(b));
    if ea != eb {
        return Err(DaeError::Contract("encoder parameters differ in names or shapes".into()));
    }
    Ok(())
}

/// CKA per stage (1-based) between two models on identical probes.
pub fn stage_drift_report<A: Element, B: Element>(
    pretrained: &DaeModel<A>,
    finetuned: &DaeModel<B>,
    probes: &[Volume],
) -> Result<Vec<(usize, f64)>> {
    require_same_encoder(pretrained, finetuned)?;
    let a = stage_features(pretrained, probes)?;
    let b = stage_features(finetuned, probes)?;
    a.iter()
        .zip(&b)
        .enumerate()
        .map(|(i, (x, y))| Ok((i + 1, linear_cka(x, y)?)))
        .collect()
}

pub fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse).log10()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconRow {
    pub volume: String,
    pub l1: f64,
    pub mse: f64,
    pub psnr: f64,
}

/// Reconstruction error of the centred crop of each volume under the given
/// disruption. Disruption draws for volume `i` come from stream `i` of
/// `seed`. With `dump_dir`, writes `<name>_{input,disrupted,recon}.dvol`.
pub fn recon_report<T: Element>(
    model: &DaeModel<T>,
    volumes: &[(String, Volume)],
    disruption: &DisruptionConfig,
    seed: u64,
    dump_dir: Option<&Path>,
) -> Result<Vec<ReconRow>> {
    if model.head() != Head::Reconstruction {
        return Err(DaeError::Contract("reconstruction needs a reconstruction head".into()));
    }
    let size = model.config().input;
    let mut rows = Vec::with_capacity(volumes.len());
    for (i, (name, v)) in volumes.iter().enumerate() {
        let crop = v.crop_at(center_offset(v.dims(), size), size)?;
        let mut rng = step_rng(seed, disruption.seed, i as u64);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let out = model.forward(&mut tape, &b, &crop, disruption, &mut rng)?;
        let recon = model.reassemble(tape.value(out.recon));
        let n = recon.len() as f64;
        let (mut abs, mut sq) = (0.0, 0.0);
        for (&r, &x) in recon.iter().zip(crop.voxels()) {
            let d = f64::from(r) - f64::from(x);
            abs += d.abs();
            sq += d * d;
        }
        let mse = sq / n;
        rows.push(ReconRow {
            volume: name.clone(),
            l1: abs / n,
            mse,
            psnr: psnr(mse),
        });
        if let Some(dir) = dump_dir {
            save_volume(dir.join(format!("{name}_input.dvol")), &crop)?;
            save_volume(dir.join(format!("{name}_disrupted.dvol")), &out.disrupted)?;
            save_volume(dir.join(format!("{name}_recon.dvol")), &crop.with_voxels(recon)?)?;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub r: f64,
    pub final_l1: f64,
}

/// A short pre-training run per mask ratio, each in `<out_dir>/r_<r>`,
/// reporting the final smoothed L1.
pub fn mask_sweep(data: &Dataset, base: &PretrainJob, ratios: &[f64], window: usize) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&r| {
            let mut job = base.clone();
            job.disruption.mask_ratio = r;
            job.out_dir = base.out_dir.join(format!("r_{r}"));
            job.resume = None;
            job.stop_at = None;
            let out = pretrain(data, &job)?;
            let l1: Vec<f64> = out.rows.iter().map(|row| f64::from(row.l1)).collect();
            let final_l1 = smoothed(&l1, window).last().copied().unwrap_or(f64::NAN);
            Ok(SweepRow { r, final_l1 })
        })
        .collect()
}

fn write_csv(path: &Path, header: &str, lines: impl IntoIterator<Item = String>) -> Result<PathBuf> {
    let mut text = format!("{header}\n");
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DaeError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| DaeError::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn write_cka_csv(path: &Path, rows: &[(usize, f64)]) -> Result<PathBuf> {
    write_csv(path, "stage,cka", rows.iter().map(|(s, c)| format!("{s},{c}")))
}

pub fn write_recon_csv(path: &Path, rows: &[ReconRow]) -> Result<PathBuf> {
    write_csv(
        path,
        "volume,l1,psnr",
        rows.iter().map(|r| format!("{},{},{}", r.volume, r.l1, r.psnr)),
    )
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<PathBuf> {
    write_csv(path, "r,final_l1", rows.iter().map(|r| format!("{},{}", r.r, r.final_l1)))
}
