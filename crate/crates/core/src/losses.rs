//! Reconstruction, cross-modal contrastive and Dice objectives.

use dae_tensor::{Element, Tape, Tensor, Var};

use crate::error::{DaeError, Result};
use crate::volume::ModalityTag;

const UNIT_NORM_TOL: f64 = 1e-5;
const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub cmcl_alpha: f64,
    pub cmcl_temperature: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cmcl_alpha: 0.05,
            cmcl_temperature: 0.07,
            dice_smooth: 1e-5,
        }
    }
}

/// Scaled pairwise similarities `B×B` of a batch of unit latents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Var,
    pub temperature: f64,
}

/// `values[i][j] = 1` iff samples `i` and `j` share a modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    size: usize,
    values: Vec<u8>,
}

impl LabelMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.size, self.size], |i| T::of(f64::from(self.values[i])))
    }
}

/// `(z zᵀ) · exp(t)`. Rows of `z` must already be unit length.
pub fn similarity<T: Element>(tape: &mut Tape<T>, z: Var, temperature: f64) -> Result<SimilarityMatrix> {
    let (_, d) = tape.value(z).dims2("similarity")?;
    for (i, row) in tape.value(z).data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(DaeError::Contract(format!("latent row {i} has norm {norm}, expected 1")));
        }
    }
    let zt = tape.transpose(z)?;
    let gram = tape.matmul(z, zt)?;
    Ok(SimilarityMatrix {
        values: tape.scale(gram, temperature.exp()),
        temperature,
    })
}

/// Modality-equality matrix. Tags compare case-insensitively because
/// [`ModalityTag`] is stored upper-cased.
pub fn label_matrix(modalities: &[ModalityTag]) -> LabelMatrix {
    let size = modalities.len();
    let mut values = Vec::with_capacity(size * size);
    for a in modalities {
        for b in modalities {
            values.push(u8::from(a == b));
        }
    }
    LabelMatrix { size, values }
}

/// `alpha · ½ (row-wise BCE + column-wise BCE)` with a sigmoid on each
/// similarity, each direction mean-reduced.
pub fn cmcl_loss<T: Element>(
    tape: &mut Tape<T>,
    sim: &SimilarityMatrix,
    labels: &LabelMatrix,
    alpha: f64,
) -> Result<Var> {
    let b = labels.size();
    if tape.shape(sim.values) != [b, b] {
        return Err(DaeError::Contract(format!(
            "similarity {:?} does not match {b}x{b} labels",
            tape.shape(sim.values)
        )));
    }
    let bce = tape.bce_with_logits(sim.values, &labels.to_tensor())?;
    let rows = tape.mean_axis(bce, 1)?;
    let rows = tape.mean(rows);
    let cols = tape.mean_axis(bce, 0)?;
    let cols = tape.mean(cols);
    let both = tape.add(rows, cols)?;
    Ok(tape.scale(both, 0.5 * alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PretrainLoss {
    pub total: Var,
    pub l1: Var,
    pub cmcl: Var,
}

/// Mean absolute reconstruction error plus the contrastive term.
///
/// `z` stacks one unit latent per sample; `modalities` names each row.
pub fn pretrain_loss<T: Element>(
    tape: &mut Tape<T>,
    recon: Var,
    target: Var,
    z: Var,
    modalities: &[ModalityTag],
    cfg: &LossConfig,
) -> Result<PretrainLoss> {
    if tape.shape(recon) != tape.shape(target) {
        return Err(DaeError::Contract(format!(
            "reconstruction {:?} and target {:?} differ",
            tape.shape(recon),
            tape.shape(target)
        )));
    }
    let l1 = tape.l1(recon, target)?;
    let sim = similarity(tape, z, cfg.cmcl_temperature)?;
    let cmcl = cmcl_loss(tape, &sim, &label_matrix(modalities), cfg.cmcl_alpha)?;
    let total = tape.add(l1, cmcl)?;
    Ok(PretrainLoss { total, l1, cmcl })
}

/// One-hot `K×V` encoding of class labels.
pub fn one_hot<T: Element>(labels: &[u8], classes: usize) -> Result<Tensor<T>> {
    let v = labels.len();
    let mut t = Tensor::zeros(&[classes, v]);
    let data = t.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        let l = usize::from(l);
        if l >= classes {
            return Err(DaeError::Contract(format!("label {l} at voxel {i} exceeds {classes} classes")));
        }
        data[l * v + i] = T::one();
    }
    Ok(t)
}

/// Soft Dice loss, `1 − mean_k (2Σpg + s) / (Σp + Σg + s)`.
///
/// `probs` is `K×V` with each column a distribution over classes; `labels`
/// holds `V` class indices in the same voxel order.
pub fn dice_loss<T: Element>(tape: &mut Tape<T>, probs: Var, labels: &[u8], smooth: f64) -> Result<Var> {
    let (k, v) = tape.value(probs).dims2("dice_loss")?;
    if labels.len() != v {
        return Err(DaeError::Contract(format!("{} labels for {v} voxels", labels.len())));
    }
    let p = tape.value(probs).data();
    for i in 0..v {
        let s: f64 = (0..k).map(|c| p[c * v + i].as_f64()).sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(DaeError::Contract(format!("class probabilities at voxel {i} sum to {s}")));
        }
    }
    let g = one_hot::<T>(labels, k)?;
    let g_sum = Tensor::from_fn(&[k], |c| g.data()[c * v..(c + 1) * v].iter().copied().sum());
    let g = tape.constant(g);
    let inter = tape.mul(probs, g)?;
    let inter = tape.sum_axis(inter, 1)?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, smooth);
    let p_sum = tape.sum_axis(probs, 1)?;
    let g_sum = tape.constant(g_sum);
    let den = tape.add(p_sum, g_sum)?;
    let den = tape.add_scalar(den, smooth);
    let dice = tape.div(num, den)?;
    let mean = tape.mean(dice);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Hard Dice per class from arg-max predictions; a class absent from both
/// prediction and ground truth scores 1.
pub fn hard_dice(pred: &[u8], truth: &[u8], classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let c = c as u8;
            let mut inter = 0usize;
            let mut p = 0usize;
            let mut g = 0usize;
            for (&a, &b) in pred.iter().zip(truth) {
                p += usize::from(a == c);
                g += usize::from(b == c);
                inter += usize::from(a == c && b == c);
            }
            if p + g == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (p + g) as f64
            }
        })
        .collect()
}
