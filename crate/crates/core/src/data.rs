//! Synthetic corpora on disk and their in-memory splits.

use std::path::{Path, PathBuf};

use crate::error::{DaeError, Result};
use crate::volume::{
    load_labels, load_volume, save_labels, save_volume, synth_volume, Dims, LabelVolume, Manifest, ManifestEntry,
    ModalityTag, Split, Volume,
};

/// `a/b.dvol` → `a/b.label.dvol`.
pub fn label_path(volume: &Path) -> PathBuf {
    let stem = volume.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    volume.with_file_name(format!("{stem}.label.dvol"))
}

/// Seed of phantom `index`; shared by every modality so each modality
/// images the same anatomy.
pub fn phantom_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub modalities: Vec<ModalityTag>,
    pub dims: Dims,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl SynthSpec {
    /// Phantom index → split: train first, then val, then test.
    pub fn split_of(&self, index: usize) -> Split {
        let n_val = (self.count as f64 * self.val_fraction).round() as usize;
        let n_test = (self.count as f64 * self.test_fraction).round() as usize;
        let n_train = self.count.saturating_sub(n_val + n_test);
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Writes `count` phantoms per modality with label siblings and a
/// `manifest.tsv` of relative paths into `dir`. Returns the manifest path.
pub fn synth_corpus(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    if spec.count == 0 || spec.modalities.is_empty() {
        return Err(DaeError::Parameter("synth needs count > 0 and at least one modality".into()));
    }
    let fractions = spec.val_fraction + spec.test_fraction;
    if !(0.0..=1.0).contains(&spec.val_fraction) || !(0.0..=1.0).contains(&spec.test_fraction) || fractions > 1.0 {
        return Err(DaeError::Parameter(format!(
            "val_fraction {} and test_fraction {} must lie in [0, 1] and sum to at most 1",
            spec.val_fraction, spec.test_fraction
        )));
    }
    let mut entries = Vec::new();
    for m in &spec.modalities {
        for i in 0..spec.count {
            let (volume, labels) = synth_volume(phantom_seed(spec.seed, i), m, spec.dims)?;
            let rel = PathBuf::from(m.as_str().to_lowercase()).join(format!("{}_{i:03}.dvol", m.as_str().to_lowercase()));
            save_volume(dir.join(&rel), &volume)?;
            save_labels(label_path(&dir.join(&rel)), &labels)?;
            entries.push(ManifestEntry {
                path: rel,
                modality: m.clone(),
                split: spec.split_of(i),
            });
        }
    }
    let path = dir.join("manifest.tsv");
    Manifest::new(entries)?.save(&path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub volume: Volume,
    pub labels: Option<LabelVolume>,
}

/// All volumes of one split, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads one split. With `labels` every volume needs a
    /// `.label.dvol` sibling of matching extents.
    pub fn load(manifest: &Manifest, split: Split, labels: bool) -> Result<Self> {
        let mut samples = Vec::new();
        for e in manifest.require_split(split)? {
            let volume = load_volume(&e.path)?;
            if volume.modality() != &e.modality {
                return Err(DaeError::Data(format!(
                    "{} is {} but the manifest says {}",
                    e.path.display(),
                    volume.modality(),
                    e.modality
                )));
            }
            let labels = if labels {
                let lp = label_path(&e.path);
                if !lp.exists() {
                    return Err(DaeError::Data(format!("missing labels {}", lp.display())));
                }
                let l = load_labels(&lp)?;
                if l.dims() != volume.dims() {
                    return Err(DaeError::Data(format!(
                        "labels {} have dims {:?}, volume has {:?}",
                        lp.display(),
                        l.dims(),
                        volume.dims()
                    )));
                }
                Some(l)
            } else {
                None
            };
            samples.push(Sample {
                path: e.path.clone(),
                volume,
                labels,
            });
        }
        Ok(Self { split, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by modality, modalities sorted.
    pub fn by_modality(&self) -> Vec<(ModalityTag, Vec<usize>)> {
        let mut groups: Vec<(ModalityTag, Vec<usize>)> = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            let m = s.volume.modality();
            match groups.iter_mut().find(|(g, _)| g == m) {
                Some((_, idx)) => idx.push(i),
                None => groups.push((m.clone(), vec![i])),
            }
        }
        groups.sort_by(|a, b| a.0.cmp(&b.0));
        groups
    }

    /// Checks that every volume can hold a crop of `size`.
    pub fn require_crop(&self, size: Dims) -> Result<()> {
        for s in &self.samples {
            if (0..3).any(|a| s.volume.dims()[a] < size[a]) {
                return Err(DaeError::Data(format!(
                    "{} has dims {:?}, smaller than crop {size:?}",
                    s.path.display(),
                    s.volume.dims()
                )));
            }
        }
        Ok(())
    }
}
