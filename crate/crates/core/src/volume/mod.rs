//! 3D scalar volumes, their on-disk format, synthetic phantoms and the
//! dataset manifest.

mod dvol;
mod manifest;
mod synth;

use std::fmt;

use rand::Rng;

use crate::error::{DaeError, Result};

pub use dvol::{load_labels, load_volume, read_dvol, save_labels, save_volume, write_dvol, DVOL_MAGIC, DVOL_VERSION};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{synth_volume, MIN_SYNTH_DIM};

/// Acquisition type of a volume. Stored upper-cased, so comparison is
/// case-insensitive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityTag(String);

impl ModalityTag {
    pub const CT: &'static str = "CT";
    pub const T1: &'static str = "T1";
    pub const T2: &'static str = "T2";
    pub const FLAIR: &'static str = "FLAIR";
    pub const T1CE: &'static str = "T1CE";
    pub const SYNTH_A: &'static str = "SYNTH_A";
    pub const SYNTH_B: &'static str = "SYNTH_B";
    pub const SYNTH_C: &'static str = "SYNTH_C";

    pub fn new(name: &str) -> Result<Self> {
        let name = name.trim();
        if name.is_empty() {
            return Err(DaeError::Parameter("empty modality tag".into()));
        }
        Ok(Self(name.to_uppercase()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for ModalityTag {
    type Err = DaeError;
    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

pub type Dims = [usize; 3];

fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

/// Row-major 3D intensity field, depth slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxels: Vec<f32>,
    modality: ModalityTag,
    intensity_range: (f32, f32),
}

impl Volume {
    /// Wraps raw voxels without normalizing them.
    pub fn new(dims: Dims, voxels: Vec<f32>, modality: ModalityTag) -> Result<Self> {
        if dims.contains(&0) {
            return Err(DaeError::Parameter(format!("zero extent in dims {dims:?}")));
        }
        if voxel_count(dims) != voxels.len() {
            return Err(DaeError::Parameter(format!(
                "dims {dims:?} need {} voxels, got {}",
                voxel_count(dims),
                voxels.len()
            )));
        }
        let intensity_range = min_max(&voxels);
        Ok(Self {
            dims,
            voxels,
            modality,
            intensity_range,
        })
    }

    pub fn filled(dims: Dims, value: f32, modality: ModalityTag) -> Result<Self> {
        Self::new(dims, vec![value; voxel_count(dims)], modality)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn modality(&self) -> &ModalityTag {
        &self.modality
    }

    pub fn intensity_range(&self) -> (f32, f32) {
        self.intensity_range
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    /// Same geometry and modality, new voxel values.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, voxels, self.modality.clone())
    }

    /// Min-max rescales voxels to `[0, 1]`. A constant volume maps to zeros.
    pub fn normalized(&self) -> Self {
        let (lo, hi) = min_max(&self.voxels);
        let span = hi as f64 - lo as f64;
        let voxels: Vec<f32> = if span > 0.0 {
            self.voxels
                .iter()
                .map(|&v| ((v as f64 - lo as f64) / span) as f32)
                .collect()
        } else {
            vec![0.0; self.voxels.len()]
        };
        let intensity_range = min_max(&voxels);
        Self {
            dims: self.dims,
            voxels,
            modality: self.modality.clone(),
            intensity_range,
        }
    }

    /// Sub-volume of extent `size` whose origin is `offset`.
    pub fn crop_at(&self, offset: Dims, size: Dims) -> Result<Self> {
        let voxels = crop_slice(&self.voxels, self.dims, offset, size)?;
        Self::new(size, voxels, self.modality.clone())
    }

    /// Uniformly placed crop of extent `size`.
    pub fn random_crop<R: Rng + ?Sized>(&self, size: Dims, rng: &mut R) -> Result<Self> {
        let offset = crop_offsets(self.dims, size, rng)?;
        self.crop_at(offset, size)
    }
}

/// Per-voxel class indices, 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if voxel_count(dims) != labels.len() || dims.contains(&0) {
            return Err(DaeError::Parameter(format!(
                "label dims {dims:?} do not match {} labels",
                labels.len()
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    pub fn crop_at(&self, offset: Dims, size: Dims) -> Result<Self> {
        Self::new(size, crop_slice(&self.labels, self.dims, offset, size)?)
    }
}

/// Draws a uniform crop origin; each offset lies in `0..=dims - size`.
pub fn crop_offsets<R: Rng + ?Sized>(dims: Dims, size: Dims, rng: &mut R) -> Result<Dims> {
    check_crop(dims, [0; 3], size)?;
    Ok([0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size[a])))
}

/// Free-function form of [`Volume::random_crop`].
pub fn random_crop<R: Rng + ?Sized>(v: &Volume, size: Dims, rng: &mut R) -> Result<Volume> {
    v.random_crop(size, rng)
}

fn check_crop(dims: Dims, offset: Dims, size: Dims) -> Result<()> {
    if size.contains(&0) || (0..3).any(|a| offset[a] + size[a] > dims[a]) {
        return Err(DaeError::Parameter(format!(
            "crop of size {size:?} at {offset:?} does not fit volume {dims:?}"
        )));
    }
    Ok(())
}

fn crop_slice<V: Copy>(src: &[V], dims: Dims, offset: Dims, size: Dims) -> Result<Vec<V>> {
    check_crop(dims, offset, size)?;
    let mut out = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = ((offset[0] + z) * dims[1] + offset[1] + y) * dims[2] + offset[2];
            out.extend_from_slice(&src[start..start + size[2]]);
        }
    }
    Ok(out)
}

fn min_max(v: &[f32]) -> (f32, f32) {
    v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}
