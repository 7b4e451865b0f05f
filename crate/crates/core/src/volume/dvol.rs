//! DVOL binary volume format (little-endian):
//!
//! ```text
//! "DVOL" | u32 version=1 | u32 D | u32 H | u32 W | u16 n | n bytes UTF-8 modality | D*H*W f32
//! ```

use std::fs;
use std::path::Path;

use super::{Dims, LabelVolume, ModalityTag, Volume};
use crate::binio::Reader;
use crate::error::{DaeError, Result};

pub const DVOL_MAGIC: &[u8; 4] = b"DVOL";
pub const DVOL_VERSION: u32 = 1;

const LABEL_TAG: &str = "LABEL";

/// Raw contents of a DVOL file: dims, modality string and voxels.
pub fn read_dvol(path: &Path) -> Result<(Dims, String, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| DaeError::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != DVOL_MAGIC {
        return Err(r.fail(0, "bad magic, expected \"DVOL\""));
    }
    let version = r.u32("version")?;
    if version != DVOL_VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for (axis, d) in dims.iter_mut().enumerate() {
        let at = r.pos;
        *d = r.u32("dimension")? as usize;
        if *d == 0 {
            return Err(r.fail(at, format!("zero extent on axis {axis}")));
        }
    }
    let name_len = r.u16("modality length")? as usize;
    let at = r.pos;
    let name = std::str::from_utf8(r.take(name_len, "modality")?)
        .map_err(|_| r.fail(at, "modality is not UTF-8"))?
        .to_string();
    let count: usize = dims.iter().product();
    let payload = r.take(count * 4, "voxel payload")?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, name, voxels))
}

pub fn write_dvol(path: &Path, dims: Dims, modality: &str, voxels: &[f32]) -> Result<()> {
    let name = modality.as_bytes();
    let name_len = u16::try_from(name.len())
        .map_err(|_| DaeError::Parameter("modality name longer than 65535 bytes".into()))?;
    let mut out = Vec::with_capacity(22 + name.len() + voxels.len() * 4);
    out.extend_from_slice(DVOL_MAGIC);
    out.extend_from_slice(&DVOL_VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| DaeError::Parameter(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name);
    for v in voxels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DaeError::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| DaeError::io(path, e))
}

/// Reads a DVOL file and min-max normalizes it to `[0, 1]`.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (dims, name, voxels) = read_dvol(path)?;
    let modality = ModalityTag::new(&name).map_err(|_| DaeError::Format {
        path: path.to_path_buf(),
        offset: 20,
        reason: "empty modality".into(),
    })?;
    Ok(Volume::new(dims, voxels, modality)?.normalized())
}

/// Writes voxels as stored, without rescaling.
pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    write_dvol(path.as_ref(), v.dims(), v.modality().as_str(), v.voxels())
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelVolume) -> Result<()> {
    let voxels: Vec<f32> = labels.labels().iter().map(|&l| l as f32).collect();
    write_dvol(path.as_ref(), labels.dims(), LABEL_TAG, &voxels)
}

/// Reads a label DVOL; every voxel must be an integer in `0..=255`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let (dims, _, voxels) = read_dvol(path)?;
    let header = 22 + LABEL_TAG.len();
    let mut labels = Vec::with_capacity(voxels.len());
    for (i, v) in voxels.into_iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(DaeError::Format {
                path: path.to_path_buf(),
                offset: (header + 4 * i) as u64,
                reason: format!("label value {v} is not a class index"),
            });
        }
        labels.push(v as u8);
    }
    LabelVolume::new(dims, labels)
}
