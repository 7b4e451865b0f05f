//! DAEC checkpoint format (little-endian):
//!
//! ```text
//! "DAEC" | u32 version=1 | u32 count | count × (u16 n | n bytes UTF-8 name | u8 rank | rank × u32 dim | f32 payload)
//! ```
//!
//! Model parameters keep their own names; optimizer moments are stored as
//! `opt.m.<name>` / `opt.v.<name>`, and run metadata as `meta.*` tensors.

use std::fs;
use std::path::Path;

use dae_tensor::Tensor;

use crate::binio::Reader;
use crate::error::{DaeError, Result};
use crate::model::{DaeModel, Head, ModelConfig, ParamStore};

pub const DAEC_MAGIC: &[u8; 4] = b"DAEC";
pub const DAEC_VERSION: u32 = 1;

const META_MODEL: &str = "meta.model";
const META_STEP: &str = "meta.step";
const META_SEED: &str = "meta.seed";
const OPT_STEP: &str = "opt.step";

/// Optimizer moments aligned with the model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DaeModel<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Completed training steps.
    pub step: u64,
    pub seed: u64,
}

/// Raw named tensors of a DAEC file, in file order.
pub fn read_daec(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| DaeError::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != DAEC_MAGIC {
        return Err(r.fail(0, "bad magic, expected \"DAEC\""));
    }
    let version = r.u32("version")?;
    if version != DAEC_VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| r.fail(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let at = r.pos;
        let payload = r.take(len.checked_mul(4).ok_or_else(|| r.fail(at, "tensor too large"))?, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_daec<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(DAEC_MAGIC);
    out.extend_from_slice(&DAEC_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| DaeError::Parameter(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DaeError::io(parent, e))?;
    }
    let tmp = path.with_extension("daec.tmp");
    fs::write(&tmp, out).map_err(|e| DaeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DaeError::io(path, e))
}

/// A u64 as four exactly representable 16-bit chunks, low first.
fn u64_tensor(v: u64) -> Tensor<f32> {
    Tensor::from_fn(&[4], |i| ((v >> (16 * i)) & 0xffff) as f32)
}

fn tensor_u64(t: &Tensor<f32>) -> Option<u64> {
    if t.shape() != [4] {
        return None;
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (i, &c)| {
        ((0.0..=65535.0).contains(&c) && c.fract() == 0.0).then(|| acc | ((c as u64) << (16 * i)))
    })
}

fn model_meta(config: &ModelConfig, head: Head) -> Tensor<f32> {
    let classes = match head {
        Head::Reconstruction => 0,
        Head::Segmentation { classes } => classes,
    };
    let fields = [
        config.patch[0],
        config.patch[1],
        config.patch[2],
        config.input[0],
        config.input[1],
        config.input[2],
        config.embed_dim,
        config.depth,
        config.heads,
        config.mlp_ratio,
        config.latent_dim,
        classes,
    ];
    Tensor::from_fn(&[fields.len()], |i| fields[i] as f32)
}

fn parse_model_meta(t: &Tensor<f32>) -> Option<(ModelConfig, Head)> {
    let f: Vec<usize> = t
        .data()
        .iter()
        .map(|&v| (v >= 0.0 && v.fract() == 0.0).then_some(v as usize))
        .collect::<Option<_>>()?;
    let [p0, p1, p2, i0, i1, i2, embed_dim, depth, heads, mlp_ratio, latent_dim, classes] = f[..] else {
        return None;
    };
    let config = ModelConfig {
        patch: [p0, p1, p2],
        input: [i0, i1, i2],
        embed_dim,
        depth,
        heads,
        mlp_ratio,
        latent_dim,
    };
    let head = if classes == 0 {
        Head::Reconstruction
    } else {
        Head::Segmentation { classes }
    };
    Some((config, head))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra: Vec<(String, Tensor<f32>)> = vec![
            (META_MODEL.into(), model_meta(self.model.config(), self.model.head())),
            (META_STEP.into(), u64_tensor(self.step)),
            (META_SEED.into(), u64_tensor(self.seed)),
        ];
        if let Some(opt) = &self.optimizer {
            extra.push((OPT_STEP.into(), u64_tensor(opt.step)));
            for (name, m) in self.model.params().names().iter().zip(&opt.m) {
                extra.push((format!("opt.m.{name}"), m.clone()));
            }
            for (name, v) in self.model.params().names().iter().zip(&opt.v) {
                extra.push((format!("opt.v.{name}"), v.clone()));
            }
        }
        let params = self.model.params().iter();
        write_daec(path, params.chain(extra.iter().map(|(n, t)| (n.as_str(), t))))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = read_daec(path)?;
        let bad = |reason: String| DaeError::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason,
        };
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let (config, head) = find(META_MODEL)
            .and_then(parse_model_meta)
            .ok_or_else(|| bad(format!("missing or malformed {META_MODEL}")))?;
        let step = find(META_STEP)
            .and_then(tensor_u64)
            .ok_or_else(|| bad(format!("missing or malformed {META_STEP}")))?;
        let seed = find(META_SEED)
            .and_then(tensor_u64)
            .ok_or_else(|| bad(format!("missing or malformed {META_SEED}")))?;

        let mut params = ParamStore::default();
        for (name, t) in &tensors {
            if !name.starts_with("meta.") && !name.starts_with("opt.") {
                params.insert(name.clone(), t.clone());
            }
        }
        let model = DaeModel::from_params(config, head, params)?;
        let optimizer = match find(OPT_STEP) {
            None => None,
            Some(t) => {
                let step = tensor_u64(t).ok_or_else(|| bad(format!("malformed {OPT_STEP}")))?;
                let moment = |kind: &str| -> Result<Vec<Tensor<f32>>> {
                    model
                        .params()
                        .names()
                        .iter()
                        .map(|n| {
                            find(&format!("opt.{kind}.{n}"))
                                .cloned()
                                .ok_or_else(|| bad(format!("missing optimizer state opt.{kind}.{n}")))
                        })
                        .collect()
                };
                Some(OptimizerState {
                    m: moment("m")?,
                    v: moment("v")?,
                    step,
                })
            }
        };
        Ok(Self {
            model,
            optimizer,
            step,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u64_chunks_round_trip() {
        for v in [0, 1, 65535, 65536, u64::MAX, 0x1234_5678_9abc_def0] {
            assert_eq!(tensor_u64(&u64_tensor(v)), Some(v));
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.daec");
        fs::write(&p, b"DVOL\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        match read_daec(&p) {
            Err(DaeError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.daec");
        let t = Tensor::from_vec(vec![2, 3], vec![1.0f32; 6]).unwrap();
        write_daec(&p, [("w", &t)]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_daec(&p), Err(DaeError::Format { .. })));
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.daec");
        let a = Tensor::from_vec(vec![2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0]).unwrap();
        let s = Tensor::scalar(7.0f32);
        write_daec(&p, [("a", &a), ("s", &s)]).unwrap();
        let back = read_daec(&p).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("s".to_string(), s)]);
    }
}
