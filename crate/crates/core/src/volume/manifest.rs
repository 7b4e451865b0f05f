use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::ModalityTag;
use crate::error::{DaeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = DaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DaeError::Data(format!(
                "unknown split {other:?}, expected train, val or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub modality: ModalityTag,
    pub split: Split,
}

/// Tab-separated list of `path, modality, split` records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.clone()) {
                return Err(DaeError::Data(format!("duplicate manifest path {}", e.path.display())));
            }
        }
        Ok(Self { entries })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, modality, split] = fields[..] else {
                return Err(DaeError::Data(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            };
            let at = |e: DaeError| DaeError::Data(format!("manifest line {}: {e}", lineno + 1));
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                modality: ModalityTag::new(modality).map_err(at)?,
                split: split.trim().parse().map_err(at)?,
            });
        }
        Self::new(entries)
    }

    /// Reads a manifest file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DaeError::io(path, e))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# path\tmodality\tsplit\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.modality, e.split));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| DaeError::io(path, e))
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Distinct modalities, sorted.
    pub fn modalities(&self, split: Split) -> Vec<ModalityTag> {
        let mut m: Vec<ModalityTag> = self.split(split).iter().map(|e| e.modality.clone()).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn require_split(&self, split: Split) -> Result<Vec<&ManifestEntry>> {
        let entries = self.split(split);
        if entries.is_empty() {
            return Err(DaeError::Data(format!("manifest has no {split} entries")));
        }
        Ok(entries)
    }
}
