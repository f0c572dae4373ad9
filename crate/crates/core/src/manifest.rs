//! Versioned JSON dataset manifest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::video::{peek_clip_shape, read_clip};
use crate::views::KeypointTrack;
use crate::{io, Error, Result};

pub const MANIFEST_FORMAT: &str = "stan-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    /// One `0`/`1` character per frame; `1` marks an important frame.
    pub importance: String,
    pub group: usize,
    pub frames: usize,
    pub split: Split,
    pub keypoints: KeypointTrack,
}

impl ClipEntry {
    pub fn importance_mask(&self) -> Vec<bool> {
        self.importance.bytes().map(|b| b == b'1').collect()
    }
}

pub fn encode_mask(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dataset_id: String,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<ClipEntry>,
}

impl Manifest {
    pub fn new(dataset_id: impl Into<String>, num_classes: usize, height: usize, width: usize) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            dataset_id: dataset_id.into(),
            num_classes,
            height,
            width,
            clips: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Parses and checks every structural invariant that does not need the
    /// clip files.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.format != MANIFEST_FORMAT {
            return bad(format!("format tag `{}`, expected `{MANIFEST_FORMAT}`", self.format));
        }
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported manifest version {}", self.version));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        let mut ids = HashSet::new();
        for c in &self.clips {
            if !ids.insert(c.id.as_str()) {
                return bad(format!("duplicate clip id {}", c.id));
            }
            if c.label >= self.num_classes {
                return bad(format!("clip {}: label {} outside {} classes", c.id, c.label, self.num_classes));
            }
            if c.importance.len() != c.frames || c.importance.bytes().any(|b| b != b'0' && b != b'1') {
                return bad(format!(
                    "clip {}: importance mask must be {} characters of 0/1",
                    c.id, c.frames
                ));
            }
            if c.keypoints.len() != c.frames {
                return bad(format!(
                    "clip {}: keypoint track has {} frames, expected {}",
                    c.id,
                    c.keypoints.len(),
                    c.frames
                ));
            }
        }
        Ok(())
    }

    /// Checks that every clip file exists and its header matches the entry.
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        for c in &self.clips {
            let p = base.join(&c.path);
            let shape = peek_clip_shape(&p).map_err(|e| Error::Manifest(format!("clip {}: {e}", c.id)))?;
            if shape != [3, c.frames, self.height, self.width] {
                return Err(Error::Manifest(format!(
                    "clip {}: file holds {shape:?}, manifest says [3, {}, {}, {}]",
                    c.id, c.frames, self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// Reads, parses and fully validates a manifest file.
    pub fn read(path: &Path) -> Result<Self> {
        let m = Self::from_json(&io::read_string(path)?)?;
        m.validate_files(&base_dir(path))?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, self.to_json().as_bytes())
    }

    pub fn find(&self, id: &str) -> Result<&ClipEntry> {
        self.clips
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Argument(format!("no clip with id `{id}` in manifest")))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.clips.len()).filter(|&i| self.clips[i].split == split).collect()
    }
}

/// Directory that clip paths of the manifest at `path` are relative to.
pub fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_clip(base: &Path, entry: &ClipEntry) -> Result<Tensor<f32>> {
    read_clip(&base.join(&entry.path))
}
