use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::{read_tensor, write_tensor};
use crate::balance::BalancingFactor;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Onehot,
    Logits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Original,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub target: String,
    pub kind: TargetKind,
    pub split: Split,
    pub seed: u64,
    #[serde(default)]
    pub role: Role,
    /// Argmax mask rendered for inspection (generated samples only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_mask: Option<String>,
}

/// Index of image/target tensor files. Paths are relative to the directory
/// holding the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_classes: usize,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balancing_factor: Option<BalancingFactor>,
    #[serde(skip)]
    root: PathBuf,
}

/// One decoded pair: image `1 x H x W` and target `C x H x W`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub target: Tensor<f32>,
    pub kind: TargetKind,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, num_classes: usize) -> Self {
        Self {
            version: MANIFEST_VERSION,
            num_classes,
            samples: Vec::new(),
            balancing_factor: None,
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn target_kind(&self) -> Option<TargetKind> {
        self.samples.first().map(|s| s.kind)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes both tensors under the manifest root and appends a record.
    pub fn push_sample(
        &mut self,
        stem: &str,
        image: &Tensor<f32>,
        target: &Tensor<f32>,
        kind: TargetKind,
        split: Split,
        seed: u64,
    ) -> Result<usize> {
        let image_rel = format!("images/{stem}.dktn");
        let target_dir = match kind {
            TargetKind::Onehot => "masks",
            TargetKind::Logits => "logits",
        };
        let target_rel = format!("{target_dir}/{stem}.dktn");
        for dir in ["images", target_dir] {
            let d = self.root.join(dir);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        write_tensor(&self.root.join(&image_rel), image)?;
        write_tensor(&self.root.join(&target_rel), target)?;
        self.samples.push(SampleRecord {
            image: image_rel,
            target: target_rel,
            kind,
            split,
            seed,
            role: match kind {
                TargetKind::Onehot => Role::Original,
                TargetKind::Logits => Role::Generated,
            },
            hard_mask: None,
        });
        Ok(self.samples.len() - 1)
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let rec = self
            .samples
            .get(index)
            .ok_or_else(|| Error::param(format!("sample index {index} out of range")))?;
        let image = read_tensor(&self.path_of(&rec.image))?;
        let target = read_tensor(&self.path_of(&rec.target))?;
        let (ic, ih, iw) = image.chw()?;
        let (tc, th, tw) = target.chw()?;
        if ic != 1 || tc != self.num_classes || (ih, iw) != (th, tw) {
            return Err(Error::invalid(format!(
                "sample {index}: image {:?} / target {:?} inconsistent with {} classes",
                image.shape(),
                target.shape(),
                self.num_classes
            )));
        }
        Ok(Sample {
            image,
            target,
            kind: rec.kind,
        })
    }

    pub fn load_all(&self, split: Option<Split>) -> Result<Vec<Sample>> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, r)| split.map_or(true, |s| r.split == s))
            .map(|(i, _)| self.load_sample(i))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest and checks it closed-world: homogeneous target kinds
    /// and every referenced file present and decodable.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("manifest needs at least two classes"));
        }
        if let Some(kind) = self.target_kind() {
            if self.samples.iter().any(|s| s.kind != kind) {
                return Err(Error::invalid("mixed target kinds in one manifest"));
            }
        }
        for i in 0..self.samples.len() {
            self.load_sample(i)?;
            if let Some(h) = &self.samples[i].hard_mask {
                read_tensor(&self.path_of(h))?;
            }
        }
        Ok(())
    }

    /// SHA-256 over every referenced file in manifest order (hex).
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for rec in &self.samples {
            for rel in [Some(&rec.image), Some(&rec.target), rec.hard_mask.as_ref()]
                .into_iter()
                .flatten()
            {
                let path = self.path_of(rel);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                h.update(rel.as_bytes());
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
