//! Image directories, seeded splits and (secret, cover, container) tuples.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, ImageBatch};
use crate::oracle::OracleParams;
use crate::seed;
use crate::training::StegoTuple;

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "gif"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    pub image_size: usize,
    pub channels: usize,
    /// (train, validation, test)
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            root_path: PathBuf::from("data"),
            image_size: 32,
            channels: 4,
            split_fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let f = self.split_fractions;
        if f.iter().any(|&v| !(v > 0.0 && v.is_finite())) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split_fractions must be positive and sum to 1, got {f:?}"
            )));
        }
        if !matches!(self.channels, 3 | 4) {
            return Err(Error::Config(format!("channels must be 3 or 4, got {}", self.channels)));
        }
        if self.image_size < 2 {
            return Err(Error::Config(format!("image_size must be at least 2, got {}", self.image_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

/// Image files under `root` (non-recursive) with a known extension, sorted by name.
pub fn list_images(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset directory {} does not exist",
            root.display()
        )));
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        let known = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if known && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// A directory of images with a seeded, file-disjoint train/validation/test split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    splits: [Vec<PathBuf>; 3],
}

impl Dataset {
    pub fn open(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut files = list_images(&spec.root_path)?;
        if files.len() < 2 {
            return Err(Error::Config(format!(
                "dataset directory {} holds {} image files, need at least 2",
                spec.root_path.display(),
                files.len()
            )));
        }
        files.shuffle(&mut seed::rng(spec.seed, "dataset-split", 0));
        let n = files.len();
        let n_train = (spec.split_fractions[0] * n as f64).round() as usize;
        let n_val = (spec.split_fractions[1] * n as f64).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        let test = files.split_off(n_train + n_val);
        let val = files.split_off(n_train);
        Ok(Self {
            spec: spec.clone(),
            splits: [files, val, test],
        })
    }

    pub fn files(&self, split: Split) -> &[PathBuf] {
        &self.splits[split.index()]
    }

    /// Decodes one split; undecodable files are skipped with a warning.
    pub fn load(&self, split: Split) -> Result<Vec<(PathBuf, ImageBatch)>> {
        load_files(self.files(split), &self.spec)
    }
}

fn load_files(files: &[PathBuf], spec: &DatasetSpec) -> Result<Vec<(PathBuf, ImageBatch)>> {
    let mut out = Vec::with_capacity(files.len());
    let mut last_err = None;
    for path in files {
        match load_image(path, spec.image_size, spec.channels) {
            Ok(img) => out.push((path.clone(), img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                last_err = Some(e);
            }
        }
    }
    match (out.is_empty(), last_err) {
        (true, Some(e)) => Err(Error::Config(format!("no file could be decoded; last error: {e}"))),
        _ => Ok(out),
    }
}

/// Every decodable image under `spec.root_path`, in seeded order.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<ImageBatch>> {
    spec.validate()?;
    let mut files = list_images(&spec.root_path)?;
    if files.len() < 2 {
        return Err(Error::Config(format!(
            "dataset directory {} holds {} image files, need at least 2",
            spec.root_path.display(),
            files.len()
        )));
    }
    files.shuffle(&mut seed::rng(spec.seed, "dataset-order", 0));
    Ok(load_files(&files, spec)?.into_iter().map(|(_, img)| img).collect())
}

/// Pairs the i-th secret with the i-th cover for `i < budget` and embeds each
/// pair with the oracle. Tuple ids are the pair indices.
pub fn make_tuples(
    secrets: &[ImageBatch],
    covers: &[ImageBatch],
    oracle: &OracleParams,
    budget: usize,
) -> Result<Vec<StegoTuple>> {
    if budget == 0 {
        return Err(Error::Config("tuple budget must be at least 1".into()));
    }
    let s: Vec<ImageBatch> = secrets.iter().flat_map(|b| b.items()).collect();
    let c: Vec<ImageBatch> = covers.iter().flat_map(|b| b.items()).collect();
    let limit = s.len().min(c.len());
    if budget > limit {
        return Err(Error::Config(format!(
            "tuple budget {budget} exceeds the {limit} available secret/cover pairs \
             ({} secrets, {} covers)",
            s.len(),
            c.len()
        )));
    }
    let mut tuples = Vec::with_capacity(budget);
    for start in (0..budget).step_by(32) {
        let end = (start + 32).min(budget);
        let sb = ImageBatch::stack(&s[start..end])?;
        let cb = ImageBatch::stack(&c[start..end])?;
        let containers = oracle.embed(&sb, &cb)?;
        for (k, i) in (start..end).enumerate() {
            tuples.push(StegoTuple::new(
                s[i].clone(),
                c[i].clone(),
                containers.item(k),
                Some(format!("{i:05}")),
            )?);
        }
    }
    Ok(tuples)
}
