//! On-disk tuple archives: three PNGs per tuple plus `manifest.csv`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stegattack::image::{load_image, save_image};
use stegattack::training::StegoTuple;

pub const MANIFEST: &str = "manifest.csv";

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub secret_path: PathBuf,
    pub cover_path: PathBuf,
    pub container_path: PathBuf,
}

pub fn write_archive(dir: &Path, tuples: &[StegoTuple]) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rows = Vec::with_capacity(tuples.len());
    for (i, t) in tuples.iter().enumerate() {
        let id = t.id.clone().unwrap_or_else(|| format!("{i:05}"));
        let row = ManifestRow {
            secret_path: format!("{id}_secret.png").into(),
            cover_path: format!("{id}_cover.png").into(),
            container_path: format!("{id}_container.png").into(),
            id,
        };
        save_image(&t.secret, dir.join(&row.secret_path))?;
        save_image(&t.cover, dir.join(&row.cover_path))?;
        save_image(&t.container, dir.join(&row.container_path))?;
        rows.push(row);
    }
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        bail!("no tuple archive at {} (run generate-dataset first)", dir.display());
    }
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<ManifestRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} lists no tuples", path.display());
    }
    Ok(rows)
}

pub fn read_archive(dir: &Path, size: usize, channels: usize) -> Result<Vec<StegoTuple>> {
    read_manifest(dir)?
        .into_iter()
        .map(|row| {
            let load = |p: &Path| load_image(dir.join(p), size, channels);
            Ok(StegoTuple::new(
                load(&row.secret_path)?,
                load(&row.cover_path)?,
                load(&row.container_path)?,
                Some(row.id),
            )?)
        })
        .collect()
}
