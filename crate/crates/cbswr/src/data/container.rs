//! Flat binary array container with a JSON manifest, used to archive
//! datasets and embedding dumps so runs can be replayed.
//!
//! A container is a path prefix `<base>`; the payload lives in `<base>.bin`
//! (little-endian f64) and the description in `<base>.manifest.json`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::{ImageSample, LabeledImages};
use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContainerManifest {
    pub version: u32,
    /// What one item is: "images" or "embeddings".
    pub kind: String,
    /// Shape of a single item, e.g. [1, 16, 16] or [16].
    pub item_shape: Vec<usize>,
    pub count: usize,
    /// Ground-truth class id per item.
    pub class_ids: Vec<usize>,
    pub dtype: String,
    /// Free-form provenance: seeds, config hash, and similar.
    pub meta: BTreeMap<String, String>,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn payload_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

/// Write a manifest + payload pair under the given path prefix.
pub fn export(base: &Path, manifest: &ContainerManifest, data: &[f64]) -> Result<()> {
    let per_item: usize = manifest.item_shape.iter().product();
    if data.len() != per_item * manifest.count {
        return Err(Error::Container(format!(
            "payload has {} values but manifest declares {} x {per_item}",
            data.len(),
            manifest.count
        )));
    }
    if manifest.class_ids.len() != manifest.count {
        return Err(Error::Container("class_ids length does not match count".into()));
    }
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(manifest_path(base), json)?;
    let mut out = BufWriter::new(fs::File::create(payload_path(base))?);
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read back a manifest + payload pair.
pub fn import(base: &Path) -> Result<(ContainerManifest, Vec<f64>)> {
    let json = fs::read_to_string(manifest_path(base))
        .map_err(|e| Error::Container(format!("cannot read manifest for {}: {e}", base.display())))?;
    let manifest: ContainerManifest = serde_json::from_str(&json)?;
    if manifest.version != CONTAINER_VERSION {
        return Err(Error::Container(format!(
            "unsupported container version {} (expected {CONTAINER_VERSION})",
            manifest.version
        )));
    }
    if manifest.dtype != "f64le" {
        return Err(Error::Container(format!("unsupported dtype {}", manifest.dtype)));
    }
    let bytes = fs::read(payload_path(base))
        .map_err(|e| Error::Container(format!("cannot read payload for {}: {e}", base.display())))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Container("payload size is not a multiple of 8".into()));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let per_item: usize = manifest.item_shape.iter().product();
    if data.len() != per_item * manifest.count {
        return Err(Error::Container(format!(
            "payload has {} values but manifest declares {} x {per_item}",
            data.len(),
            manifest.count
        )));
    }
    Ok((manifest, data))
}

/// Archive a labeled image set.
pub fn export_images(
    base: &Path,
    set: &LabeledImages,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    let shape = set
        .images
        .first()
        .map(|img| {
            let (c, h, w) = img.shape();
            vec![c, h, w]
        })
        .ok_or(Error::EmptyBatch)?;
    let mut data = Vec::with_capacity(set.len() * shape.iter().product::<usize>());
    for img in &set.images {
        data.extend(img.pixels.iter().copied());
    }
    let manifest = ContainerManifest {
        version: CONTAINER_VERSION,
        kind: "images".into(),
        item_shape: shape,
        count: set.len(),
        class_ids: set.labels.clone(),
        dtype: "f64le".into(),
        meta,
    };
    export(base, &manifest, &data)
}

/// Restore a labeled image set archived by [`export_images`].
pub fn import_images(base: &Path) -> Result<(LabeledImages, ContainerManifest)> {
    let (manifest, data) = import(base)?;
    if manifest.kind != "images" {
        return Err(Error::Container(format!(
            "expected an images container, found kind {:?}",
            manifest.kind
        )));
    }
    if manifest.item_shape.len() != 3 {
        return Err(Error::Container("image containers need a rank-3 item shape".into()));
    }
    let (c, h, w) = (manifest.item_shape[0], manifest.item_shape[1], manifest.item_shape[2]);
    let per_item = c * h * w;
    let mut images = Vec::with_capacity(manifest.count);
    for (i, chunk) in data.chunks_exact(per_item).enumerate() {
        let pixels = Array3::from_shape_vec((c, h, w), chunk.to_vec())
            .map_err(|e| Error::Container(e.to_string()))?;
        images.push(ImageSample::new(pixels, i as u64, false)?);
    }
    let set = LabeledImages { images, labels: manifest.class_ids.clone() };
    Ok((set, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};

    #[test]
    fn image_container_round_trips_bit_exactly() {
        let cfg = DatasetConfig {
            num_classes: 3,
            train_classes: 2,
            samples_per_class: 4,
            image_shape: (1, 8, 8),
            ..DatasetConfig::default()
        };
        let d = generate_dataset(&cfg, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("train_set");
        let mut meta = BTreeMap::new();
        meta.insert("split_seed".to_string(), "21".to_string());
        export_images(&base, &d.train, meta).unwrap();

        let (back, manifest) = import_images(&base).unwrap();
        assert_eq!(manifest.count, d.train.len());
        assert_eq!(back.labels, d.train.labels);
        for (a, b) in back.images.iter().zip(&d.train.images) {
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn corrupt_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("missing");
        assert!(matches!(import(&base), Err(Error::Container(_))));
    }
}
