//! On-disk formats and batching: feature bundles, dataset manifests, padded
//! batches with masks, lexicon files, synthetic data generation, and
//! checkpoints.

pub mod checkpoint;
pub mod lexicon;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

/// Class labels: 0 = positive, 1 = neutral, 2 = negative.
pub const NUM_CLASSES: usize = 3;

pub const LABEL_NAMES: [&str; NUM_CLASSES] = ["positive", "neutral", "negative"];

/// One sample's precomputed cue features. Faces and objects are sets of row
/// vectors; scenes hold exactly one row per pyramid scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub id: String,
    pub label: u8,
    pub faces: Vec<Vec<f64>>,
    pub objects: Vec<Vec<f64>>,
    pub scenes: Vec<Vec<f64>>,
}

impl FeatureBundle {
    /// Shared feature width, taken from the first face row.
    pub fn dim(&self) -> usize {
        self.faces.first().map_or(0, |r| r.len())
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.label as usize >= NUM_CLASSES {
            return Err(Error::validation(
                path,
                format!("label {} outside 0..=2", self.label),
            ));
        }
        if self.faces.is_empty() {
            return Err(Error::validation(path, "faces: at least one face row required"));
        }
        if self.scenes.is_empty() {
            return Err(Error::validation(path, "scenes: at least one scale required"));
        }
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::validation(path, "faces: zero-width feature rows"));
        }
        for (field, rows) in [
            ("faces", &self.faces),
            ("objects", &self.objects),
            ("scenes", &self.scenes),
        ] {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != dim {
                    return Err(Error::validation(
                        path,
                        format!("{field}[{i}]: width {} != {dim}", row.len()),
                    ));
                }
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::validation(
                        path,
                        format!("{field}[{i}][{j}]: non-finite value"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Load one bundle, JSON (canonical) or packed binary by file extension.
pub fn load_bundle(path: &Path) -> Result<FeatureBundle> {
    let bundle = if path.extension().is_some_and(|e| e == "bin") {
        load_bundle_binary(path)?
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?
    };
    bundle.validate(path)?;
    Ok(bundle)
}

pub fn save_bundle(path: &Path, bundle: &FeatureBundle) -> Result<()> {
    let text = serde_json::to_string(bundle).expect("bundle serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const BUNDLE_MAGIC: &[u8; 4] = b"GERB";

/// Packed binary form: magic, version, label, id, then length-prefixed
/// little-endian 32-bit float sections for faces, objects, and scenes.
pub fn save_bundle_binary(path: &Path, bundle: &FeatureBundle) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.push(bundle.label);
    let id_bytes = bundle.id.as_bytes();
    buf.extend_from_slice(&(id_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(id_bytes);
    buf.extend_from_slice(&(bundle.dim() as u32).to_le_bytes());
    for rows in [&bundle.faces, &bundle.objects, &bundle.scenes] {
        buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
        for row in rows.iter() {
            for &v in row {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn load_bundle_binary(path: &Path) -> Result<FeatureBundle> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::parse(path, format!("truncated at byte {at}")));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let u32_at = |at: &mut usize| -> Result<u32> {
        let s = take(at, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };
    if take(&mut at, 4)? != BUNDLE_MAGIC {
        return Err(Error::parse(path, "bad magic"));
    }
    let version = u32_at(&mut at)?;
    if version != 1 {
        return Err(Error::parse(path, format!("unsupported bundle version {version}")));
    }
    let label = take(&mut at, 1)?[0];
    let id_len = u32_at(&mut at)? as usize;
    let id = String::from_utf8(take(&mut at, id_len)?.to_vec())
        .map_err(|_| Error::parse(path, "id is not UTF-8"))?;
    let dim = u32_at(&mut at)? as usize;
    let mut sections: Vec<Vec<Vec<f64>>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let rows = u32_at(&mut at)? as usize;
        let mut section = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                let s = take(&mut at, 4)?;
                row.push(f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64);
            }
            section.push(row);
        }
        sections.push(section);
    }
    let scenes = sections.pop().unwrap();
    let objects = sections.pop().unwrap();
    let faces = sections.pop().unwrap();
    Ok(FeatureBundle { id, label, faces, objects, scenes })
}

/// Dataset manifest: split name to bundle paths, relative to the manifest's
/// own directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub splits: BTreeMap<String, Vec<String>>,
}

/// Resolve a `--data` argument: a manifest file directly, or a directory
/// containing `manifest.json`.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

pub fn load_manifest(data: &Path) -> Result<(Manifest, PathBuf)> {
    let path = manifest_path(data);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, base))
}

pub fn load_split(manifest: &Manifest, base: &Path, split: &str) -> Result<Vec<FeatureBundle>> {
    let files = manifest.splits.get(split).ok_or_else(|| {
        Error::validation(
            base.join("manifest.json"),
            format!(
                "split '{split}' not present (available: {})",
                manifest.splits.keys().cloned().collect::<Vec<_>>().join(", ")
            ),
        )
    })?;
    files.iter().map(|rel| load_bundle(&base.join(rel))).collect()
}

/// A collated batch: faces and objects padded to the batch maxima with
/// zero-filled rows, masks marking exactly the real rows valid.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub n: usize,
    pub dim: usize,
    pub scene_scales: usize,
    pub max_faces: usize,
    pub max_objects: usize,
    /// `n * max_faces * dim`, row-major per sample.
    pub faces: Vec<S>,
    /// `n * max_faces`; true marks a real face row.
    pub face_mask: Vec<bool>,
    pub objects: Vec<S>,
    pub object_mask: Vec<bool>,
    /// `n * scene_scales * dim`.
    pub scenes: Vec<S>,
    pub labels: Vec<u8>,
    pub face_counts: Vec<usize>,
    pub object_counts: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn faces_of(&self, i: usize) -> &[S] {
        let stride = self.max_faces * self.dim;
        &self.faces[i * stride..(i + 1) * stride]
    }

    pub fn face_mask_of(&self, i: usize) -> &[bool] {
        &self.face_mask[i * self.max_faces..(i + 1) * self.max_faces]
    }

    pub fn objects_of(&self, i: usize) -> &[S] {
        let stride = self.max_objects * self.dim;
        &self.objects[i * stride..(i + 1) * stride]
    }

    pub fn object_mask_of(&self, i: usize) -> &[bool] {
        &self.object_mask[i * self.max_objects..(i + 1) * self.max_objects]
    }

    pub fn scenes_of(&self, i: usize) -> &[S] {
        let stride = self.scene_scales * self.dim;
        &self.scenes[i * stride..(i + 1) * stride]
    }
}

/// Stack bundles into one padded batch. All bundles must agree on feature
/// width, and each must carry exactly `scene_scales` scene rows.
pub fn collate<S: Scalar>(bundles: &[FeatureBundle], scene_scales: usize) -> Result<Batch<S>> {
    if bundles.is_empty() {
        return Err(Error::contract("collate: empty batch"));
    }
    let dim = bundles[0].dim();
    for b in bundles {
        if b.dim() != dim {
            return Err(Error::contract(format!(
                "collate: bundle '{}' width {} != {dim}",
                b.id,
                b.dim()
            )));
        }
        if b.scenes.len() != scene_scales {
            return Err(Error::contract(format!(
                "collate: bundle '{}' has {} scene scales, config expects {scene_scales}",
                b.id,
                b.scenes.len()
            )));
        }
    }
    let n = bundles.len();
    let max_faces = bundles.iter().map(|b| b.faces.len()).max().unwrap();
    let max_objects = bundles.iter().map(|b| b.objects.len()).max().unwrap();

    let mut batch = Batch {
        n,
        dim,
        scene_scales,
        max_faces,
        max_objects,
        faces: vec![S::zero(); n * max_faces * dim],
        face_mask: vec![false; n * max_faces],
        objects: vec![S::zero(); n * max_objects * dim],
        object_mask: vec![false; n * max_objects],
        scenes: vec![S::zero(); n * scene_scales * dim],
        labels: Vec::with_capacity(n),
        face_counts: Vec::with_capacity(n),
        object_counts: Vec::with_capacity(n),
    };
    for (i, b) in bundles.iter().enumerate() {
        batch.labels.push(b.label);
        batch.face_counts.push(b.faces.len());
        batch.object_counts.push(b.objects.len());
        for (r, row) in b.faces.iter().enumerate() {
            let at = (i * max_faces + r) * dim;
            for (j, &v) in row.iter().enumerate() {
                batch.faces[at + j] = S::of(v);
            }
            batch.face_mask[i * max_faces + r] = true;
        }
        for (r, row) in b.objects.iter().enumerate() {
            let at = (i * max_objects + r) * dim;
            for (j, &v) in row.iter().enumerate() {
                batch.objects[at + j] = S::of(v);
            }
            batch.object_mask[i * max_objects + r] = true;
        }
        for (r, row) in b.scenes.iter().enumerate() {
            let at = (i * scene_scales + r) * dim;
            for (j, &v) in row.iter().enumerate() {
                batch.scenes[at + j] = S::of(v);
            }
        }
    }
    Ok(batch)
}
