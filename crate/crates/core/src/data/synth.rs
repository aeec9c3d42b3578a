//! Deterministic synthetic dataset generation.
//!
//! Each class gets one anchor direction of length `margin`; every cue row of
//! a sample is its class anchor plus isotropic Gaussian noise. With a margin
//! comfortably above the noise scale the classes are linearly separable, so
//! end-to-end training has a known achievable target.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{save_bundle, FeatureBundle, Manifest, NUM_CLASSES};
use crate::error::Error;
use crate::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Feature width of every generated row.
    pub dim: usize,
    /// Scene rows per sample.
    pub scene_scales: usize,
    /// Split name and sample count, in generation order.
    pub splits: Vec<(String, usize)>,
    /// Inclusive face-count range per sample; minimum must be >= 1.
    pub faces: (usize, usize),
    /// Inclusive object-count range per sample; zero allowed.
    pub objects: (usize, usize),
    /// Distance of each class anchor from the origin.
    pub margin: f64,
    /// Standard deviation of the per-entry Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dim: 64,
            scene_scales: 4,
            splits: vec![("train".into(), 300), ("test".into(), 90)],
            faces: (1, 4),
            objects: (0, 3),
            margin: 5.0,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.scene_scales == 0 {
            return Err(Error::contract("synthetic spec: dim and scene_scales must be positive"));
        }
        if self.margin <= 0.0 {
            return Err(Error::contract("synthetic spec: margin must be positive"));
        }
        if self.noise < 0.0 {
            return Err(Error::contract("synthetic spec: noise must be nonnegative"));
        }
        if self.faces.0 < 1 || self.faces.0 > self.faces.1 {
            return Err(Error::contract("synthetic spec: face range must be 1 <= lo <= hi"));
        }
        if self.objects.0 > self.objects.1 {
            return Err(Error::contract("synthetic spec: object range must be lo <= hi"));
        }
        if self.splits.is_empty() || self.splits.iter().any(|(_, n)| *n == 0) {
            return Err(Error::contract("synthetic spec: every split needs at least one sample"));
        }
        Ok(())
    }
}

/// Per-class anchor directions: random unit vectors scaled by the margin,
/// redrawn (deterministically) if a pair lands too close.
pub fn class_anchors(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(NUM_CLASSES);
    while anchors.len() < NUM_CLASSES {
        let mut v: Vec<f64> = (0..spec.dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        for x in &mut v {
            *x *= spec.margin / norm;
        }
        let too_close = anchors.iter().any(|a| {
            let dot: f64 = a.iter().zip(&v).map(|(x, y)| x * y).sum();
            dot / (spec.margin * spec.margin) > 0.8
        });
        if !too_close {
            anchors.push(v);
        }
    }
    anchors
}

fn noisy_row(anchor: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    anchor
        .iter()
        .map(|&a| a + noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Generate every sample of the spec in memory, in file order. Labels cycle
/// 0, 1, 2 so each split is class-balanced up to rounding.
pub fn generate_bundles(spec: &SyntheticSpec) -> Result<Vec<(String, Vec<FeatureBundle>)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anchors = class_anchors(spec, &mut rng);
    let mut out = Vec::with_capacity(spec.splits.len());
    for (split, count) in &spec.splits {
        let mut bundles = Vec::with_capacity(*count);
        for idx in 0..*count {
            let label = (idx % NUM_CLASSES) as u8;
            let anchor = &anchors[label as usize];
            let n_faces = rng.gen_range(spec.faces.0..=spec.faces.1);
            let n_objects = rng.gen_range(spec.objects.0..=spec.objects.1);
            let bundle = FeatureBundle {
                id: format!("{split}_{idx:05}"),
                label,
                faces: (0..n_faces).map(|_| noisy_row(anchor, spec.noise, &mut rng)).collect(),
                objects: (0..n_objects).map(|_| noisy_row(anchor, spec.noise, &mut rng)).collect(),
                scenes: (0..spec.scene_scales)
                    .map(|_| noisy_row(anchor, spec.noise, &mut rng))
                    .collect(),
            };
            bundles.push(bundle);
        }
        out.push((split.clone(), bundles));
    }
    Ok(out)
}

/// Generate and write the dataset under `out_dir`: one JSON bundle per
/// sample in a per-split subdirectory, plus `manifest.json`.
pub fn generate_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    let splits = generate_bundles(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::default();
    for (split, bundles) in &splits {
        let split_dir = out_dir.join(split);
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        let mut files = Vec::with_capacity(bundles.len());
        for bundle in bundles {
            let rel = format!("{split}/{}.json", bundle.id);
            save_bundle(&out_dir.join(&rel), bundle)?;
            files.push(rel);
        }
        manifest.splits.insert(split.clone(), files);
    }
    let manifest_file = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_file, text).map_err(|e| Error::io(&manifest_file, e))?;
    Ok(manifest)
}
