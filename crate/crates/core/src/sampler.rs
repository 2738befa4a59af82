//! Augmentation by sampling inside each training item's box.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxnet::{corners_from_raw, BoxNetModel, LatentBox};
use crate::error::{Error, Result};
use crate::seed;
use crate::store::{write_bytes, EmbeddingSet};
use crate::vecmath::normalized;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub samples_per_image: usize,
    pub seed: u64,
    /// Rescale every sample to unit norm. Sets built with this off are not valid
    /// embedding files and are meant for in-memory ablations only.
    pub renormalize_samples: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            samples_per_image: 5,
            seed: 0,
            renormalize_samples: true,
        }
    }
}

impl AugmentationConfig {
    /// Samples per image used for small (40), medium (5) and large (3) training sets.
    pub fn preset_samples(name: &str) -> Option<usize> {
        match name {
            "small" | "domainnet" => Some(40),
            "medium" | "cub" => Some(5),
            "large" | "cifar100" => Some(3),
            _ => None,
        }
    }
}

/// Draws `k` points coordinate-wise uniformly from the box, before any normalization.
/// Every returned point satisfies `lower[j] ≤ p[j] ≤ upper[j]`.
pub fn sample_raw(bx: &LatentBox, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            bx.lower
                .iter()
                .zip(&bx.upper)
                .map(|(&lo, &hi)| {
                    let u: f64 = rng.random();
                    (lo + u * (hi - lo)).clamp(lo, hi)
                })
                .collect()
        })
        .collect()
}

fn draw_one(bx: &LatentBox, rng: &mut impl Rng, renormalize: bool) -> Result<Vec<f64>> {
    for _ in 0..2 {
        let p = sample_raw(bx, 1, rng).pop().unwrap();
        if !renormalize {
            return Ok(p);
        }
        if let Some((u, _)) = normalized(&p) {
            return Ok(u);
        }
    }
    Err(Error::Numeric(
        "box sample was the zero vector twice in a row".into(),
    ))
}

/// Draws `k` uniform samples from the box and rescales each to unit norm.
pub fn sample_from_box(bx: &LatentBox, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = seed::rng(seed);
    (0..k).map(|_| draw_one(bx, &mut rng, true)).collect()
}

/// An augmented training set plus, for every row, the index of the row it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub set: EmbeddingSet,
    pub source_indices: Vec<usize>,
}

/// Sidecar describing how an augmented set was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationManifest {
    pub source_count: usize,
    pub output_count: usize,
    pub config: AugmentationConfig,
    pub source_indices: Vec<usize>,
}

impl AugmentedSet {
    pub fn manifest(&self, config: &AugmentationConfig) -> AugmentationManifest {
        let source_count = self.source_indices.len() / (1 + config.samples_per_image);
        AugmentationManifest {
            source_count,
            output_count: self.set.count(),
            config: *config,
            source_indices: self.source_indices.clone(),
        }
    }
}

pub fn write_manifest(manifest: &AugmentationManifest, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::InvalidData(format!("manifest serialization: {e}")))?;
    write_bytes(path.as_ref(), &json)
}

fn samples_for_item(
    train: &EmbeddingSet,
    model: &BoxNetModel,
    config: &AugmentationConfig,
    i: usize,
) -> Result<Vec<Vec<f64>>> {
    let (a, b) = model.forward(&train.row_f64(i))?;
    let bx = corners_from_raw(&a, &b)?;
    let mut rng = seed::rng(seed::derive_indexed(config.seed, "augment", i as u64));
    (0..config.samples_per_image)
        .map(|_| draw_one(&bx, &mut rng, config.renormalize_samples))
        .collect()
}

/// Original rows followed by `k` box samples per row, grouped by source index.
/// Each item draws from its own derived seed, so the result does not depend on
/// how the work is scheduled.
pub fn augment_dataset(
    train: &EmbeddingSet,
    model: &BoxNetModel,
    config: &AugmentationConfig,
) -> Result<AugmentedSet> {
    if train.dim != model.dim() {
        return Err(Error::DimMismatch {
            expected: model.dim(),
            found: train.dim,
        });
    }
    let n = train.count();
    let k = config.samples_per_image;
    let mut data = train.data.clone();
    let mut labels = train.labels.clone();
    let mut source_indices: Vec<usize> = (0..n).collect();
    if k == 0 {
        return Ok(AugmentedSet {
            set: train.clone(),
            source_indices,
        });
    }

    #[cfg(feature = "parallel")]
    let per_item: Vec<Result<Vec<Vec<f64>>>> = {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|i| samples_for_item(train, model, config, i))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_item: Vec<Result<Vec<Vec<f64>>>> = (0..n)
        .map(|i| samples_for_item(train, model, config, i))
        .collect();

    data.reserve(n * k * train.dim);
    for (i, samples) in per_item.into_iter().enumerate() {
        for s in samples? {
            data.extend(s.into_iter().map(|x| x as f32));
            labels.push(train.labels[i]);
            source_indices.push(i);
        }
    }
    let set = EmbeddingSet {
        dim: train.dim,
        data,
        labels,
    };
    if config.renormalize_samples {
        set.validate()?;
    }
    Ok(AugmentedSet {
        set,
        source_indices,
    })
}
