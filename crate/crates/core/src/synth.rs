//! Labelled hypersphere-cluster datasets with a controllable domain shift.
//!
//! Samples are drawn as `normalize(mean_c + sigma_c * g + shift)` with `g` standard
//! Gaussian. This is not a von Mises–Fisher draw; tests must not assume vMF densities.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::store::{ClassTextEmbeddings, DatasetBundle, EmbeddingSet};
use crate::vecmath::{dot, normalized};

/// How class means are placed on the sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MeanLayout {
    /// Gram–Schmidt over seeded Gaussian vectors; requires `dim >= n_classes`.
    #[default]
    Orthogonal,
    /// Independent uniformly random directions.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub n_classes: usize,
    pub per_class: usize,
    pub spread_sigma: f64,
    /// Per-class override of `spread_sigma`.
    pub class_sigmas: Option<Vec<f64>>,
    /// Added to every sample before normalization; empty means no shift.
    pub domain_shift: Vec<f64>,
    pub layout: MeanLayout,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(dim: usize, n_classes: usize, per_class: usize, spread_sigma: f64, seed: u64) -> Self {
        SyntheticSpec {
            dim,
            n_classes,
            per_class,
            spread_sigma,
            class_sigmas: None,
            domain_shift: Vec::new(),
            layout: MeanLayout::Orthogonal,
            seed,
        }
    }

    pub fn sigma(&self, class: usize) -> f64 {
        self.class_sigmas
            .as_ref()
            .map_or(self.spread_sigma, |s| s[class])
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_classes == 0 {
            return Err(Error::InvalidArgument(
                "dim and class count must be positive".into(),
            ));
        }
        if self.per_class == 0 {
            return Err(Error::InvalidArgument("per_class must be at least 1".into()));
        }
        if let Some(sigmas) = &self.class_sigmas {
            if sigmas.len() != self.n_classes {
                return Err(Error::InvalidArgument(format!(
                    "{} class sigmas given for {} classes",
                    sigmas.len(),
                    self.n_classes
                )));
            }
        }
        for c in 0..self.n_classes {
            let s = self.sigma(c);
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "spread sigma {s} for class {c} must be finite and non-negative"
                )));
            }
        }
        if !self.domain_shift.is_empty() && self.domain_shift.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: self.domain_shift.len(),
            });
        }
        if self.layout == MeanLayout::Orthogonal && self.dim < self.n_classes {
            return Err(Error::InvalidArgument(format!(
                "cannot place {} orthogonal class means in {} dimensions",
                self.n_classes, self.dim
            )));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gram–Schmidt step: removes the components of `v` along each of the unit `basis` vectors.
fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    for b in basis {
        let p = dot(&v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
    v
}

/// Draws the class means for a spec (depends only on `dim`, `n_classes`, `layout`, `seed`).
pub fn class_means(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(spec.seed, "means"));
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    while means.len() < spec.n_classes {
        let raw = gaussian_vec(&mut rng, spec.dim);
        let v = match spec.layout {
            MeanLayout::Orthogonal => orthogonalize(orthogonalize(raw, &means), &means),
            MeanLayout::Random => raw,
        };
        let Some((unit, len)) = normalized(&v) else {
            continue;
        };
        if len < 1e-6 {
            continue;
        }
        if means.iter().any(|m| dot(m, &unit) > 1.0 - 1e-9) {
            continue;
        }
        means.push(unit);
    }
    Ok(means)
}

fn unit_f32(v: &[f64], row: usize) -> Result<Vec<f32>> {
    let (u, _) = normalized(v).ok_or(Error::ZeroRow(row))?;
    Ok(u.into_iter().map(|x| x as f32).collect())
}

fn class_table(means: &[Vec<f64>]) -> Result<ClassTextEmbeddings> {
    let dim = means[0].len();
    let mut data = Vec::with_capacity(means.len() * dim);
    for (c, m) in means.iter().enumerate() {
        data.extend(unit_f32(m, c)?);
    }
    let names = (0..means.len()).map(|c| format!("class_{c}")).collect();
    ClassTextEmbeddings::new(dim, data, names)
}

/// Samples `per_class` rows per class, grouped by class in index order.
fn sample_clusters(
    means: &[Vec<f64>],
    sigmas: &[f64],
    per_class: usize,
    shift: &[f64],
    seed: u64,
) -> Result<EmbeddingSet> {
    let dim = means[0].len();
    let mut rng = seed::rng(seed);
    let mut data = Vec::with_capacity(means.len() * per_class * dim);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (c, (mean, &sigma)) in means.iter().zip(sigmas).enumerate() {
        for _ in 0..per_class {
            let mut v = mean.clone();
            if sigma > 0.0 {
                for x in v.iter_mut() {
                    *x += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            if !shift.is_empty() {
                v.iter_mut().zip(shift).for_each(|(x, s)| *x += s);
            }
            data.extend(unit_f32(&v, labels.len())?);
            labels.push(c as u32);
        }
    }
    EmbeddingSet::new(dim, data, labels)
}

/// Generates one labelled set plus a class-text table whose rows are the class means.
pub fn generate(spec: &SyntheticSpec) -> Result<(EmbeddingSet, ClassTextEmbeddings)> {
    let means = class_means(spec)?;
    let sigmas: Vec<f64> = (0..spec.n_classes).map(|c| spec.sigma(c)).collect();
    let set = sample_clusters(
        &means,
        &sigmas,
        spec.per_class,
        &spec.domain_shift,
        seed::derive(spec.seed, "samples"),
    )?;
    Ok((set, class_table(&means)?))
}

/// Replaces each row by `normalize(row + shift)`; labels are unchanged.
pub fn shift_domain(set: &EmbeddingSet, shift: &[f64]) -> Result<EmbeddingSet> {
    if shift.len() != set.dim {
        return Err(Error::DimMismatch {
            expected: set.dim,
            found: shift.len(),
        });
    }
    if shift.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("shift must be finite".into()));
    }
    let mut data = Vec::with_capacity(set.data.len());
    for i in 0..set.count() {
        let v: Vec<f64> = set
            .row(i)
            .iter()
            .zip(shift)
            .map(|(&x, s)| f64::from(x) + s)
            .collect();
        let (u, len) = normalized(&v).ok_or(Error::ZeroRow(i))?;
        if len < 1e-12 {
            return Err(Error::ZeroRow(i));
        }
        data.extend(u.into_iter().map(|x| x as f32));
    }
    EmbeddingSet::new(set.dim, data, set.labels.clone())
}

/// A unit direction orthogonal to every class mean (when `dim > n_classes`),
/// used as the style axis of the held-out domain.
pub fn shift_direction(means: &[Vec<f64>], seed: u64) -> Vec<f64> {
    let dim = means[0].len();
    let mut rng = seed::rng(seed::derive(seed, "shift"));
    loop {
        let raw = gaussian_vec(&mut rng, dim);
        let v = if dim > means.len() {
            orthogonalize(orthogonalize(raw, means), means)
        } else {
            raw
        };
        if let Some((u, len)) = normalized(&v) {
            if len > 1e-6 {
                return u;
            }
        }
    }
}

/// Parameters for a full synthetic train/val/test bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub base: SyntheticSpec,
    /// Rows per class in the validation and each test split.
    pub eval_per_class: usize,
    /// Magnitude of the held-out domain's shift; `None` omits the out-of-domain test set.
    pub shift_magnitude: Option<f64>,
}

/// Generates train/val/in-domain test splits (and a shifted out-of-domain test split)
/// that share one set of class means.
pub fn generate_bundle(spec: &BundleSpec) -> Result<DatasetBundle> {
    let base = &spec.base;
    if spec.eval_per_class == 0 {
        return Err(Error::InvalidArgument(
            "eval_per_class must be at least 1".into(),
        ));
    }
    let means = class_means(base)?;
    let sigmas: Vec<f64> = (0..base.n_classes).map(|c| base.sigma(c)).collect();
    let split = |tag: &str, per_class: usize| {
        sample_clusters(
            &means,
            &sigmas,
            per_class,
            &base.domain_shift,
            seed::derive(base.seed, tag),
        )
    };
    let test_out_domain = match spec.shift_magnitude {
        Some(magnitude) => {
            let dir = shift_direction(&means, base.seed);
            let shift: Vec<f64> = dir.iter().map(|x| x * magnitude).collect();
            Some(shift_domain(&split("test_out", spec.eval_per_class)?, &shift)?)
        }
        None => None,
    };
    let bundle = DatasetBundle {
        train: split("train", base.per_class)?,
        val: split("val", spec.eval_per_class)?,
        test_in_domain: split("test_in", spec.eval_per_class)?,
        test_out_domain,
        class_text: class_table(&means)?,
    };
    bundle.validate()?;
    Ok(bundle)
}
