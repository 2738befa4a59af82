//! Linear probe (softmax regression over frozen embeddings) and the zero-shot classifier.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::seed;
use crate::store::{put_f32s, put_u32, to_u32, write_bytes, ClassTextEmbeddings, EmbeddingSet, Reader};
use crate::vecmath::{argmax, dot, log_sum_exp};

pub const PROBE_MAGIC: [u8; 4] = *b"RGBP";
pub const PROBE_VERSION: u32 = 1;

/// `logits = W·x + b`, with `W` stored row-major as `n_classes × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub n_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeModel {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        ProbeModel {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    pub fn quantize(&mut self) {
        for p in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            *p = f64::from(*p as f32);
        }
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.n_classes * self.dim || self.bias.len() != self.n_classes {
            return Err(Error::InvalidData("probe parameter shapes are inconsistent".into()));
        }
        if self
            .weights
            .iter()
            .chain(&self.bias)
            .any(|p| !p.is_finite())
        {
            return Err(Error::Numeric("probe parameters are not finite".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut out = Vec::new();
        out.extend_from_slice(&PROBE_MAGIC);
        put_u32(&mut out, PROBE_VERSION);
        put_u32(&mut out, to_u32(self.n_classes, "n_classes")?);
        put_u32(&mut out, to_u32(self.dim, "dim")?);
        let w: Vec<f32> = self.weights.iter().map(|&x| x as f32).collect();
        let b: Vec<f32> = self.bias.iter().map(|&x| x as f32).collect();
        put_f32s(&mut out, &w);
        put_f32s(&mut out, &b);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(PROBE_MAGIC)?;
        let version = r.u32("version")?;
        if version != PROBE_VERSION {
            return Err(Error::Version(version));
        }
        let n_classes = r.u32("n_classes")? as usize;
        let dim = r.u32("dim")? as usize;
        let n_weights = n_classes
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidData("probe size overflows".into()))?;
        let weights = r.f32s(n_weights, "weights")?;
        let bias = r.f32s(n_classes, "bias")?;
        r.finish()?;
        let model = ProbeModel {
            n_classes,
            dim,
            weights: weights.into_iter().map(f64::from).collect(),
            bias: bias.into_iter().map(f64::from).collect(),
        };
        model.check()?;
        Ok(model)
    }

    /// Writes an `RGBP` checkpoint (f32 parameters).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Keep the epoch with the best validation accuracy instead of the last one.
    pub select_on_val: bool,
    pub bias: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            batch_size: 512,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            select_on_val: true,
            bias: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "probe epochs and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProbeFit {
    /// Selected checkpoint (best validation accuracy, latest on ties, when enabled).
    pub model: ProbeModel,
    pub final_model: ProbeModel,
    /// Mean training cross-entropy after each epoch.
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<Option<f64>>,
    pub selected_epoch: usize,
}

fn mean_cross_entropy(model: &ProbeModel, rows: &[Vec<f64>], labels: &[u32]) -> f64 {
    let total: f64 = rows
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z = model.logits(x);
            log_sum_exp(&z) - z[y as usize]
        })
        .sum();
    total / rows.len() as f64
}

fn check_set(set: &EmbeddingSet, dim: usize, n_classes: usize) -> Result<()> {
    if set.dim != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            found: set.dim,
        });
    }
    set.validate_labels(n_classes)
}

/// Trains a linear probe with mini-batch AdamW on mean softmax cross-entropy.
pub fn train_probe(
    data: &EmbeddingSet,
    val: &EmbeddingSet,
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeFit> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("probe training set is empty".into()));
    }
    if n_classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    let dim = data.dim;
    check_set(data, dim, n_classes)?;
    check_set(val, dim, n_classes)?;

    let rows: Vec<Vec<f64>> = (0..data.count()).map(|i| data.row_f64(i)).collect();
    let mut model = ProbeModel::zeros(n_classes, dim);
    let n_w = n_classes * dim;
    let mut params = vec![0.0; n_w + n_classes];
    let mut opt = AdamW::new(params.len(), cfg.learning_rate, cfg.weight_decay);
    let mut rng = seed::rng(seed::derive(cfg.seed, "probe-shuffle"));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut grad = vec![0.0; params.len()];

    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_accuracy = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ProbeModel, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &rows[i];
                let z = model.logits(x);
                let lse = log_sum_exp(&z);
                let y = data.labels[i] as usize;
                for (k, &zk) in z.iter().enumerate() {
                    let coeff = ((zk - lse).exp() - if k == y { 1.0 } else { 0.0 }) * inv;
                    grad[k * dim..(k + 1) * dim]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, xv)| *g += coeff * xv);
                    if cfg.bias {
                        grad[n_w + k] += coeff;
                    }
                }
            }
            opt.step(&mut params, &grad);
            if !cfg.bias {
                params[n_w..].iter_mut().for_each(|b| *b = 0.0);
            }
            model.weights.copy_from_slice(&params[..n_w]);
            model.bias.copy_from_slice(&params[n_w..]);
        }
        model.check()?;
        train_loss.push(mean_cross_entropy(&model, &rows, &data.labels));
        let acc = if val.is_empty() {
            None
        } else {
            Some(probe_accuracy(&model, val)?)
        };
        val_accuracy.push(acc);
        if let Some(acc) = acc.filter(|_| cfg.select_on_val) {
            if best.as_ref().is_none_or(|b| acc >= b.2) {
                best = Some((model.clone(), epoch, acc));
            }
        }
    }

    let mut final_model = model;
    final_model.quantize();
    let (mut selected, selected_epoch) = match best {
        Some((m, e, _)) => (m, e),
        None => (final_model.clone(), cfg.epochs),
    };
    selected.quantize();
    Ok(ProbeFit {
        model: selected,
        final_model,
        train_loss,
        val_accuracy,
        selected_epoch,
    })
}

fn probe_accuracy(model: &ProbeModel, set: &EmbeddingSet) -> Result<f64> {
    let preds = predict(model, set)?;
    let correct = preds.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / set.count() as f64)
}

/// `argmax(W·x + b)` per row; ties go to the lower class index.
pub fn predict(model: &ProbeModel, set: &EmbeddingSet) -> Result<Vec<u32>> {
    if set.dim != model.dim {
        return Err(Error::DimMismatch {
            expected: model.dim,
            found: set.dim,
        });
    }
    Ok((0..set.count())
        .map(|i| argmax(&model.logits(&set.row_f64(i))) as u32)
        .collect())
}

/// Nearest class prompt by cosine similarity; ties go to the lower class index.
pub fn zero_shot_predict(class_text: &ClassTextEmbeddings, set: &EmbeddingSet) -> Result<Vec<u32>> {
    if set.dim != class_text.dim {
        return Err(Error::DimMismatch {
            expected: class_text.dim,
            found: set.dim,
        });
    }
    let anchors = class_text.rows_f64();
    Ok((0..set.count())
        .map(|i| {
            let x = set.row_f64(i);
            let sims: Vec<f64> = anchors.iter().map(|t| dot(t, &x)).collect();
            argmax(&sims) as u32
        })
        .collect())
}

/// Predictions as `index,label,prediction` CSV.
pub fn predictions_csv(labels: &[u32], predictions: &[u32]) -> String {
    let mut out = String::from("index,label,prediction\n");
    for (i, (y, p)) in labels.iter().zip(predictions).enumerate() {
        let _ = writeln!(out, "{i},{y},{p}");
    }
    out
}
