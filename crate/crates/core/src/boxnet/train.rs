use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::boxnet::geometry::OrderedCorners;
use crate::boxnet::loss::{consistency_points, evaluate, Batch, LossConfig, TextAnchors};
use crate::boxnet::model::{Activation, BoxNetModel};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::seed;
use crate::store::EmbeddingSet;
use crate::vecmath::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Hidden layer widths; `None` means one hidden layer as wide as the input.
    pub hidden: Option<Vec<usize>>,
    pub activation: Activation,
    pub temperature: f64,
    pub raw_midpoint: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            alpha: 0.5,
            epochs: 100,
            batch_size: 512,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            hidden: None,
            activation: Activation::Softplus,
            temperature: 1.0,
            raw_midpoint: false,
        }
    }
}

impl Stage1Config {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            temperature: self.temperature,
            raw_midpoint: self.raw_midpoint,
        }
    }

    pub fn layer_dims(&self, dim: usize) -> Vec<usize> {
        match &self.hidden {
            Some(h) => BoxNetModel::layer_dims_for(dim, h),
            None => BoxNetModel::layer_dims_for(dim, &[dim]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss().validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
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

/// Losses (per-item means over the training set) and accuracies after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub box_volume: f64,
    /// Mean of the three class consistency terms.
    pub class_consistency: f64,
    /// Fraction of training items whose corners and midpoint all classify correctly.
    pub corner_accuracy: f64,
    pub val_corner_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// State before the first update.
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose model was retained (1-based; 0 means the initial model).
    pub selected_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    /// Checkpoint with the best validation corner accuracy (latest epoch on ties).
    pub model: BoxNetModel,
    pub final_model: BoxNetModel,
    pub trace: TrainTrace,
}

/// Fraction of items whose lower corner, upper corner and midpoint are all
/// zero-shot classified as the item's label.
pub fn corner_accuracy(
    model: &BoxNetModel,
    set: &EmbeddingSet,
    anchors: &TextAnchors,
    raw_midpoint: bool,
) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for i in 0..set.count() {
        let (a, b) = model.forward(&set.row_f64(i))?;
        let corners = OrderedCorners::new(&a, &b)?;
        let pts = consistency_points(&corners, raw_midpoint)?;
        let y = set.labels[i] as usize;
        if [&pts.lower.0, &pts.upper.0, &pts.mid.0]
            .iter()
            .all(|p| argmax(&anchors.similarities(p)) == y)
        {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.count() as f64)
}

fn record(
    epoch: usize,
    model: &BoxNetModel,
    train: &EmbeddingSet,
    whole: &Batch,
    val: &EmbeddingSet,
    anchors: &TextAnchors,
    cfg: &Stage1Config,
) -> Result<EpochRecord> {
    let (loss, _) = evaluate(model, whole, anchors, &cfg.loss(), false)?;
    let n = train.count() as f64;
    Ok(EpochRecord {
        epoch,
        total: loss.total / n,
        box_volume: loss.parts.box_volume / n,
        class_consistency: loss.parts.cc_mean() / n,
        corner_accuracy: corner_accuracy(model, train, anchors, cfg.raw_midpoint)?,
        val_corner_accuracy: if val.is_empty() {
            None
        } else {
            Some(corner_accuracy(model, val, anchors, cfg.raw_midpoint)?)
        },
    })
}

/// Trains the box network with mini-batch AdamW on the combined objective.
pub fn train_stage1(
    train: &EmbeddingSet,
    val: &EmbeddingSet,
    anchors: &TextAnchors,
    cfg: &Stage1Config,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for set in [train, val] {
        if set.dim != anchors.dim() {
            return Err(Error::DimMismatch {
                expected: anchors.dim(),
                found: set.dim,
            });
        }
    }
    let dim = train.dim;
    let mut model = BoxNetModel::init(
        cfg.layer_dims(dim),
        cfg.activation,
        seed::derive(cfg.seed, "boxnet-init"),
    )?;
    let mut opt = AdamW::new(model.n_params(), cfg.learning_rate, cfg.weight_decay);
    let mut shuffle_rng = seed::rng(seed::derive(cfg.seed, "boxnet-shuffle"));
    let loss_cfg = cfg.loss();
    let whole = Batch::whole(train);

    let initial = record(0, &model, train, &whole, val, anchors, cfg)?;
    let mut best = (model.clone(), 0usize, initial.val_corner_accuracy);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.count()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_set(train, chunk);
            let (_, grad) = evaluate(&model, &batch, anchors, &loss_cfg, true)?;
            opt.step(&mut model.params, &grad.expect("gradient requested"));
        }
        let rec = record(epoch, &model, train, &whole, val, anchors, cfg)?;
        log::debug!(
            "stage1 epoch {epoch}: total {:.5} bv {:.5} cc {:.5} acc {:.4}",
            rec.total,
            rec.box_volume,
            rec.class_consistency,
            rec.corner_accuracy
        );
        // later epochs win ties so a saturated accuracy keeps the most-trained box
        let better = match (rec.val_corner_accuracy, best.2) {
            (Some(v), Some(b)) => v >= b,
            _ => true,
        };
        if better {
            best = (model.clone(), epoch, rec.val_corner_accuracy);
        }
        epochs.push(rec);
    }

    let mut selected = best.0;
    selected.quantize();
    let mut final_model = model;
    final_model.quantize();
    Ok(Stage1Outcome {
        model: selected,
        final_model,
        trace: TrainTrace {
            initial,
            epochs,
            selected_epoch: best.1,
        },
    })
}
