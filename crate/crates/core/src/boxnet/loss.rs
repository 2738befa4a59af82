//! Box volume and class consistency losses, their combination, and the analytic
//! gradient of the combined objective with respect to the network parameters.
//!
//! For one item with normalized raw corners `â`, `b̂` and ordered corners
//! `lower = min(â, b̂)`, `upper = max(â, b̂)`:
//!
//! ```text
//! L_BV  = â · b̂                     (equal to lower · upper coordinate by coordinate)
//! L_CC⁻ = CE(softmax(T·ŝ(lower)/τ), y)
//! L_CC⁺ = CE(softmax(T·ŝ(upper)/τ), y)
//! L_CCm = CE(softmax(T·ŝ((lower+upper)/2)/τ), y)
//! total = (1−α)·ΣL_BV + α·(ΣL_CC⁻ + ΣL_CC⁺ + ΣL_CCm)/3
//! ```
//!
//! where `ŝ` rescales to unit norm (the midpoint's rescaling can be disabled) and the
//! sums run over the batch.

use serde::{Deserialize, Serialize};

use crate::boxnet::geometry::OrderedCorners;
use crate::boxnet::model::BoxNetModel;
use crate::error::{Error, Result};
use crate::store::{ClassTextEmbeddings, EmbeddingSet};
use crate::vecmath::{dot, log_sum_exp, normalize_backward, normalized};

/// Items per accumulation chunk. Chunk boundaries are fixed so the summation order,
/// and therefore every bit of the result, does not depend on the worker count.
const CHUNK: usize = 32;

/// Class-text rows in f64, renormalized to exact unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAnchors {
    rows: Vec<Vec<f64>>,
}

impl TextAnchors {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidData("no class anchors".into()));
        }
        let dim = rows[0].len();
        let rows = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if r.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        found: r.len(),
                    });
                }
                normalized(r).map(|(u, _)| u).ok_or(Error::ZeroRow(i))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TextAnchors { rows })
    }

    pub fn n_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Cosine similarities of a unit vector with every anchor.
    pub fn similarities(&self, point: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|t| dot(t, point)).collect()
    }
}

impl From<&ClassTextEmbeddings> for TextAnchors {
    fn from(table: &ClassTextEmbeddings) -> Self {
        TextAnchors {
            rows: table.rows_f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the class consistency terms; `1 − alpha` weighs the box volume term.
    pub alpha: f64,
    /// Softmax temperature applied to cosine logits.
    pub temperature: f64,
    /// Use the midpoint `(lower + upper)/2` as-is instead of rescaling it to unit norm.
    pub raw_midpoint: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            temperature: 1.0,
            raw_midpoint: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} is outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Batch sums of the four loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub box_volume: f64,
    pub cc_lower: f64,
    pub cc_upper: f64,
    pub cc_mid: f64,
}

impl LossParts {
    pub fn cc_mean(&self) -> f64 {
        (self.cc_lower + self.cc_upper + self.cc_mid) / 3.0
    }

    pub fn total(&self, alpha: f64) -> f64 {
        (1.0 - alpha) * self.box_volume + alpha * self.cc_mean()
    }

    fn add(&mut self, other: &LossParts) {
        self.box_volume += other.box_volume;
        self.cc_lower += other.cc_lower;
        self.cc_upper += other.cc_upper;
        self.cc_mid += other.cc_mid;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedLoss {
    pub total: f64,
    pub parts: LossParts,
}

/// Inputs and labels of a mini-batch, widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn from_set(set: &EmbeddingSet, indices: &[usize]) -> Self {
        Batch {
            inputs: indices.iter().map(|&i| set.row_f64(i)).collect(),
            labels: indices.iter().map(|&i| set.labels[i]).collect(),
        }
    }

    pub fn whole(set: &EmbeddingSet) -> Self {
        let all: Vec<usize> = (0..set.count()).collect();
        Self::from_set(set, &all)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sum over items of the inner product of each unit-norm corner pair.
pub fn box_volume_loss(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (lo, hi)) in pairs.iter().enumerate() {
        for corner in [lo, hi] {
            let n = corner.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::NotUnitNorm {
                    row: i,
                    norm: n,
                    tol: 1e-6,
                });
            }
        }
        if lo.len() != hi.len() {
            return Err(Error::DimMismatch {
                expected: lo.len(),
                found: hi.len(),
            });
        }
        total += dot(lo, hi);
    }
    Ok(total)
}

/// Cross-entropy of `softmax(T·point/τ)` against `label`, and its gradient w.r.t. `point`.
fn cross_entropy(
    point: &[f64],
    label: u32,
    anchors: &TextAnchors,
    temperature: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let y = label as usize;
    if y >= anchors.n_classes() {
        return Err(Error::LabelOutOfRange {
            row: 0,
            label,
            n_classes: anchors.n_classes(),
        });
    }
    let logits: Vec<f64> = anchors
        .similarities(point)
        .into_iter()
        .map(|s| s / temperature)
        .collect();
    let lse = log_sum_exp(&logits);
    let ce = lse - logits[y];
    if !want_grad {
        return Ok((ce, None));
    }
    let mut grad = vec![0.0; point.len()];
    for (k, (t, &z)) in anchors.rows().iter().zip(&logits).enumerate() {
        let coeff = ((z - lse).exp() - if k == y { 1.0 } else { 0.0 }) / temperature;
        grad.iter_mut().zip(t).for_each(|(g, tk)| *g += coeff * tk);
    }
    Ok((ce, Some(grad)))
}

/// Sum over items of the softmax cross-entropy of cosine logits against the true class.
pub fn class_consistency_loss(
    points: &[Vec<f64>],
    labels: &[u32],
    anchors: &TextAnchors,
    temperature: f64,
) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, (p, &y)) in points.iter().zip(labels).enumerate() {
        let (ce, _) = cross_entropy(p, y, anchors, temperature, false).map_err(|e| match e {
            Error::LabelOutOfRange {
                label, n_classes, ..
            } => Error::LabelOutOfRange {
                row,
                label,
                n_classes,
            },
            other => other,
        })?;
        total += ce;
    }
    Ok(total)
}

/// The three points whose class is enforced: both ordered corners and the midpoint.
pub struct ConsistencyPoints {
    pub lower: (Vec<f64>, f64),
    pub upper: (Vec<f64>, f64),
    /// Midpoint as fed to the similarity, and the norm it was divided by (1 when raw).
    pub mid: (Vec<f64>, f64),
}

pub fn consistency_points(corners: &OrderedCorners, raw_midpoint: bool) -> Result<ConsistencyPoints> {
    let bx = &corners.bounds;
    let lower = normalized(&bx.lower).ok_or_else(|| Error::Numeric("lower corner is zero".into()))?;
    let upper = normalized(&bx.upper).ok_or_else(|| Error::Numeric("upper corner is zero".into()))?;
    let mid_raw: Vec<f64> = bx
        .lower
        .iter()
        .zip(&bx.upper)
        .map(|(l, u)| 0.5 * (l + u))
        .collect();
    let mid = if raw_midpoint {
        (mid_raw, 1.0)
    } else {
        normalized(&mid_raw).ok_or_else(|| Error::Numeric("box midpoint is zero".into()))?
    };
    Ok(ConsistencyPoints { lower, upper, mid })
}

/// Loss terms for one item; adds `∂total/∂params` into `grad` when given.
fn item_terms(
    model: &BoxNetModel,
    x: &[f64],
    label: u32,
    anchors: &TextAnchors,
    cfg: &LossConfig,
    grad: Option<&mut [f64]>,
) -> Result<LossParts> {
    let d = model.dim();
    let cache = model.forward_cached(x)?;
    let (a, b) = cache.output().split_at(d);
    let corners = OrderedCorners::new(a, b)?;
    let pts = consistency_points(&corners, cfg.raw_midpoint)?;
    let want = grad.is_some();
    let tau = cfg.temperature;
    let (cc_lower, g_lo) = cross_entropy(&pts.lower.0, label, anchors, tau, want)?;
    let (cc_upper, g_up) = cross_entropy(&pts.upper.0, label, anchors, tau, want)?;
    let (cc_mid, g_mid) = cross_entropy(&pts.mid.0, label, anchors, tau, want)?;
    let parts = LossParts {
        box_volume: dot(&corners.a_hat, &corners.b_hat),
        cc_lower,
        cc_upper,
        cc_mid,
    };
    let Some(grad) = grad else {
        return Ok(parts);
    };

    let w_cc = cfg.alpha / 3.0;
    let w_bv = 1.0 - cfg.alpha;
    let scale = |g: Vec<f64>| -> Vec<f64> { g.into_iter().map(|v| v * w_cc).collect() };
    let g_mid_point = scale(g_mid.unwrap());
    let g_mid_raw = if cfg.raw_midpoint {
        g_mid_point
    } else {
        normalize_backward(&pts.mid.0, pts.mid.1, &g_mid_point)
    };
    let mut g_lower = normalize_backward(&pts.lower.0, pts.lower.1, &scale(g_lo.unwrap()));
    let mut g_upper = normalize_backward(&pts.upper.0, pts.upper.1, &scale(g_up.unwrap()));
    for j in 0..d {
        g_lower[j] += 0.5 * g_mid_raw[j];
        g_upper[j] += 0.5 * g_mid_raw[j];
    }

    let mut g_a_hat: Vec<f64> = corners.b_hat.iter().map(|v| w_bv * v).collect();
    let mut g_b_hat: Vec<f64> = corners.a_hat.iter().map(|v| w_bv * v).collect();
    for j in 0..d {
        if corners.lower_from_a[j] {
            g_a_hat[j] += g_lower[j];
        } else {
            g_b_hat[j] += g_lower[j];
        }
        if corners.upper_from_a[j] {
            g_a_hat[j] += g_upper[j];
        } else {
            g_b_hat[j] += g_upper[j];
        }
    }
    let mut g_out = normalize_backward(&corners.a_hat, corners.a_len, &g_a_hat);
    g_out.extend(normalize_backward(&corners.b_hat, corners.b_len, &g_b_hat));
    if g_out.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    model.backward_into(&cache, &g_out, grad);
    Ok(parts)
}

fn check_batch(batch: &Batch, model: &BoxNetModel, anchors: &TextAnchors) -> Result<()> {
    if anchors.dim() != model.dim() {
        return Err(Error::DimMismatch {
            expected: model.dim(),
            found: anchors.dim(),
        });
    }
    if batch.inputs.len() != batch.labels.len() {
        return Err(Error::InvalidArgument("batch inputs and labels differ in length".into()));
    }
    for (row, (x, &label)) in batch.inputs.iter().zip(&batch.labels).enumerate() {
        if x.len() != model.dim() {
            return Err(Error::DimMismatch {
                expected: model.dim(),
                found: x.len(),
            });
        }
        if label as usize >= anchors.n_classes() {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                n_classes: anchors.n_classes(),
            });
        }
    }
    Ok(())
}

fn chunk_terms(
    model: &BoxNetModel,
    batch: &Batch,
    range: std::ops::Range<usize>,
    anchors: &TextAnchors,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    let mut parts = LossParts::default();
    let mut grad = want_grad.then(|| vec![0.0; model.n_params()]);
    for i in range {
        let item = item_terms(
            model,
            &batch.inputs[i],
            batch.labels[i],
            anchors,
            cfg,
            grad.as_deref_mut(),
        )?;
        parts.add(&item);
    }
    Ok((parts, grad))
}

/// Evaluates the batch loss and optionally its gradient.
pub fn evaluate(
    model: &BoxNetModel,
    batch: &Batch,
    anchors: &TextAnchors,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(CombinedLoss, Option<Vec<f64>>)> {
    cfg.validate()?;
    check_batch(batch, model, anchors)?;
    let ranges: Vec<_> = (0..batch.len())
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(batch.len()))
        .collect();

    #[cfg(feature = "parallel")]
    let chunks: Vec<Result<(LossParts, Option<Vec<f64>>)>> = {
        use rayon::prelude::*;
        ranges
            .into_par_iter()
            .map(|r| chunk_terms(model, batch, r, anchors, cfg, want_grad))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chunks: Vec<Result<(LossParts, Option<Vec<f64>>)>> = ranges
        .into_iter()
        .map(|r| chunk_terms(model, batch, r, anchors, cfg, want_grad))
        .collect();

    let mut parts = LossParts::default();
    let mut grad = want_grad.then(|| vec![0.0; model.n_params()]);
    for chunk in chunks {
        let (p, g) = chunk?;
        parts.add(&p);
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((
        CombinedLoss {
            total: parts.total(cfg.alpha),
            parts,
        },
        grad,
    ))
}

/// `total = (1−α)·L_BV + α·(L_CC⁻ + L_CC⁺ + L_CCm)/3` over the batch.
pub fn combined_loss(
    batch: &Batch,
    model: &BoxNetModel,
    anchors: &TextAnchors,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    Ok(evaluate(model, batch, anchors, cfg, false)?.0)
}

/// Analytic gradient of [`combined_loss`] w.r.t. every model parameter.
pub fn backward(
    batch: &Batch,
    model: &BoxNetModel,
    anchors: &TextAnchors,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    Ok(evaluate(model, batch, anchors, cfg, true)?
        .1
        .expect("gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn box_volume_oracles() {
        assert_eq!(box_volume_loss(&[(e(3, 0), e(3, 0))]).unwrap(), 1.0);
        let neg: Vec<f64> = e(3, 0).iter().map(|x| -x).collect();
        assert_eq!(box_volume_loss(&[(e(3, 0), neg)]).unwrap(), -1.0);
        assert_eq!(
            box_volume_loss(&[(e(3, 0), e(3, 1)), (e(3, 2), e(3, 1))]).unwrap(),
            0.0
        );
    }

    #[test]
    fn box_volume_rejects_non_unit_corner() {
        assert!(box_volume_loss(&[(vec![0.5, 0.0], e(2, 0))]).is_err());
    }

    #[test]
    fn cross_entropy_oracles() {
        let two = TextAnchors::new(vec![e(3, 0), e(3, 1)]).unwrap();
        // logits (1, 0): −ln(e/(e+1)) = ln(1 + e⁻¹)
        let ce = class_consistency_loss(&[e(3, 0)], &[0], &two, 1.0).unwrap();
        assert!((ce - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((ce - 0.3133).abs() < 1e-4);
        let ce = class_consistency_loss(&[e(3, 2)], &[1], &two, 1.0).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        let three = TextAnchors::new(vec![e(4, 0), e(4, 1), e(4, 2)]).unwrap();
        let ce = class_consistency_loss(&[e(4, 3)], &[2], &three, 1.0).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_reported_with_row() {
        let two = TextAnchors::new(vec![e(2, 0), e(2, 1)]).unwrap();
        let err = class_consistency_loss(&[e(2, 0), e(2, 1)], &[0, 5], &two, 1.0).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { row: 1, label: 5, .. }));
    }

    #[test]
    fn mixing_arithmetic() {
        let parts = LossParts {
            box_volume: 1.0,
            cc_lower: std::f64::consts::LN_2,
            cc_upper: std::f64::consts::LN_2,
            cc_mid: std::f64::consts::LN_2,
        };
        assert!((parts.total(0.5) - 0.8466).abs() < 1e-4);
        assert_eq!(parts.total(0.0), 1.0);
    }
}
