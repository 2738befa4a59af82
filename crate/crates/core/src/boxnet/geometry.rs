use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::normalized;

/// An axis-aligned box `{ x : lower[j] ≤ x[j] ≤ upper[j] ∀j }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LatentBox {
    /// Checked constructor; fails when any `lower[j] > upper[j]`.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if let Some(j) = (0..lower.len()).find(|&j| !(lower[j] <= upper[j])) {
            return Err(Error::InvalidData(format!(
                "box corner order violated at dimension {j}: {} > {}",
                lower[j], upper[j]
            )));
        }
        Ok(LatentBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn side_lengths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (l, u))| l <= x && x <= u)
    }
}

/// Normalized raw corners plus the per-coordinate branch choice of the min/max ordering.
///
/// `lower[j]` comes from `â` when `â[j] ≤ b̂[j]` and `upper[j]` from `â` when
/// `â[j] ≥ b̂[j]`, so ties resolve to the first raw output on both sides.
#[derive(Debug, Clone)]
pub struct OrderedCorners {
    pub a_hat: Vec<f64>,
    pub a_len: f64,
    pub b_hat: Vec<f64>,
    pub b_len: f64,
    pub lower_from_a: Vec<bool>,
    pub upper_from_a: Vec<bool>,
    pub bounds: LatentBox,
}

impl OrderedCorners {
    pub fn new(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimMismatch {
                expected: a.len(),
                found: b.len(),
            });
        }
        let (a_hat, a_len) =
            normalized(a).ok_or_else(|| Error::Numeric("first raw corner is zero".into()))?;
        let (b_hat, b_len) =
            normalized(b).ok_or_else(|| Error::Numeric("second raw corner is zero".into()))?;
        let d = a.len();
        let mut lower = Vec::with_capacity(d);
        let mut upper = Vec::with_capacity(d);
        let mut lower_from_a = Vec::with_capacity(d);
        let mut upper_from_a = Vec::with_capacity(d);
        for (&x, &y) in a_hat.iter().zip(&b_hat) {
            let lo_a = x <= y;
            let up_a = x >= y;
            lower.push(if lo_a { x } else { y });
            upper.push(if up_a { x } else { y });
            lower_from_a.push(lo_a);
            upper_from_a.push(up_a);
        }
        Ok(OrderedCorners {
            a_hat,
            a_len,
            b_hat,
            b_len,
            lower_from_a,
            upper_from_a,
            bounds: LatentBox { lower, upper },
        })
    }
}

/// Turns the two raw network outputs into a box: normalize each to unit norm,
/// then take the elementwise min and max.
pub fn corners_from_raw(a: &[f64], b: &[f64]) -> Result<LatentBox> {
    Ok(OrderedCorners::new(a, b)?.bounds)
}
