//! In-batch hardest-negative mining with an anti-noise threshold.
//!
//! For matching pair `i` the candidates are the anchor row `θ(aᵢ, pⱼ)` and
//! the positive column `θ(aⱼ, pᵢ)`, `j ≠ i`. Candidates closer than `tau` are
//! treated as probable label noise and dropped; the nearest survivor becomes
//! the negative. Pairs without survivors are masked out of everything
//! downstream.

use crate::error::{Error, Result};
use crate::geometry::AngleMatrix;

/// Anti-noise threshold used in training, in radians.
pub const DEFAULT_TAU: f64 = 0.6;

/// Which side of the matrix a negative came from. The declaration order is
/// the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    /// `θ(aᵢ, pⱼ)`: the negative is positive `j`.
    AnchorRow,
    /// `θ(aⱼ, pᵢ)`: the negative is anchor `j`.
    PositiveColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NegSource {
    pub side: Side,
    pub index: usize,
}

impl NegSource {
    /// `(anchor index, positive index)` of the negative pair for triplet `i`.
    pub fn pair(self, i: usize) -> (usize, usize) {
        match self.side {
            Side::AnchorRow => (i, self.index),
            Side::PositiveColumn => (self.index, i),
        }
    }
}

/// Mined triplets. Masked entries carry `NaN` negative and relative angles.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub theta_pos: Vec<f64>,
    pub theta_neg: Vec<f64>,
    pub theta_rel: Vec<f64>,
    pub neg_source: Vec<Option<NegSource>>,
    pub valid_mask: Vec<bool>,
}

impl TripletBatch {
    /// Builds an all-valid batch directly from angles, without provenance.
    pub fn from_angles(theta_pos: Vec<f64>, theta_neg: Vec<f64>) -> Result<Self> {
        if theta_pos.len() != theta_neg.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positive vs {} negative angles",
                theta_pos.len(),
                theta_neg.len()
            )));
        }
        let n = theta_pos.len();
        let theta_rel = theta_pos.iter().zip(&theta_neg).map(|(p, q)| p - q).collect();
        Ok(Self {
            theta_pos,
            theta_neg,
            theta_rel,
            neg_source: vec![None; n],
            valid_mask: vec![true; n],
        })
    }

    pub fn len(&self) -> usize {
        self.theta_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_pos.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|v| **v).count()
    }

    /// Indices of unmasked triplets, ascending.
    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid_mask
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
    }
}

pub fn mine_triplets(matrix: &AngleMatrix, tau: f64) -> Result<TripletBatch> {
    if !(tau > 0.0 && tau < std::f64::consts::PI) {
        return Err(Error::OutOfRange {
            what: "anti-noise threshold",
            value: tau,
            range: "(0, pi)".into(),
        });
    }
    let n = matrix.len();
    let mut batch = TripletBatch {
        theta_pos: Vec::with_capacity(n),
        theta_neg: Vec::with_capacity(n),
        theta_rel: Vec::with_capacity(n),
        neg_source: Vec::with_capacity(n),
        valid_mask: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut best: Option<(f64, NegSource)> = None;
        for side in [Side::AnchorRow, Side::PositiveColumn] {
            for j in (0..n).filter(|&j| j != i) {
                let theta = match side {
                    Side::AnchorRow => matrix.get(i, j),
                    Side::PositiveColumn => matrix.get(j, i),
                };
                if theta < tau {
                    continue;
                }
                // Visiting (side, index) in ascending order means a strict
                // comparison keeps the lexicographically first of equal minima.
                if best.is_none_or(|(b, _)| theta < b) {
                    best = Some((theta, NegSource { side, index: j }));
                }
            }
        }
        let theta_pos = matrix.get(i, i);
        batch.theta_pos.push(theta_pos);
        match best {
            Some((theta_neg, source)) => {
                batch.theta_neg.push(theta_neg);
                batch.theta_rel.push(theta_pos - theta_neg);
                batch.neg_source.push(Some(source));
                batch.valid_mask.push(true);
            }
            None => {
                batch.theta_neg.push(f64::NAN);
                batch.theta_rel.push(f64::NAN);
                batch.neg_source.push(None);
                batch.valid_mask.push(false);
            }
        }
    }
    Ok(batch)
}
