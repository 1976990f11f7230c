use ndarray::Array2;
use rand::seq::index;
use rand::Rng;

use super::{AugmentConfig, AugmentParams, PatchDataset};
use crate::error::{Error, Result};

/// `n` matching pairs from `n` distinct classes; row `i` of `anchors` and
/// row `i` of `positives` share `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub anchors: Array2<f64>,
    pub positives: Array2<f64>,
    pub labels: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Anchors stacked on top of positives.
    pub fn stacked(&self) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(0), &[self.anchors.view(), self.positives.view()]).expect("same width")
    }
}

/// Samples `n` distinct classes without replacement and two distinct patches
/// of each. One augmentation draw is shared by both patches of a pair.
pub fn sample_batch(dataset: &PatchDataset, n: usize, augment: &AugmentConfig, rng: &mut impl Rng) -> Result<PairBatch> {
    let classes = dataset.trainable_classes();
    if n < 2 || n > classes.len() {
        return Err(Error::Config(format!(
            "batch of {n} pairs needs between 2 and {} classes with two or more patches",
            classes.len()
        )));
    }
    let size = dataset.patch_size();
    let dim = size * size;
    let mut anchors = Array2::zeros((n, dim));
    let mut positives = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (row, pick) in index::sample(rng, classes.len(), n).into_iter().enumerate() {
        let class = classes[pick];
        let members = dataset.class_members(class);
        let two = index::sample(rng, members.len(), 2);
        let params = AugmentParams::draw(augment, size, rng);
        for (slot, target) in [(two.index(0), &mut anchors), (two.index(1), &mut positives)] {
            let patch = dataset.patch(members[slot]).to_vec();
            let out = params.apply(&patch, size)?;
            target.row_mut(row).assign(&ndarray::ArrayView1::from(&out));
        }
        labels.push(class);
    }
    Ok(PairBatch {
        anchors,
        positives,
        labels,
    })
}
