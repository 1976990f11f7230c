use std::fs;
use std::path::Path;

use rand::Rng;

use super::PatchDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub first: usize,
    pub second: usize,
    pub is_match: bool,
}

/// Patch pairs with ground-truth match labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationPairs {
    pairs: Vec<VerificationPair>,
}

impl VerificationPairs {
    pub fn new(pairs: Vec<VerificationPair>) -> Result<Self> {
        let matches = pairs.iter().filter(|p| p.is_match).count();
        if matches == 0 || matches == pairs.len() {
            return Err(Error::DegenerateLabels(format!(
                "{matches} matching and {} non-matching pairs",
                pairs.len() - matches
            )));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[VerificationPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks every index against a dataset of `len` patches.
    pub fn check_indices(&self, len: usize) -> Result<()> {
        match self.pairs.iter().find(|p| p.first >= len || p.second >= len) {
            Some(p) => Err(Error::ShapeMismatch(format!(
                "pair ({}, {}) refers past the {len} patches of the dataset",
                p.first, p.second
            ))),
            None => Ok(()),
        }
    }
}

/// Reads a UBC pair list: `patch1 point1 _ patch2 point2 _` per line. A pair
/// matches iff its point ids agree.
pub fn load_verification_pairs(path: &Path) -> Result<VerificationPairs> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<u64>> = fields.iter().map(|f| f.parse().ok()).collect();
        let Some(v) = parsed.filter(|v| v.len() == 6) else {
            return Err(Error::format(
                path,
                format!("line {}: expected six integer fields, got `{line}`", lineno + 1),
            ));
        };
        pairs.push(VerificationPair {
            first: v[0] as usize,
            second: v[3] as usize,
            is_match: v[1] == v[4],
        });
    }
    VerificationPairs::new(pairs)
}

/// Draws `matches` same-class and `non_matches` different-class pairs.
pub fn sample_verification_pairs(
    dataset: &PatchDataset,
    matches: usize,
    non_matches: usize,
    rng: &mut impl Rng,
) -> Result<VerificationPairs> {
    let classes = dataset.trainable_classes();
    if classes.is_empty() || dataset.num_classes() < 2 {
        return Err(Error::DegenerateLabels(
            "need a class with two patches and at least two classes".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(matches + non_matches);
    for _ in 0..matches {
        let members = dataset.class_members(classes[rng.random_range(0..classes.len())]);
        let two = rand::seq::index::sample(rng, members.len(), 2);
        pairs.push(VerificationPair {
            first: members[two.index(0)],
            second: members[two.index(1)],
            is_match: true,
        });
    }
    for _ in 0..non_matches {
        let (a, b) = loop {
            let a = rng.random_range(0..dataset.len());
            let b = rng.random_range(0..dataset.len());
            if dataset.label(a) != dataset.label(b) {
                break (a, b);
            }
        };
        pairs.push(VerificationPair {
            first: a,
            second: b,
            is_match: false,
        });
    }
    VerificationPairs::new(pairs)
}
