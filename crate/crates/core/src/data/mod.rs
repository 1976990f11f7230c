//! Patch datasets: synthetic generation, UBC PhotoTour ingestion,
//! augmentation and batch sampling.

mod augment;
mod pairs;
mod sampling;
mod synth;
mod ubc;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use pairs::{load_verification_pairs, sample_verification_pairs, VerificationPair, VerificationPairs};
pub use sampling::{sample_batch, PairBatch};
pub use synth::{generate_synthetic, SynthConfig};
pub use ubc::load_ubc;

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};

/// Square grayscale patches with dense class labels.
///
/// Patches are stored flattened row-major, one per row of `pixels`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    patch_size: usize,
    pixels: Array2<f64>,
    labels: Vec<usize>,
    /// Original identifier of each dense label.
    class_ids: Vec<u64>,
    index: Vec<Vec<usize>>,
}

impl PatchDataset {
    /// Labels may be arbitrary identifiers; they are mapped to `0..C` in
    /// order of first appearance.
    pub fn new(patch_size: usize, pixels: Array2<f64>, raw_labels: &[u64]) -> Result<Self> {
        if patch_size == 0 || pixels.ncols() != patch_size * patch_size {
            return Err(Error::ShapeMismatch(format!(
                "patches must be square {patch_size}x{patch_size}, got rows of {}",
                pixels.ncols()
            )));
        }
        if pixels.nrows() != raw_labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} patches but {} labels",
                pixels.nrows(),
                raw_labels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange {
                what: "pixel value",
                value: *v,
                range: "[0, 1]".into(),
            });
        }
        let mut dense = HashMap::new();
        let mut class_ids = Vec::new();
        let mut index: Vec<Vec<usize>> = Vec::new();
        let labels = raw_labels
            .iter()
            .enumerate()
            .map(|(i, raw)| {
                let c = *dense.entry(*raw).or_insert_with(|| {
                    class_ids.push(*raw);
                    index.push(Vec::new());
                    class_ids.len() - 1
                });
                index[c].push(i);
                c
            })
            .collect();
        Ok(Self {
            patch_size,
            pixels,
            labels,
            class_ids,
            index,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.index.len()
    }

    pub fn patch(&self, i: usize) -> ArrayView1<'_, f64> {
        self.pixels.row(i)
    }

    pub fn pixels(&self) -> ArrayView2<'_, f64> {
        self.pixels.view()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Original identifier of a dense label.
    pub fn class_id(&self, class: usize) -> u64 {
        self.class_ids[class]
    }

    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.index[class]
    }

    /// Classes with at least two patches.
    pub fn trainable_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|c| self.index[*c].len() >= 2).collect()
    }

    const MAGIC: &'static [u8; 8] = b"SDGMDATA";
    const VERSION: u32 = 1;

    /// Writes the dataset and a free-form description (for synthetic data,
    /// the generating config) to a single binary file.
    pub fn save(&self, path: &Path, description: &str) -> Result<()> {
        let mut w = Writer::new(Self::MAGIC, Self::VERSION);
        w.str(description);
        w.u64(self.patch_size as u64);
        w.u64s(&self.labels.iter().map(|l| self.class_ids[*l]).collect::<Vec<_>>());
        w.f64s(self.pixels.as_slice().expect("standard layout"));
        w.write_to(path)
    }

    /// Reads a file written by [`save`](Self::save), returning the dataset
    /// and its description.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut r = Reader::open(path, Self::MAGIC, Self::VERSION)?;
        let description = r.str()?;
        let patch_size = r.u64()? as usize;
        let labels = r.u64s()?;
        let pixels = r.f64s()?;
        r.finish()?;
        let pixels = Array2::from_shape_vec((labels.len(), patch_size * patch_size), pixels)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok((Self::new(patch_size, pixels, &labels)?, description))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_densified_in_order() {
        let px = Array2::from_elem((4, 4), 0.5);
        let ds = PatchDataset::new(2, px, &[70, 9, 70, 3]).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 0, 2]);
        assert_eq!(ds.class_id(1), 9);
        assert_eq!(ds.class_members(0), &[0, 2]);
        assert_eq!(ds.trainable_classes(), vec![0]);
    }

    #[test]
    fn rejects_bad_pixels_and_shapes() {
        let mut px = Array2::from_elem((2, 4), 0.5);
        px[[1, 3]] = 1.5;
        assert!(matches!(PatchDataset::new(2, px, &[0, 1]), Err(Error::OutOfRange { .. })));
        let px = Array2::from_elem((2, 6), 0.5);
        assert!(matches!(PatchDataset::new(2, px, &[0, 1]), Err(Error::ShapeMismatch(_))));
        let px = Array2::from_elem((2, 4), f64::NAN);
        assert!(PatchDataset::new(2, px, &[0, 1]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let px = Array2::from_shape_fn((3, 9), |(i, j)| (i * 9 + j) as f64 / 27.0);
        let ds = PatchDataset::new(3, px, &[5, 5, 8]).unwrap();
        ds.save(&path, "seed = 1").unwrap();
        let (back, desc) = PatchDataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(desc, "seed = 1");
    }
}
