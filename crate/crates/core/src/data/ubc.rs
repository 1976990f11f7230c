//! UBC PhotoTour layout: `patchesNNNN.bmp` mosaics of 16×16 tiles of 64×64
//! patches in row-major order, and `info.txt` with one `pointID unused` line
//! per patch.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::PatchDataset;
use crate::error::{Error, Result};

const TILE: usize = 64;
const TILES_PER_SIDE: usize = 16;

fn mosaic_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("patches") && name.ends_with(".bmp")
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn read_point_ids(path: &Path) -> Result<Vec<u64>> {
    if !path.exists() {
        return Err(Error::format(path, "missing info file"));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::format(path, format!("line {}: expected a point id", i + 1)))
        })
        .collect()
}

/// Loads every patch listed in `info.txt`, box-averaged down to
/// `patch_size × patch_size` (which must divide 64).
pub fn load_ubc(dir: &Path, patch_size: usize) -> Result<PatchDataset> {
    if patch_size == 0 || !TILE.is_multiple_of(patch_size) {
        return Err(Error::Config(format!("patch_size must divide {TILE}, got {patch_size}")));
    }
    let labels = read_point_ids(&dir.join("info.txt"))?;
    let mosaics = mosaic_paths(dir)?;
    let per_mosaic = TILES_PER_SIDE * TILES_PER_SIDE;
    let needed = labels.len().div_ceil(per_mosaic);
    if mosaics.len() < needed {
        return Err(Error::format(
            dir,
            format!("{} patches listed but only {} mosaic images", labels.len(), mosaics.len()),
        ));
    }
    let factor = TILE / patch_size;
    let mut pixels = Array2::zeros((labels.len(), patch_size * patch_size));
    for (m, path) in mosaics.iter().take(needed).enumerate() {
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_luma8();
        let side = (TILE * TILES_PER_SIDE) as u32;
        if img.width() != side || img.height() != side {
            return Err(Error::format(
                path,
                format!("mosaic is {}x{}, expected {side}x{side}", img.width(), img.height()),
            ));
        }
        for t in 0..per_mosaic {
            let idx = m * per_mosaic + t;
            if idx >= labels.len() {
                break;
            }
            let (ty, tx) = (t / TILES_PER_SIDE * TILE, t % TILES_PER_SIDE * TILE);
            let mut row = pixels.row_mut(idx);
            for r in 0..patch_size {
                for c in 0..patch_size {
                    let mut sum = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let x = (tx + c * factor + dx) as u32;
                            let y = (ty + r * factor + dy) as u32;
                            sum += img.get_pixel(x, y)[0] as f64;
                        }
                    }
                    row[r * patch_size + c] = sum / (factor * factor) as f64 / 255.0;
                }
            }
        }
    }
    PatchDataset::new(patch_size, pixels, &labels)
}
