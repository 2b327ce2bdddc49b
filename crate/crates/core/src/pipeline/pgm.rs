//! Binary greyscale (P5) output of maps and images in `[-1, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::NormalizedImage;
use crate::similarity::{DynamicMask, SimilarityMap};

/// A row-major grid of values in `[-1, 1]`.
pub trait GrayGrid {
    fn grid(&self) -> (usize, usize, &[f64]);
}

impl GrayGrid for SimilarityMap {
    fn grid(&self) -> (usize, usize, &[f64]) {
        (self.height(), self.width(), self.values())
    }
}

impl GrayGrid for NormalizedImage {
    fn grid(&self) -> (usize, usize, &[f64]) {
        (self.height(), self.width(), self.pixels())
    }
}

impl GrayGrid for DynamicMask {
    fn grid(&self) -> (usize, usize, &[f64]) {
        (self.height(), self.width(), self.values())
    }
}

/// `-1 -> 0`, `+1 -> 255`, rounding half up.
pub fn gray_level(v: f64) -> Result<u8> {
    if !(-1.0..=1.0).contains(&v) {
        return Err(Error::invalid("values", format!("{v} outside [-1, 1]")));
    }
    Ok(((v + 1.0) / 2.0 * 255.0 + 0.5).floor() as u8)
}

pub fn pgm_bytes(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width || values.is_empty() {
        return Err(Error::invalid("values", "length must equal height * width"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        out.push(gray_level(v)?);
    }
    Ok(out)
}

pub fn emit_pgm(map: &impl GrayGrid, path: &Path) -> Result<()> {
    let (h, w, v) = map.grid();
    let bytes = pgm_bytes(h, w, v)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
