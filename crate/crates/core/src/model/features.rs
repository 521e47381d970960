//! Hand-built features for the reference models.
//!
//! Both layouts put channel `c` at index `c` and its companion statistic at
//! `n_channels + c`.

use crate::error::{Error, Result};
use crate::preprocess::FeatureStack;

/// Per-channel mean then per-channel population std over finite pixels.
pub fn patch_features(window: &FeatureStack) -> Result<Vec<f64>> {
    let n = window.n_channels();
    let mut out = vec![0.0; 2 * n];
    for (c, r) in window.channels.iter().enumerate() {
        let (mut sum, mut count) = (0.0f64, 0usize);
        for &v in r.as_slice() {
            if v.is_finite() {
                sum += v as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::AllNonFinite(c));
        }
        let mean = sum / count as f64;
        let var = r
            .as_slice()
            .iter()
            .filter(|v| v.is_finite())
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        out[c] = mean;
        out[n + c] = var.sqrt();
    }
    Ok(out)
}

/// Per-pixel feature vectors, row-major with `dim` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PixelFeatures {
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Channel value at each pixel plus the 3x3 mean around it, with edge
/// replication at the borders. Non-finite values contribute nothing: a
/// non-finite centre becomes 0 and the mean runs over finite neighbours (0 if
/// none).
pub fn pixel_features(stack: &FeatureStack) -> PixelFeatures {
    let (h, w) = stack.dims();
    let n = stack.n_channels();
    let dim = 2 * n;
    let mut data = vec![0.0; h * w * dim];
    for (c, r) in stack.channels.iter().enumerate() {
        let src = r.as_slice();
        for row in 0..h {
            let rows = [row.saturating_sub(1), row, (row + 1).min(h - 1)];
            for col in 0..w {
                let cols = [col.saturating_sub(1), col, (col + 1).min(w - 1)];
                let (mut sum, mut count) = (0.0f64, 0u32);
                for &rr in &rows {
                    for &cc in &cols {
                        let v = src[rr * w + cc];
                        if v.is_finite() {
                            sum += v as f64;
                            count += 1;
                        }
                    }
                }
                let centre = src[row * w + col];
                let base = (row * w + col) * dim;
                data[base + c] = if centre.is_finite() {
                    centre as f64
                } else {
                    0.0
                };
                data[base + n + c] = if count == 0 { 0.0 } else { sum / count as f64 };
            }
        }
    }
    PixelFeatures {
        height: h,
        width: w,
        dim,
        data,
    }
}
