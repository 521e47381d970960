//! Dense row-major 2D rasters.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                left: format!("{height}x{width}"),
                right: format!("{} elements", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Copies the `height`x`width` window whose top-left corner is `(row, col)`.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Raster<T> {
        assert!(row + height <= self.height && col + width <= self.width);
        let mut data = Vec::with_capacity(height * width);
        for r in row..row + height {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + width]);
        }
        Raster {
            height,
            width,
            data,
        }
    }
}

/// Summed-area table over a boolean predicate, for O(1) window counts.
#[derive(Debug, Clone)]
pub struct IntegralCount {
    width: usize,
    sums: Vec<u32>,
}

impl IntegralCount {
    pub fn build<T: Copy>(raster: &Raster<T>, pred: impl Fn(T) -> bool) -> Self {
        let (h, w) = raster.dims();
        let stride = w + 1;
        let mut sums = vec![0u32; (h + 1) * stride];
        for r in 0..h {
            let mut row_acc = 0u32;
            for c in 0..w {
                row_acc += pred(raster.get(r, c)) as u32;
                sums[(r + 1) * stride + c + 1] = sums[r * stride + c + 1] + row_acc;
            }
        }
        Self { width: w, sums }
    }

    /// Count over rows `r0..r1` and columns `c0..c1` (half-open).
    #[inline]
    pub fn count(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> u32 {
        let s = self.width + 1;
        self.sums[r1 * s + c1] + self.sums[r0 * s + c0]
            - self.sums[r0 * s + c1]
            - self.sums[r1 * s + c0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Raster::new(2, 3, vec![0u8; 5]).is_err());
    }

    #[test]
    fn integral_counts_match_direct_count() {
        let r = Raster::from_fn(7, 9, |r, c| (r * 31 + c * 17) % 5);
        let ic = IntegralCount::build(&r, |v| v == 3);
        for (r0, c0, r1, c1) in [(0, 0, 7, 9), (1, 2, 4, 8), (3, 3, 3, 5), (6, 0, 7, 1)] {
            let mut n = 0;
            for rr in r0..r1 {
                for cc in c0..c1 {
                    n += (r.get(rr, cc) == 3) as u32;
                }
            }
            assert_eq!(ic.count(r0, c0, r1, c1), n);
        }
    }

    #[test]
    fn window_copies_rows() {
        let r = Raster::from_fn(4, 4, |r, c| r * 4 + c);
        let w = r.window(1, 2, 2, 2);
        assert_eq!(w.as_slice(), &[6, 7, 10, 11]);
    }
}
