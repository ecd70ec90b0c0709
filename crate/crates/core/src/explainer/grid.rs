use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular tiling of an `h x w` image into `rows x cols` regions. Band
/// `i` along an axis of length `n` covers `[i*n/k, (i+1)*n/k)`, so the
/// regions tile the image exactly even when `k` does not divide `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

impl RegionGrid {
    pub fn new(rows: usize, cols: usize, height: usize, width: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols < 2 {
            return Err(Error::Config(format!(
                "degenerate region grid {rows}x{cols}"
            )));
        }
        if rows > height || cols > width {
            return Err(Error::Config(format!(
                "grid {rows}x{cols} finer than image {height}x{width}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row_band(&self, r: usize) -> Range<usize> {
        r * self.height / self.rows..(r + 1) * self.height / self.rows
    }

    pub fn col_band(&self, c: usize) -> Range<usize> {
        c * self.width / self.cols..(c + 1) * self.width / self.cols
    }

    /// Row-major region index to its pixel rectangle.
    pub fn bounds(&self, region: usize) -> (Range<usize>, Range<usize>) {
        (
            self.row_band(region / self.cols),
            self.col_band(region % self.cols),
        )
    }

    pub fn pixel_count(&self, region: usize) -> usize {
        let (r, c) = self.bounds(region);
        r.len() * c.len()
    }

    /// Flat `y * width + x` indices of the pixels of a region.
    pub fn pixels(&self, region: usize) -> impl Iterator<Item = usize> + '_ {
        let (rows, cols) = self.bounds(region);
        rows.flat_map(move |y| cols.clone().map(move |x| y * self.width + x))
    }

    /// Mean of a single-channel `h*w` map over each region.
    pub fn region_means(&self, map: &[f32]) -> Vec<f64> {
        (0..self.len())
            .map(|r| {
                let s: f64 = self.pixels(r).map(|i| map[i] as f64).sum();
                s / self.pixel_count(r) as f64
            })
            .collect()
    }

    /// Sum of a single-channel map over each region.
    pub fn region_sums(&self, map: &[f32]) -> Vec<f64> {
        (0..self.len())
            .map(|r| self.pixels(r).map(|i| map[i] as f64).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uneven_grid_tiles_exactly() {
        let g = RegionGrid::new(3, 5, 10, 12).unwrap();
        let mut seen = [0u8; 120];
        for r in 0..g.len() {
            for p in g.pixels(r) {
                seen[p] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn degenerate_grids_rejected() {
        assert!(RegionGrid::new(1, 1, 4, 4).is_err());
        assert!(RegionGrid::new(0, 3, 4, 4).is_err());
        assert!(RegionGrid::new(8, 8, 4, 4).is_err());
    }
}
