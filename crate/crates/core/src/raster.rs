//! Row-major rasters over the workspace grid.

use serde::{Deserialize, Serialize};

/// A `width x height` raster indexed by `(x, y)` cell coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    cells: Vec<T>,
}

pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            cells: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_cells(width: usize, height: usize, cells: Vec<T>) -> Self {
        assert_eq!(cells.len(), width * height, "grid size");
        Self {
            width,
            height,
            cells,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [T] {
        &mut self.cells
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.cells[self.index(x, y)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        let i = self.index(x, y);
        &mut self.cells[i]
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn from_indices(width: usize, height: usize, indices: &[usize]) -> Self {
        let mut m = Self::new(width, height, false);
        for &i in indices {
            m.cells[i] = true;
        }
        m
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    /// Dilation by a square (Chebyshev) structuring element of `radius`.
    /// Done as two separable 1-D passes.
    pub fn dilate_square(&self, radius: usize) -> Mask {
        let (w, h) = (self.width, self.height);
        let mut rows = Mask::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                if self.cells[y * w + x] {
                    let lo = x.saturating_sub(radius);
                    let hi = (x + radius).min(w - 1);
                    rows.cells[y * w + lo..=y * w + hi].fill(true);
                }
            }
        }
        let mut out = Mask::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                if rows.cells[y * w + x] {
                    let lo = y.saturating_sub(radius);
                    let hi = (y + radius).min(h - 1);
                    for yy in lo..=hi {
                        out.cells[yy * w + x] = true;
                    }
                }
            }
        }
        out
    }

    /// Cells set in `self` and not in `other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        Mask::from_cells(
            self.width,
            self.height,
            self.cells
                .iter()
                .zip(&other.cells)
                .map(|(&a, &b)| a && !b)
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_matches_chebyshev_ball() {
        let mut m = Mask::new(15, 11, false);
        *m.get_mut(3, 4) = true;
        *m.get_mut(12, 9) = true;
        let d = m.dilate_square(2);
        for y in 0..11i64 {
            for x in 0..15i64 {
                let near = [(3i64, 4i64), (12, 9)]
                    .iter()
                    .any(|&(px, py)| (x - px).abs().max((y - py).abs()) <= 2);
                assert_eq!(*d.get(x as usize, y as usize), near, "({x},{y})");
            }
        }
        assert!(m.is_subset_of(&d));
        assert_eq!(d.minus(&m).count(), d.count() - 2);
    }
}
