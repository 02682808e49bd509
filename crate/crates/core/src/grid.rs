//! Patch-grid value types: per-patch class scores and boolean patch masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Boolean mask over a square P×P patch grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchMask {
    side: usize,
    cells: Vec<bool>,
}

impl PatchMask {
    pub fn empty(side: usize) -> Self {
        Self {
            side,
            cells: vec![false; side * side],
        }
    }

    pub fn full(side: usize) -> Self {
        Self {
            side,
            cells: vec![true; side * side],
        }
    }

    pub fn from_cells(side: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != side * side {
            return Err(Error::Invalid(format!(
                "mask for a {side}x{side} grid needs {} cells, got {}",
                side * side,
                cells.len()
            )));
        }
        Ok(Self { side, cells })
    }

    /// Axis-aligned rectangle of patches; must lie inside the grid.
    pub fn rect(side: usize, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || row0 + rows > side || col0 + cols > side {
            return Err(Error::Invalid(format!(
                "box (row0={row0}, col0={col0}, rows={rows}, cols={cols}) does not fit a {side}x{side} grid"
            )));
        }
        let mut m = Self::empty(side);
        for r in row0..row0 + rows {
            for c in col0..col0 + cols {
                m.set(r, c, true);
            }
        }
        Ok(m)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Decomposes the mask into disjoint rectangles `(row0, col0, rows, cols)`.
    /// Row runs are merged downward while the run set repeats.
    pub fn to_rects(&self) -> Vec<(usize, usize, usize, usize)> {
        let runs = |r: usize| {
            let mut out = Vec::new();
            let mut c = 0;
            while c < self.side {
                if self.get(r, c) {
                    let start = c;
                    while c < self.side && self.get(r, c) {
                        c += 1;
                    }
                    out.push((start, c - start));
                } else {
                    c += 1;
                }
            }
            out
        };
        let mut rects = Vec::new();
        let mut r = 0;
        while r < self.side {
            let current = runs(r);
            let mut end = r + 1;
            while end < self.side && runs(end) == current {
                end += 1;
            }
            for &(c0, w) in &current {
                rects.push((r, c0, end - r, w));
            }
            r = end;
        }
        rects
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.cells[row * self.side + col] = on;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    pub fn complement(&self) -> Self {
        Self {
            side: self.side,
            cells: self.cells.iter().map(|&c| !c).collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        assert_eq!(self.side, other.side, "mask grids differ");
        Self {
            side: self.side,
            cells: self.cells.iter().zip(&other.cells).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        assert_eq!(self.side, other.side, "mask grids differ");
        self.cells.iter().zip(&other.cells).filter(|(&a, &b)| a && b).count()
    }

    pub fn union_count(&self, other: &Self) -> usize {
        assert_eq!(self.side, other.side, "mask grids differ");
        self.cells.iter().zip(&other.cells).filter(|(&a, &b)| a || b).count()
    }

    /// Row-major indices of the set cells.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i)
    }

    /// Mask as 0/1 weights.
    pub fn weights<T: Scalar>(&self) -> Vec<T> {
        self.cells.iter().map(|&c| if c { T::one() } else { T::zero() }).collect()
    }
}

/// Per-patch, per-class probabilities on a P×P grid (p before the CRF, z after).
///
/// Stored class-major (`[k][row][col]`), the layout of one sample of an
/// `(N, K, P, P)` network output.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores<T> {
    side: usize,
    classes: usize,
    values: Vec<T>,
}

impl<T: Scalar> PatchScores<T> {
    pub fn new(side: usize, classes: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != side * side * classes || classes == 0 {
            return Err(Error::Invalid(format!(
                "patch scores for P={side}, K={classes} need {} values, got {}",
                side * side * classes,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Invalid(format!("patch score {v} outside [0, 1]")));
        }
        Ok(Self { side, classes, values })
    }

    pub fn filled(side: usize, classes: usize, value: T) -> Self {
        Self::new(side, classes, vec![value; side * side * classes]).expect("value in [0, 1]")
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, class: usize) -> T {
        self.values[(class * self.side + row) * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: usize, v: T) {
        assert!(v >= T::zero() && v <= T::one(), "patch score outside [0, 1]");
        self.values[(class * self.side + row) * self.side + col] = v;
    }

    /// The P² scores of one class, row-major.
    pub fn class_plane(&self, class: usize) -> &[T] {
        let n = self.side * self.side;
        &self.values[class * n..(class + 1) * n]
    }

    pub fn class_sum(&self, class: usize) -> T {
        self.class_plane(class).iter().copied().sum()
    }

    /// Σ_{j ∈ mask} scores of one class.
    pub fn masked_sum(&self, class: usize, mask: &PatchMask) -> T {
        self.class_plane(class)
            .iter()
            .zip(mask.cells())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .sum()
    }
}
