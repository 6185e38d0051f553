use serde::{Deserialize, Serialize};

use crate::error::{BuddError, Result};

/// Raster geometry shared by every co-registered layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub resolution_m: f64,
}

impl Grid {
    pub fn new(height: usize, width: usize, resolution_m: f64) -> Self {
        Self {
            height,
            width,
            resolution_m,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fails unless both grids have identical shape and pixel size.
    pub fn ensure_matches(&self, other: &Grid, context: &str) -> Result<()> {
        if self.height != other.height
            || self.width != other.width
            || self.resolution_m.to_bits() != other.resolution_m.to_bits()
        {
            return Err(BuddError::GridMismatch(format!(
                "{context}: {}x{} @ {} m vs {}x{} @ {} m",
                self.height,
                self.width,
                self.resolution_m,
                other.height,
                other.width,
                other.resolution_m
            )));
        }
        Ok(())
    }

    pub fn full_rect(&self) -> Rect {
        Rect {
            row: 0,
            col: 0,
            height: self.height,
            width: self.width,
        }
    }
}

/// Axis-aligned pixel window, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.row + self.height <= height && self.col + self.width <= width
    }
}

/// Copies the `rect` window out of a row-major `width`-wide buffer.
pub fn crop_slice<T: Copy>(data: &[T], width: usize, rect: Rect) -> Vec<T> {
    let mut out = Vec::with_capacity(rect.len());
    for r in rect.row..rect.row + rect.height {
        let start = r * width + rect.col;
        out.extend_from_slice(&data[start..start + rect.width]);
    }
    out
}

/// Writes a `rect`-shaped buffer back into a row-major `width`-wide buffer.
pub fn paste_slice<T: Copy>(dst: &mut [T], width: usize, rect: Rect, src: &[T]) {
    for (i, r) in (rect.row..rect.row + rect.height).enumerate() {
        let start = r * width + rect.col;
        dst[start..start + rect.width].copy_from_slice(&src[i * rect.width..(i + 1) * rect.width]);
    }
}
