use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Binary `height x width` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "mask data has {} entries, expected {}x{}",
            data.len(),
            height,
            width
        );
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    /// Build from nested rows; handy for small literal masks.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        ensure!(rows.iter().all(|r| r.len() == width), "ragged mask rows");
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| v != 0))
            .collect();
        Mask::from_vec(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        ensure!(
            self.dims() == other.dims(),
            "iou of masks with different shapes {:?} vs {:?}",
            self.dims(),
            other.dims()
        );
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }
}

/// Free-function form of [`Mask::iou`].
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.iou(b)
}
