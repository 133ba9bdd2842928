use crate::autodiff::Var;
use crate::error::{ensure, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Dense per-cell embedding `[D, h, w]` at `stride` image pixels per cell.
///
/// The last `coord_channels` channels (0 or 2) hold normalised `x`, `y`
/// coordinates spanning `[-1, 1]` corner to corner.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub stride: usize,
    pub coord_channels: usize,
}

impl<T: Float> FeatureMap<T> {
    pub fn new(values: Tensor<T>, stride: usize, coord_channels: usize) -> Result<Self> {
        ensure!(
            values.shape().len() == 3,
            "feature map must be [D,h,w], got {:?}",
            values.shape()
        );
        ensure!(stride >= 1, "stride must be >= 1");
        ensure!(
            coord_channels == 0 || coord_channels == 2,
            "coord_channels must be 0 or 2"
        );
        ensure!(
            values.shape()[0] >= coord_channels,
            "too few channels for coordinates"
        );
        Ok(FeatureMap {
            values,
            stride,
            coord_channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Embedding vector (all `D` channels) at cell `(y, x)`.
    pub fn embedding(&self, y: usize, x: usize) -> Vec<T> {
        let (h, w) = (self.height(), self.width());
        (0..self.channels())
            .map(|c| self.values.data()[c * h * w + y * w + x])
            .collect()
    }
}

/// Graph-resident feature map: a `[D, h, w]` node plus its metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureVar {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub coord_channels: usize,
}

impl FeatureVar {
    pub fn learned_channels(&self) -> usize {
        self.channels - self.coord_channels
    }
}

fn ramp(i: usize, n: usize) -> f64 {
    if n > 1 {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// `[2, h, w]` coordinate planes: channel 0 is `x`, channel 1 is `y`.
pub fn coord_grid<T: Float>(h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(2 * h * w);
    for _y in 0..h {
        for x in 0..w {
            data.push(T::of(ramp(x, w)));
        }
    }
    for y in 0..h {
        for _x in 0..w {
            data.push(T::of(ramp(y, h)));
        }
    }
    Tensor::from_vec(&[2, h, w], data).expect("grid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_endpoints() {
        let g = coord_grid::<f64>(4, 5);
        let d = g.data();
        // top-left (-1,-1), bottom-right (+1,+1)
        assert_eq!((d[0], d[20]), (-1.0, -1.0));
        assert_eq!((d[19], d[39]), (1.0, 1.0));
    }
}
