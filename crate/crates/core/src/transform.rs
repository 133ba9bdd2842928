//! The transformation group acting on images, masks and feature maps.
//!
//! Every transform is expressed as "output pixel -> source coordinate" with
//! pixel centres at integer coordinates. Images and features are resampled
//! bilinearly, masks by nearest neighbour, so one geometry serves all three.
//! Crops are square, snapped to the feature-stride grid by
//! [`sample_transform`], and resized back to the input size.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{ensure, Result};
use crate::features::{coord_grid, FeatureMap, FeatureVar};
use crate::float::Float;
use crate::mask::Mask;
use crate::resample::{Border, Resampler};
use crate::tensor::Tensor;

const ALIGN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Hflip,
    Crop,
    Rotate,
    Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Crop side / image side.
    #[serde(default = "one")]
    pub crop_ratio: f64,
    /// Normalised top-left `[x, y]` of the crop window.
    #[serde(default)]
    pub crop_origin: [f64; 2],
    #[serde(default)]
    pub angle_deg: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl TransformSpec {
    fn base(kind: TransformKind) -> Self {
        TransformSpec {
            kind,
            crop_ratio: 1.0,
            crop_origin: [0.0, 0.0],
            angle_deg: 0.0,
            scale: 1.0,
        }
    }

    pub fn identity() -> Self {
        Self::base(TransformKind::Identity)
    }

    pub fn hflip() -> Self {
        Self::base(TransformKind::Hflip)
    }

    pub fn crop(ratio: f64, origin: [f64; 2]) -> Result<Self> {
        let g = TransformSpec {
            crop_ratio: ratio,
            crop_origin: origin,
            ..Self::base(TransformKind::Crop)
        };
        g.validate()?;
        Ok(g)
    }

    pub fn rotate(angle_deg: f64) -> Self {
        TransformSpec {
            angle_deg,
            ..Self::base(TransformKind::Rotate)
        }
    }

    pub fn scaling(factor: f64) -> Self {
        TransformSpec {
            scale: factor,
            ..Self::base(TransformKind::Scale)
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == TransformKind::Identity
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TransformKind::Crop => {
                ensure!(
                    (0.6 - ALIGN_TOL..=1.0 + ALIGN_TOL).contains(&self.crop_ratio),
                    "crop_ratio {} outside [0.6, 1.0]",
                    self.crop_ratio
                );
                for o in self.crop_origin {
                    ensure!(
                        o >= -ALIGN_TOL && o <= 1.0 - self.crop_ratio + ALIGN_TOL,
                        "crop origin {:?} puts the window outside the image",
                        self.crop_origin
                    );
                }
            }
            TransformKind::Scale => ensure!(self.scale > 0.0, "scale factor must be positive"),
            _ => {}
        }
        Ok(())
    }

    /// Crop window `(x0, y0, side)` in units of a `size`-cell grid, which must
    /// be integral.
    fn crop_cells(&self, size: usize) -> Result<(usize, usize, usize)> {
        let to_cells = |v: f64| -> Result<usize> {
            let c = v * size as f64;
            ensure!(
                (c - c.round()).abs() < ALIGN_TOL * size as f64,
                "crop is not aligned to a {size}-cell grid ({c} cells)"
            );
            Ok(c.round() as usize)
        };
        let side = to_cells(self.crop_ratio)?;
        let (x0, y0) = (
            to_cells(self.crop_origin[0])?,
            to_cells(self.crop_origin[1])?,
        );
        ensure!(
            side >= 1 && x0 + side <= size && y0 + side <= size,
            "crop window out of bounds"
        );
        Ok((x0, y0, side))
    }

    /// Source coordinate of output pixel `(x, y)` on an `h x w` grid.
    fn source(
        &self,
        x: usize,
        y: usize,
        h: usize,
        w: usize,
        window: (usize, usize, usize),
    ) -> (f64, f64) {
        let (xf, yf) = (x as f64, y as f64);
        match self.kind {
            TransformKind::Identity => (xf, yf),
            TransformKind::Hflip => ((w - 1 - x) as f64, yf),
            TransformKind::Crop => {
                let (x0, y0, side) = window;
                (
                    x0 as f64 + (xf + 0.5) * side as f64 / w as f64 - 0.5,
                    y0 as f64 + (yf + 0.5) * side as f64 / h as f64 - 0.5,
                )
            }
            TransformKind::Rotate | TransformKind::Scale => {
                // normalised [-1, 1] coordinates about the image centre
                let u = 2.0 * (xf + 0.5) / w as f64 - 1.0;
                let v = 2.0 * (yf + 0.5) / h as f64 - 1.0;
                let (su, sv) = if self.kind == TransformKind::Rotate {
                    let (s, c) = (-self.angle_deg.to_radians()).sin_cos();
                    (c * u - s * v, s * u + c * v)
                } else {
                    (u / self.scale, v / self.scale)
                };
                (
                    (su + 1.0) * 0.5 * w as f64 - 0.5,
                    (sv + 1.0) * 0.5 * h as f64 - 0.5,
                )
            }
        }
    }

    fn window(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if self.kind != TransformKind::Crop {
            return Ok((0, 0, w));
        }
        ensure!(h == w, "crops require square inputs, got {h}x{w}");
        self.crop_cells(w)
    }

    /// Bilinear resampling map for an `h x w` grid.
    pub fn resampler<T: Float>(&self, h: usize, w: usize) -> Result<Resampler<T>> {
        self.validate()?;
        let window = self.window(h, w)?;
        let border = match self.kind {
            TransformKind::Rotate | TransformKind::Scale => Border::Zero,
            _ => Border::Clamp,
        };
        Ok(Resampler::bilinear(h, w, h, w, border, |x, y| {
            self.source(x, y, h, w, window)
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformFamily {
    /// Enabled kinds among identity / hflip / crop.
    pub kinds: Vec<TransformKind>,
    pub crop_ratio: [f64; 2],
    /// Optional rotation extension: degree range.
    pub rotation: Option<[f64; 2]>,
    /// Optional scaling extension: factor range.
    pub scaling: Option<[f64; 2]>,
}

impl Default for TransformFamily {
    fn default() -> Self {
        TransformFamily {
            kinds: vec![TransformKind::Hflip, TransformKind::Crop],
            crop_ratio: [0.6, 1.0],
            rotation: None,
            scaling: None,
        }
    }
}

impl TransformFamily {
    pub fn identity_only() -> Self {
        TransformFamily {
            kinds: vec![TransformKind::Identity],
            ..Self::default()
        }
    }

    fn choices(&self) -> Vec<TransformKind> {
        let mut c = self.kinds.clone();
        if self.rotation.is_some() {
            c.push(TransformKind::Rotate);
        }
        if self.scaling.is_some() {
            c.push(TransformKind::Scale);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.choices().is_empty(),
            "transform family enables no kinds"
        );
        for k in &self.kinds {
            ensure!(
                matches!(
                    k,
                    TransformKind::Identity | TransformKind::Hflip | TransformKind::Crop
                ),
                "rotation/scaling are enabled through their own range fields"
            );
        }
        let [lo, hi] = self.crop_ratio;
        ensure!(
            0.6 <= lo && lo <= hi && hi <= 1.0,
            "crop_ratio range must lie within [0.6, 1.0]"
        );
        if let Some([a, b]) = self.rotation {
            ensure!(a <= b, "rotation range is empty");
        }
        if let Some([a, b]) = self.scaling {
            ensure!(
                0.0 < a && a <= b,
                "scaling range must be positive and nonempty"
            );
        }
        Ok(())
    }
}

/// Draw a transform uniformly from the enabled kinds. Crops are snapped so
/// that their side and origin are whole cells of a `grid_cells`-wide
/// feature grid.
pub fn sample_transform(
    rng: &mut impl Rng,
    family: &TransformFamily,
    grid_cells: usize,
) -> Result<TransformSpec> {
    family.validate()?;
    ensure!(grid_cells >= 1, "grid_cells must be >= 1");
    let choices = family.choices();
    let kind = choices[rng.gen_range(0..choices.len())];
    Ok(match kind {
        TransformKind::Identity => TransformSpec::identity(),
        TransformKind::Hflip => TransformSpec::hflip(),
        TransformKind::Crop => {
            let [lo, hi] = family.crop_ratio;
            let ratio = rng.gen_range(lo..=hi);
            let ox = rng.gen_range(0.0..=1.0 - ratio);
            let oy = rng.gen_range(0.0..=1.0 - ratio);
            let n = grid_cells as f64;
            let min_cells = ((lo * n) - 1e-9).ceil().max(1.0) as usize;
            let max_cells = ((hi * n) + 1e-9).floor() as usize;
            let side = (((ratio * n) - 1e-9).ceil() as usize)
                .clamp(min_cells.min(max_cells), max_cells.max(1));
            let slack = grid_cells - side;
            let snap = |o: f64| ((o * n).round() as usize).min(slack) as f64 / n;
            TransformSpec::crop(side as f64 / n, [snap(ox), snap(oy)])?
        }
        TransformKind::Rotate => {
            let [a, b] = family.rotation.expect("rotation enabled");
            TransformSpec::rotate(rng.gen_range(a..=b))
        }
        TransformKind::Scale => {
            let [a, b] = family.scaling.expect("scaling enabled");
            TransformSpec::scaling(rng.gen_range(a..=b))
        }
    })
}

pub fn apply_to_image(g: &TransformSpec, image: &RgbImage) -> Result<RgbImage> {
    if g.is_identity() {
        return Ok(image.clone());
    }
    let (h, w) = (image.height() as usize, image.width() as usize);
    let map: Resampler<f64> = g.resampler(h, w)?;
    let mut planes = vec![0.0f64; 3 * h * w];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            planes[c * h * w + i] = px.0[c] as f64;
        }
    }
    let out = map.apply(&planes);
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let q = |c: usize| out[c * h * w + i].round().clamp(0.0, 255.0) as u8;
        *px = Rgb([q(0), q(1), q(2)]);
    }
    Ok(img)
}

pub fn apply_to_mask(g: &TransformSpec, mask: &Mask) -> Result<Mask> {
    if g.is_identity() {
        return Ok(mask.clone());
    }
    g.validate()?;
    let (h, w) = mask.dims();
    let window = g.window(h, w)?;
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = g.source(x, y, h, w, window);
            let (ix, iy) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h {
                out.set(y, x, mask.get(iy as usize, ix as usize));
            }
        }
    }
    Ok(out)
}

pub fn apply_to_feature<T: Float>(g: &TransformSpec, fm: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if g.is_identity() {
        return Ok(fm.clone());
    }
    let (d, h, w) = (fm.channels(), fm.height(), fm.width());
    let learned = d - fm.coord_channels;
    let map: Resampler<T> = g.resampler(h, w)?;
    let mut data = map.apply(&fm.values.data()[..learned * h * w]);
    if fm.coord_channels > 0 {
        data.extend_from_slice(coord_grid::<T>(h, w).data());
    }
    FeatureMap::new(
        Tensor::from_vec(&[d, h, w], data)?,
        fm.stride,
        fm.coord_channels,
    )
}

/// [`apply_to_feature`] on a graph node. Identity returns the input node
/// itself; otherwise learned channels are resampled and the coordinate
/// channels are regenerated for the output frame.
pub fn apply_to_feature_var<T: Float>(
    graph: &mut Graph<T>,
    g: &TransformSpec,
    fm: FeatureVar,
) -> Result<FeatureVar> {
    if g.is_identity() {
        return Ok(fm);
    }
    let map = Arc::new(g.resampler::<T>(fm.height, fm.width)?);
    let learned = graph.slice_rows(fm.var, 0, fm.learned_channels())?;
    let warped = graph.resample(learned, map)?;
    let var = if fm.coord_channels > 0 {
        let coords = graph.constant(coord_grid(fm.height, fm.width));
        graph.concat(&[warped, coords])?
    } else {
        warped
    };
    Ok(FeatureVar { var, ..fm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm_from(h: usize, w: usize, d: usize, coords: usize) -> FeatureMap<f64> {
        let learned = d - coords;
        let mut data: Vec<f64> = (0..learned * h * w)
            .map(|i| (i as f64 * 0.731).sin())
            .collect();
        if coords > 0 {
            data.extend_from_slice(coord_grid::<f64>(h, w).data());
        }
        FeatureMap::new(Tensor::from_vec(&[d, h, w], data).unwrap(), 4, coords).unwrap()
    }

    fn test_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(16, 16, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    #[test]
    fn identity_family_samples_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = sample_transform(&mut rng, &TransformFamily::identity_only(), 32).unwrap();
        assert_eq!(g, TransformSpec::identity());
    }

    #[test]
    fn sampled_crops_are_in_range_and_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fam = TransformFamily {
            kinds: vec![TransformKind::Crop],
            ..TransformFamily::default()
        };
        for _ in 0..10_000 {
            let g = sample_transform(&mut rng, &fam, 32).unwrap();
            assert!((0.6..=1.0).contains(&g.crop_ratio), "{}", g.crop_ratio);
            g.crop_cells(32).unwrap();
            // the same spec is pixel-aligned at stride 4
            g.crop_cells(128).unwrap();
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let fam = TransformFamily::default();
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..50)
                .map(|_| sample_transform(&mut r, &fam, 32).unwrap())
                .collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..50)
                .map(|_| sample_transform(&mut r, &fam, 32).unwrap())
                .collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let g = TransformSpec::crop(0.75, [0.25, 0.0]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"kind\":\"crop\""));
        assert_eq!(serde_json::from_str::<TransformSpec>(&s).unwrap(), g);
    }

    #[test]
    fn image_flip_is_an_involution_and_identity_is_exact() {
        let img = test_image(3);
        let f = apply_to_image(&TransformSpec::hflip(), &img).unwrap();
        assert_eq!(f.get_pixel(0, 5), img.get_pixel(15, 5));
        assert_eq!(apply_to_image(&TransformSpec::hflip(), &f).unwrap(), img);
        assert_eq!(
            apply_to_image(&TransformSpec::identity(), &img).unwrap(),
            img
        );
        let full = TransformSpec::crop(1.0, [0.0, 0.0]).unwrap();
        assert_eq!(apply_to_image(&full, &img).unwrap(), img);
    }

    #[test]
    fn unaligned_image_crop_is_rejected() {
        let img = test_image(0);
        let g = TransformSpec::crop(0.61, [0.0, 0.0]).unwrap();
        assert!(apply_to_image(&g, &img).is_err());
    }

    #[test]
    fn mask_flip_and_disjoint_crop() {
        let m = Mask::from_rows(&[&[1, 0], &[0, 0]]).unwrap();
        let f = apply_to_mask(&TransformSpec::hflip(), &m).unwrap();
        assert_eq!(f, Mask::from_rows(&[&[0, 1], &[0, 0]]).unwrap());
        assert_eq!(apply_to_mask(&TransformSpec::identity(), &m).unwrap(), m);

        // support in the top-left corner, crop the bottom-right 6x6 of 10x10
        let mut corner = Mask::empty(10, 10);
        corner.set(0, 0, true);
        corner.set(1, 1, true);
        let g = TransformSpec::crop(0.6, [0.4, 0.4]).unwrap();
        assert!(apply_to_mask(&g, &corner).unwrap().is_empty());
    }

    #[test]
    fn feature_flip_mirrors_columns() {
        let fm = FeatureMap::new(
            Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            1,
            0,
        )
        .unwrap();
        let f = apply_to_feature(&TransformSpec::hflip(), &fm).unwrap();
        assert_eq!(f.values.data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(
            apply_to_feature(&TransformSpec::identity(), &fm).unwrap(),
            fm
        );
    }

    #[test]
    fn feature_flip_keeps_coordinate_channels_canonical() {
        let fm = fm_from(4, 4, 4, 2);
        let f = apply_to_feature(&TransformSpec::hflip(), &fm).unwrap();
        assert_eq!(&f.values.data()[32..], coord_grid::<f64>(4, 4).data());
        assert_eq!(apply_to_feature(&TransformSpec::hflip(), &f).unwrap(), fm);
    }

    #[test]
    fn feature_crop_matches_index_arithmetic() {
        // 4x4 map, crop the 3x3 window at cell (1, 0), resize back to 4x4.
        let fm = fm_from(4, 4, 1, 0);
        let g = TransformSpec::crop(0.75, [0.25, 0.0]).unwrap();
        let out = apply_to_feature(&g, &fm).unwrap();
        let src = fm.values.data();
        let at = |y: usize, x: usize| src[y * 4 + x];
        for oy in 0..4 {
            for ox in 0..4 {
                // output centre (o + 0.5) maps to window coordinate (o + 0.5) * 3/4 - 0.5
                let sy = ((oy as f64 + 0.5) * 0.75 - 0.5).max(0.0);
                let sx = 1.0 + (ox as f64 + 0.5) * 0.75 - 0.5;
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(3));
                let want = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                let got = out.values.data()[oy * 4 + ox];
                assert!((got - want).abs() < 1e-12, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn unaligned_feature_crop_is_rejected() {
        let fm = fm_from(4, 4, 1, 0);
        let g = TransformSpec::crop(0.7, [0.0, 0.0]).unwrap();
        assert!(apply_to_feature(&g, &fm).is_err());
    }

    #[test]
    fn rotation_and_scaling_keep_masks_binary_and_disjoint() {
        let a =
            Mask::from_rows(&[&[1, 1, 0, 0], &[1, 1, 0, 0], &[0, 0, 0, 0], &[0, 0, 0, 0]]).unwrap();
        let b =
            Mask::from_rows(&[&[0, 0, 0, 0], &[0, 0, 1, 1], &[0, 0, 1, 1], &[0, 0, 0, 0]]).unwrap();
        for g in [
            TransformSpec::rotate(30.0),
            TransformSpec::scaling(1.3),
            TransformSpec::scaling(0.8),
        ] {
            let (ta, tb) = (
                apply_to_mask(&g, &a).unwrap(),
                apply_to_mask(&g, &b).unwrap(),
            );
            assert_eq!(ta.intersection(&tb), 0);
        }
    }

    #[test]
    fn graph_and_value_feature_paths_agree() {
        let fm = fm_from(4, 4, 5, 2);
        let g = TransformSpec::crop(0.75, [0.0, 0.25]).unwrap();
        let mut graph = Graph::<f64>::new();
        let var = graph.constant(fm.values.clone());
        let fv = FeatureVar {
            var,
            channels: 5,
            height: 4,
            width: 4,
            stride: 4,
            coord_channels: 2,
        };
        let out = apply_to_feature_var(&mut graph, &g, fv).unwrap();
        assert_eq!(
            graph.value(out.var),
            &apply_to_feature(&g, &fm).unwrap().values
        );
        let same = apply_to_feature_var(&mut graph, &TransformSpec::identity(), fv).unwrap();
        assert_eq!(same.var, var);
    }
}
