//! Sparse spatial resampling maps shared by every per-channel geometric
//! operation: bilinear up/down-sampling, pooling, flips, crops and warps.
//!
//! A map is a CSR matrix from input pixels to output pixels that is applied
//! identically to every channel, so its transpose gives the backward pass.

use crate::float::Float;

/// How samples falling outside the input are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Clamp source coordinates into the input (edge replication).
    Clamp,
    /// Out-of-range taps contribute zero.
    Zero,
}

#[derive(Debug, Clone)]
pub struct Resampler<T> {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    row_ptr: Vec<u32>,
    src: Vec<u32>,
    weight: Vec<T>,
}

impl<T: Float> Resampler<T> {
    /// Bilinear sampling where `map(ox, oy)` returns the continuous source
    /// coordinate (in input pixel units, pixel centres at integers) for
    /// output pixel `(ox, oy)`.
    pub fn bilinear(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        border: Border,
        map: impl Fn(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut row_ptr = Vec::with_capacity(out_h * out_w + 1);
        let mut src = Vec::with_capacity(out_h * out_w * 4);
        let mut weight = Vec::with_capacity(out_h * out_w * 4);
        row_ptr.push(0u32);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (mut sx, mut sy) = map(ox, oy);
                if border == Border::Clamp {
                    sx = sx.clamp(0.0, (in_w - 1) as f64);
                    sy = sy.clamp(0.0, (in_h - 1) as f64);
                }
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let (x0, y0) = (x0 as i64, y0 as i64);
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1, (1.0 - fy) * fx),
                    (y0 + 1, x0, fy * (1.0 - fx)),
                    (y0 + 1, x0 + 1, fy * fx),
                ];
                for (ty, tx, w) in taps {
                    if w == 0.0 || ty < 0 || tx < 0 || ty >= in_h as i64 || tx >= in_w as i64 {
                        continue;
                    }
                    src.push((ty as usize * in_w + tx as usize) as u32);
                    weight.push(T::of(w));
                }
                row_ptr.push(src.len() as u32);
            }
        }
        Resampler {
            in_h,
            in_w,
            out_h,
            out_w,
            row_ptr,
            src,
            weight,
        }
    }

    /// Bilinear resize with the pixel-centre convention (`align_corners = false`).
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let sy = in_h as f64 / out_h as f64;
        let sx = in_w as f64 / out_w as f64;
        Self::bilinear(in_h, in_w, out_h, out_w, Border::Clamp, |ox, oy| {
            ((ox as f64 + 0.5) * sx - 0.5, (oy as f64 + 0.5) * sy - 0.5)
        })
    }

    /// Adaptive average pooling onto an `out_h x out_w` grid.
    ///
    /// Cell `i` averages input rows `floor(i*in/out) .. ceil((i+1)*in/out)`,
    /// so it also works when the grid is finer than the input.
    pub fn adaptive_avg_pool(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let range = |i: usize, n_in: usize, n_out: usize| {
            let start = i * n_in / n_out;
            let end = ((i + 1) * n_in).div_ceil(n_out);
            start..end.max(start + 1)
        };
        let mut row_ptr = vec![0u32];
        let mut src = Vec::new();
        let mut weight = Vec::new();
        for oy in 0..out_h {
            for ox in 0..out_w {
                let ys = range(oy, in_h, out_h);
                let xs = range(ox, in_w, out_w);
                let w = 1.0 / (ys.len() * xs.len()) as f64;
                for y in ys {
                    for x in xs.clone() {
                        src.push((y * in_w + x) as u32);
                        weight.push(T::of(w));
                    }
                }
                row_ptr.push(src.len() as u32);
            }
        }
        Resampler {
            in_h,
            in_w,
            out_h,
            out_w,
            row_ptr,
            src,
            weight,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Resample each of `channels` planes of `input` into `out`.
    pub fn apply_into(&self, input: &[T], out: &mut [T]) {
        let (il, ol) = (self.in_len(), self.out_len());
        debug_assert_eq!(input.len() / il, out.len() / ol);
        for (plane_in, plane_out) in input.chunks_exact(il).zip(out.chunks_exact_mut(ol)) {
            for (o, v) in plane_out.iter_mut().enumerate() {
                let (a, b) = (self.row_ptr[o] as usize, self.row_ptr[o + 1] as usize);
                let mut acc = T::zero();
                for t in a..b {
                    acc += self.weight[t] * plane_in[self.src[t] as usize];
                }
                *v = acc;
            }
        }
    }

    pub fn apply(&self, input: &[T]) -> Vec<T> {
        let channels = input.len() / self.in_len();
        let mut out = vec![T::zero(); channels * self.out_len()];
        self.apply_into(input, &mut out);
        out
    }

    /// Accumulate the transpose map: `grad_in += R^T grad_out`, per plane.
    pub fn accumulate_transpose(&self, grad_out: &[T], grad_in: &mut [T]) {
        let (il, ol) = (self.in_len(), self.out_len());
        for (g_out, g_in) in grad_out.chunks_exact(ol).zip(grad_in.chunks_exact_mut(il)) {
            for (o, &g) in g_out.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let (a, b) = (self.row_ptr[o] as usize, self.row_ptr[o + 1] as usize);
                for t in a..b {
                    g_in[self.src[t] as usize] += self.weight[t] * g;
                }
            }
        }
    }
}
