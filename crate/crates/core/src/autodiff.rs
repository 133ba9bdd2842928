//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! One graph is built per forward pass. Nodes are appended in evaluation
//! order, so a reverse sweep over the node list is a valid backward order.
//! Values copied out of a graph carry no linkage back into it.

use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::float::{gemm, Float, MatRef};
use crate::resample::Resampler;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
        /// im2col buffer, empty for 1x1/stride-1 convolutions.
        cols: Vec<T>,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Resample(Var, Arc<Resampler<T>>),
    SliceRows {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    DynamicFilter {
        queries: Var,
        features: Var,
    },
    /// Scalar function of one input whose local gradient was computed eagerly.
    ScalarFn {
        input: Var,
        local_grad: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GN_EPS: f64 = 1e-5;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        ensure!(
            xs.len() == 3 && ws.len() == 4,
            "conv2d expects [C,H,W] input and [O,C,k,k] weight"
        );
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        ensure!(
            ws[1] == c && ws[3] == k,
            "conv2d weight {:?} does not fit input {:?}",
            ws,
            xs
        );
        ensure!(
            stride >= 1 && h + 2 * pad >= k && w + 2 * pad >= k,
            "conv2d geometry invalid"
        );
        if let Some(b) = bias {
            ensure!(self.shape(b) == [o], "conv2d bias must have shape [{}]", o);
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let cols = if pointwise {
            Vec::new()
        } else {
            im2col(self.value(input).data(), c, h, w, k, stride, pad, ho, wo)
        };
        let mut out = vec![T::zero(); o * p];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let colsref = if pointwise { x } else { &cols[..] };
            gemm(
                MatRef::new(wt, o, c * k * k),
                MatRef::new(colsref, c * k * k, p),
                T::zero(),
                &mut out,
            );
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (row, &bb) in out.chunks_exact_mut(p).zip(bv) {
                    for v in row {
                        *v += bb;
                    }
                }
            }
        }
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::from_vec(&[o, ho, wo], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel: k,
                stride,
                pad,
                cols,
            },
            ng,
        ))
    }

    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        ensure!(xs.len() == 3, "group_norm expects [C,H,W]");
        let c = xs[0];
        ensure!(
            groups >= 1 && c % groups == 0,
            "{} channels not divisible into {} groups",
            c,
            groups
        );
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "group_norm affine shape"
        );
        let hw = xs[1] * xs[2];
        let gsize = c / groups * hw;
        let x = self.value(input).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); groups];
        let mut out = vec![T::zero(); x.len()];
        let n = T::of(gsize as f64);
        for g in 0..groups {
            let seg = &x[g * gsize..(g + 1) * gsize];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + T::of(GN_EPS)).sqrt();
            rstd[g] = r;
            for (i, &v) in seg.iter().enumerate() {
                xhat[g * gsize + i] = (v - mean) * r;
            }
        }
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                out[i] = xhat[i] * gm[ch] + bt[ch];
            }
        }
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_vec(&xs, out)?,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Silu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            "add shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Concatenate along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            ensure!(
                s[1..] == tail[..],
                "concat trailing shapes differ: {:?} vs {:?}",
                s,
                tail
            );
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Apply a spatial resampling map to every plane of a `[C,H,W]` tensor.
    pub fn resample(&mut self, x: Var, map: Arc<Resampler<T>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            s.len() == 3 && s[1] == map.in_h && s[2] == map.in_w,
            "resample input {:?} does not match map {}x{}",
            s,
            map.in_h,
            map.in_w
        );
        let out = map.apply(self.value(x).data());
        let t = Tensor::from_vec(&[s[0], map.out_h, map.out_w], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Resample(x, map), ng))
    }

    /// Rows `start..start+len` of the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            start + len <= s[0],
            "slice {}..{} out of range {}",
            start,
            start + len,
            s[0]
        );
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::SliceRows { input: x, start },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Transpose of a matrix, or of a `[C,H,W]` tensor viewed as `C x (H*W)`
    /// (yielding `[H*W, C]`).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() >= 2, "transpose needs at least 2 dims");
        let rows = s[0];
        let cols: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[cols, rows], out)?, Op::Transpose(x), ng))
    }

    /// Dynamic 1x1 filtering: `out[n] = W_n . F + b_n` where each query row
    /// holds `D` weights followed by one bias.
    pub fn dynamic_filter(&mut self, queries: Var, features: Var) -> Result<Var> {
        let (qs, fs) = (self.shape(queries).to_vec(), self.shape(features).to_vec());
        ensure!(
            qs.len() == 2 && fs.len() == 3,
            "dynamic_filter expects [N,D+1] and [D,H,W]"
        );
        ensure!(
            qs[1] == fs[0] + 1,
            "filter length {} does not match {} feature channels (+1 bias)",
            qs[1],
            fs[0]
        );
        let (n, d, p) = (qs[0], fs[0], fs[1] * fs[2]);
        let q = self.value(queries).data();
        let f = self.value(features).data();
        let mut out = vec![T::zero(); n * p];
        for (row, qrow) in out.chunks_exact_mut(p).zip(q.chunks_exact(d + 1)) {
            row.fill(qrow[d]);
        }
        gemm(
            MatRef::with_ld(q, n, d, d + 1),
            MatRef::new(f, d, p),
            T::one(),
            &mut out,
        );
        let ng = self.ng(queries) || self.ng(features);
        Ok(self.push(
            Tensor::from_vec(&[n, fs[1], fs[2]], out)?,
            Op::DynamicFilter { queries, features },
            ng,
        ))
    }

    /// Record a scalar function of `input` with an eagerly computed gradient.
    pub fn scalar_fn(&mut self, input: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        ensure!(
            local_grad.len() == self.value(input).len(),
            "local gradient length mismatch"
        );
        let ng = self.ng(input);
        Ok(self.push(
            Tensor::scalar(value),
            Op::ScalarFn { input, local_grad },
            ng,
        ))
    }

    /// `sum_i c_i * x_i` over scalar nodes. An empty sum is the constant 0.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, c) in terms {
            ensure!(
                self.value(v).len() == 1,
                "weighted_sum terms must be scalars"
            );
            acc += c * self.value(v).item();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let xs = self.shape(*input);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let os = node.value.shape();
                let (o, ho, wo) = (os[0], os[1], os[2]);
                let p = ho * wo;
                let ck = c * kernel * kernel;
                let colsref: &[T] = if cols.is_empty() {
                    self.value(*input).data()
                } else {
                    cols
                };
                if let Some(b) = bias {
                    if self.ng(*b) {
                        let gb = acc(grads, *b, o);
                        for (gbv, row) in gb.iter_mut().zip(g.chunks_exact(p)) {
                            *gbv += row.iter().copied().sum::<T>();
                        }
                    }
                }
                if self.ng(*weight) {
                    let gw = acc(grads, *weight, o * ck);
                    gemm(
                        MatRef::new(g, o, p),
                        MatRef::new(colsref, ck, p).t(),
                        T::one(),
                        gw,
                    );
                }
                if self.ng(*input) {
                    let wt = self.value(*weight).data();
                    if cols.is_empty() {
                        let gx = acc(grads, *input, c * h * w);
                        gemm(
                            MatRef::new(wt, o, ck).t(),
                            MatRef::new(g, o, p),
                            T::one(),
                            gx,
                        );
                    } else {
                        let mut gcols = vec![T::zero(); ck * p];
                        gemm(
                            MatRef::new(wt, o, ck).t(),
                            MatRef::new(g, o, p),
                            T::zero(),
                            &mut gcols,
                        );
                        let gx = acc(grads, *input, c * h * w);
                        col2im_add(&gcols, gx, c, h, w, *kernel, *stride, *pad, ho, wo);
                    }
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let xs = self.shape(*input);
                let c = xs[0];
                let hw = xs[1] * xs[2];
                let gm = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ch in 0..c {
                        for i in ch * hw..(ch + 1) * hw {
                            dg[ch] += g[i] * xhat[i];
                            db[ch] += g[i];
                        }
                    }
                    if self.ng(*gamma) {
                        add_into(acc(grads, *gamma, c), &dg);
                    }
                    if self.ng(*beta) {
                        add_into(acc(grads, *beta, c), &db);
                    }
                }
                if self.ng(*input) {
                    let gsize = c / groups * hw;
                    let n = T::of(gsize as f64);
                    let mut dx = vec![T::zero(); c * hw];
                    for grp in 0..*groups {
                        let range = grp * gsize..(grp + 1) * gsize;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for i in range.clone() {
                            let d = g[i] * gm[i / hw];
                            sum_d += d;
                            sum_dx += d * xhat[i];
                        }
                        for i in range {
                            let d = g[i] * gm[i / hw];
                            dx[i] = rstd[grp] / n * (n * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                    add_into(acc(grads, *input, c * hw), &dx);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, xv.len());
                for ((gxi, &xi), &gi) in gx.iter_mut().zip(xv).zip(g) {
                    let s = sigmoid(xi);
                    *gxi += gi * s * (T::one() + xi * (T::one() - s));
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                let gx = acc(grads, *x, yv.len());
                for ((gxi, &y), &gi) in gx.iter_mut().zip(yv).zip(g) {
                    *gxi += gi * y * (T::one() - y);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        add_into(acc(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Resample(x, map) => {
                let len = self.value(*x).len();
                map.accumulate_transpose(g, acc(grads, *x, len));
            }
            Op::SliceRows { input, start } => {
                let s = self.shape(*input);
                let row: usize = s[1..].iter().product();
                let len = self.value(*input).len();
                let gx = acc(grads, *input, len);
                add_into(&mut gx[start * row..start * row + g.len()], g);
            }
            Op::Reshape(x) => add_into(acc(grads, *x, g.len()), g),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let rows = s[0];
                let cols: usize = s[1..].iter().product();
                let gx = acc(grads, *x, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            Op::DynamicFilter { queries, features } => {
                let qs = self.shape(*queries);
                let fs = self.shape(*features);
                let (n, d, p) = (qs[0], fs[0], fs[1] * fs[2]);
                if self.ng(*queries) {
                    let f = self.value(*features).data();
                    let mut gw = vec![T::zero(); n * d];
                    gemm(
                        MatRef::new(g, n, p),
                        MatRef::new(f, d, p).t(),
                        T::zero(),
                        &mut gw,
                    );
                    let gq = acc(grads, *queries, n * (d + 1));
                    for i in 0..n {
                        for j in 0..d {
                            gq[i * (d + 1) + j] += gw[i * d + j];
                        }
                        gq[i * (d + 1) + d] += g[i * p..(i + 1) * p].iter().copied().sum::<T>();
                    }
                }
                if self.ng(*features) {
                    let q = self.value(*queries).data();
                    let gf = acc(grads, *features, d * p);
                    gemm(
                        MatRef::with_ld(q, n, d, d + 1).t(),
                        MatRef::new(g, n, p),
                        T::one(),
                        gf,
                    );
                }
            }
            Op::ScalarFn { input, local_grad } => {
                let gx = acc(grads, *input, local_grad.len());
                let up = g[0];
                for (a, &b) in gx.iter_mut().zip(local_grad) {
                    *a += up * b;
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.ng(v) {
                        acc(grads, v, 1)[0] += c * g[0];
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the root with respect to `v`; `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but materialises zeros for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn acc<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Float>(
    cols: &[T],
    gx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` at every entry of the leaf values.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn weighted_total(g: &mut Graph<f64>, v: Var) -> Var {
        // sum_i (i+1)*0.1 * v_i, as a scalar node
        let n = g.value(v).len();
        let coeffs: Vec<f64> = (0..n).map(|i| (i + 1) as f64 * 0.1).collect();
        let val = g
            .value(v)
            .data()
            .iter()
            .zip(&coeffs)
            .map(|(a, b)| a * b)
            .sum();
        g.scalar_fn(v, val, coeffs).unwrap()
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i as f64) * 0.37 + 0.1).sin() * scale)
            .collect()
    }

    fn check(shape_x: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let n: usize = shape_x.iter().product();
        let x0 = seq(n, 1.3);
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let v = g.param(Tensor::from_vec(shape_x, x.to_vec()).unwrap());
            let y = build(&mut g, v);
            let r = weighted_total(&mut g, y);
            g.value(r).item()
        };
        let mut g = Graph::new();
        let v = g.param(Tensor::from_vec(shape_x, x0.clone()).unwrap());
        let y = build(&mut g, v);
        let r = weighted_total(&mut g, y);
        let analytic = g.backward(r).get(v).unwrap().to_vec();
        let numeric = numeric_grad(&x0, eval);
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn conv_input_gradient() {
        let w = seq(3 * 2 * 9, 0.5);
        check(&[2, 5, 6], |g, x| {
            let wv = g.constant(Tensor::from_vec(&[3, 2, 3, 3], w.clone()).unwrap());
            g.conv2d(x, wv, None, 2, 1).unwrap()
        });
    }

    #[test]
    fn conv_weight_and_bias_gradient() {
        let xin = seq(2 * 5 * 5, 1.0);
        check(&[3, 2, 3, 3], |g, w| {
            let x = g.constant(Tensor::from_vec(&[2, 5, 5], xin.clone()).unwrap());
            let b = g.constant(Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap());
            g.conv2d(x, w, Some(b), 1, 1).unwrap()
        });
        check(&[3], |g, b| {
            let x = g.constant(Tensor::from_vec(&[2, 5, 5], xin.clone()).unwrap());
            let w = g.constant(Tensor::from_vec(&[3, 2, 1, 1], seq(6, 1.0)).unwrap());
            g.conv2d(x, w, Some(b), 1, 0).unwrap()
        });
    }

    #[test]
    fn group_norm_gradients() {
        check(&[4, 3, 3], |g, x| {
            let gm = g.constant(Tensor::from_vec(&[4], vec![1.0, 0.5, -1.0, 2.0]).unwrap());
            let bt = g.constant(Tensor::from_vec(&[4], vec![0.0, 0.1, 0.2, 0.3]).unwrap());
            let y = g.group_norm(x, gm, bt, 2).unwrap();
            g.silu(y)
        });
        check(&[4], |g, gm| {
            let x = g.constant(Tensor::from_vec(&[4, 2, 2], seq(16, 2.0)).unwrap());
            let bt = g.constant(Tensor::zeros(&[4]));
            g.group_norm(x, gm, bt, 4).unwrap()
        });
    }

    #[test]
    fn dynamic_filter_gradients() {
        let f = seq(3 * 2 * 2, 1.0);
        check(&[2, 4], |g, q| {
            let fv = g.constant(Tensor::from_vec(&[3, 2, 2], f.clone()).unwrap());
            g.dynamic_filter(q, fv).unwrap()
        });
        check(&[3, 2, 2], |g, fv| {
            let q = g.constant(Tensor::from_vec(&[2, 4], seq(8, 0.7)).unwrap());
            g.dynamic_filter(q, fv).unwrap()
        });
    }

    #[test]
    fn structural_op_gradients() {
        let map = Arc::new(Resampler::resize(3, 2, 5, 7));
        check(&[2, 3, 2], |g, x| g.resample(x, map.clone()).unwrap());
        check(&[3, 4], |g, x| {
            let s = g.slice_rows(x, 1, 2).unwrap();
            let t = g.transpose(s).unwrap();
            let c = g.concat(&[x, x]).unwrap();
            let c = g.reshape(c, &[24]).unwrap();
            let t = g.reshape(t, &[8]).unwrap();
            let t2 = g.sigmoid(t);
            let c2 = g.slice_rows(c, 0, 8).unwrap();
            g.add(t2, c2).unwrap()
        });
    }

    #[test]
    fn dynamic_filter_hand_example() {
        // 2x2 single-channel features, weight 1, bias 0
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let q = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let out = g.dynamic_filter(q, f).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.shape(out), &[1, 2, 2]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let p = g.param(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let s = g.add(c, p).unwrap();
        let r = g.scalar_fn(s, 10.0, vec![1.0, 1.0]).unwrap();
        let grads = g.backward(r);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &[1.0, 1.0]);
    }
}
