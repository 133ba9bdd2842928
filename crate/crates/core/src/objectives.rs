//! Loss functions.
//!
//! Primitives return the value together with the gradient with respect to
//! their input so that graph nodes can be recorded with [`Graph::scalar_fn`].
//! The composite losses build those nodes from segmenter outputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::features::FeatureVar;
use crate::float::Float;
use crate::mask::Mask;
use crate::matching::Assignment;
use crate::memory::MemorySnapshot;
use crate::segmenter::decode_masks_var;
use crate::tensor::Tensor;
use crate::transform::{apply_to_feature_var, apply_to_mask, TransformSpec};

/// Weight of "no object" terms in the classification loss.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterLossKind {
    Focal,
    L1,
    L2,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda_equi: f64,
    pub dice_eps: f64,
    pub inter_loss_kind: InterLossKind,
    pub w_cls: f64,
    pub w_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.1,
            focal_gamma: 2.5,
            lambda_equi: 3.0,
            dice_eps: 1e-6,
            inter_loss_kind: InterLossKind::Focal,
            w_cls: 1.0,
            w_dice: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad("focal_alpha must lie in (0, 1)");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be >= 0");
        }
        if !(self.lambda_equi >= 0.0) {
            return bad("lambda_equi must be >= 0");
        }
        if !(self.dice_eps > 0.0) {
            return bad("dice_eps must be > 0");
        }
        if !(self.w_cls >= 0.0 && self.w_dice >= 0.0) {
            return bad("matching weights must be >= 0");
        }
        Ok(())
    }
}

/// Per-step loss values, averaged over the scenes of a batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub intra_mask: f64,
    pub inter_mask: f64,
    pub equi: f64,
    pub total: f64,
    pub matched_pairs: usize,
    pub memory_pixels: usize,
}

impl LossReport {
    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("cls", self.cls),
            ("intra_mask", self.intra_mask),
            ("inter_mask", self.inter_mask),
            ("equi", self.equi),
            ("total", self.total),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.components().iter().all(|(_, v)| v.is_finite())
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    ensure!(a == b, "shape mismatch: {a} values vs {b} targets");
    Ok(())
}

/// Mean sigmoid focal loss and its gradient with respect to the logits.
///
/// Written with `softplus` so that `-ln p` and `-ln(1-p)` stay finite for
/// saturated logits.
pub fn focal_loss<T: Float>(
    logits: &[T],
    targets: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<(T, Vec<T>)> {
    same_len(logits.len(), targets.len())?;
    if logits.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let (a, g) = (T::of(alpha), T::of(gamma));
    let inv_n = T::one() / T::of(logits.len() as f64);
    let mut sum = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.iter().zip(targets) {
        let p = sigmoid(x);
        let q = sigmoid(-x);
        if t {
            let u = softplus(-x);
            sum += a * q.powf(g) * u;
            grad.push(-a * q.powf(g) * (g * p * u + q) * inv_n);
        } else {
            let s = softplus(x);
            sum += (T::one() - a) * p.powf(g) * s;
            grad.push((T::one() - a) * p.powf(g) * (g * q * s + p) * inv_n);
        }
    }
    Ok((sum * inv_n, grad))
}

/// Dice loss `1 - (2 sum pm + eps) / (sum p^2 + sum m^2 + eps)` and its
/// gradient with respect to `probs`.
pub fn dice_loss<T: Float>(probs: &[T], target: &[bool], eps: f64) -> Result<(T, Vec<T>)> {
    same_len(probs.len(), target.len())?;
    let eps = T::of(eps);
    let mut pm = T::zero();
    let mut pp = T::zero();
    let mut mm = T::zero();
    for (&p, &m) in probs.iter().zip(target) {
        pp += p * p;
        if m {
            pm += p;
            mm += T::one();
        }
    }
    let a = T::of(2.0) * pm + eps;
    let b = pp + mm + eps;
    let two = T::of(2.0);
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &m)| {
            let mv = if m { T::one() } else { T::zero() };
            -(two * mv * b - a * two * p) / (b * b)
        })
        .collect();
    Ok((T::one() - a / b, grad))
}

/// Dice loss of `sigmoid(logits)`; gradient with respect to the logits.
pub fn dice_loss_logits<T: Float>(logits: &[T], target: &[bool], eps: f64) -> Result<(T, Vec<T>)> {
    let probs: Vec<T> = logits.iter().map(|&x| sigmoid(x)).collect();
    let (v, mut g) = dice_loss(&probs, target, eps)?;
    for (gi, &p) in g.iter_mut().zip(&probs) {
        *gi *= p * (T::one() - p);
    }
    Ok((v, g))
}

/// Per-pair loss against target 0 for the inter-scene term; returns value
/// and derivative with respect to the logit.
fn negative_pair_loss<T: Float>(x: T, kind: InterLossKind, alpha: T, gamma: T) -> (T, T) {
    let p = sigmoid(x);
    match kind {
        InterLossKind::Focal => {
            let q = sigmoid(-x);
            let s = softplus(x);
            let w = (T::one() - alpha) * p.powf(gamma);
            (w * s, w * (gamma * q * s + p))
        }
        InterLossKind::L1 => (p, p * (T::one() - p)),
        InterLossKind::L2 => (p * p, T::of(2.0) * p * p * (T::one() - p)),
        InterLossKind::CrossEntropy => (softplus(x), p),
    }
}

/// Mean per-pair loss over a set of logits, all with target 0.
pub fn negative_pairs_loss<T: Float>(logits: &[T], cfg: &LossConfig) -> (T, Vec<T>) {
    if logits.is_empty() {
        return (T::zero(), Vec::new());
    }
    let (a, g) = (T::of(cfg.focal_alpha), T::of(cfg.focal_gamma));
    let inv_n = T::one() / T::of(logits.len() as f64);
    let mut sum = T::zero();
    let grad = logits
        .iter()
        .map(|&x| {
            let (v, d) = negative_pair_loss(x, cfg.inter_loss_kind, a, g);
            sum += v;
            d * inv_n
        })
        .collect();
    (sum * inv_n, grad)
}

/// Weighted mean cross-entropy: matched queries target their class label,
/// unmatched ones target "no object" (column 0) with weight
/// [`NO_OBJECT_WEIGHT`]. The mean is normalised by the total weight.
pub fn classification_loss<T: Float>(
    class_logits: &Tensor<T>,
    assignment: &Assignment,
    labels: &[u32],
) -> Result<(T, Vec<T>)> {
    let s = class_logits.shape();
    ensure!(s.len() == 2 && s[1] >= 2, "class logits must be [N, C+1]");
    let (n, cols) = (s[0], s[1]);
    let mut target = vec![0usize; n];
    let mut weight = vec![T::of(NO_OBJECT_WEIGHT); n];
    for &(qn, k) in &assignment.pairs {
        ensure!(
            qn < n && k < labels.len(),
            "assignment pair ({qn},{k}) out of range"
        );
        let c = labels[k] as usize;
        ensure!(c >= 1 && c < cols, "label {c} outside 1..={}", cols - 1);
        target[qn] = c;
        weight[qn] = T::one();
    }
    let wsum: T = weight.iter().copied().sum();
    let mut value = T::zero();
    let mut grad = vec![T::zero(); n * cols];
    for (i, row) in class_logits.data().chunks_exact(cols).enumerate() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        value += weight[i] * (lse - row[target[i]]);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let y = if j == target[i] { T::one() } else { T::zero() };
            grad[i * cols + j] = weight[i] * (p - y) / wsum;
        }
    }
    Ok((value / wsum, grad))
}

/// Classification loss node over `[N, C+1]` logits.
pub fn classification_loss_var<T: Float>(
    graph: &mut Graph<T>,
    class_logits: Var,
    assignment: &Assignment,
    labels: &[u32],
) -> Result<Var> {
    let (v, g) = classification_loss(graph.value(class_logits), assignment, labels)?;
    graph.scalar_fn(class_logits, v, g)
}

/// Mean dice loss over the matched pairs of `[N, H, W]` mask logits; the
/// constant 0 when nothing is matched.
pub fn matched_dice<T: Float>(
    graph: &mut Graph<T>,
    mask_logits: Var,
    assignment: &Assignment,
    targets: &[Mask],
    eps: f64,
) -> Result<Var> {
    let s = graph.shape(mask_logits).to_vec();
    ensure!(s.len() == 3, "mask logits must be [N,H,W]");
    if assignment.pairs.is_empty() {
        return graph.weighted_sum(&[]);
    }
    let w = T::one() / T::of(assignment.pairs.len() as f64);
    let mut terms = Vec::with_capacity(assignment.pairs.len());
    for &(n, k) in &assignment.pairs {
        ensure!(
            n < s[0] && k < targets.len(),
            "assignment pair ({n},{k}) out of range"
        );
        ensure!(
            targets[k].dims() == (s[1], s[2]),
            "target mask shape differs from predictions"
        );
        let row = graph.slice_rows(mask_logits, n, 1)?;
        let (v, g) = dice_loss_logits(graph.value(row).data(), targets[k].data(), eps)?;
        terms.push((graph.scalar_fn(row, v, g)?, w));
    }
    graph.weighted_sum(&terms)
}

/// Intra-scene mask loss: the classical mask term over matched pairs.
pub fn intra_mask_loss<T: Float>(
    graph: &mut Graph<T>,
    mask_logits: Var,
    assignment: &Assignment,
    masks: &[Mask],
    eps: f64,
) -> Result<Var> {
    matched_dice(graph, mask_logits, assignment, masks, eps)
}

/// Inter-scene loss: every query of `scene_id` against every memory
/// embedding from another scene, target 0, averaged over pairs. Memory
/// entries enter as constants, so no gradient reaches whatever produced
/// them.
pub fn inter_mask_loss<T: Float>(
    graph: &mut Graph<T>,
    filters: Var,
    scene_id: &str,
    memory: &MemorySnapshot<T>,
    cfg: &LossConfig,
) -> Result<(Var, usize)> {
    let fs = graph.shape(filters).to_vec();
    ensure!(fs.len() == 2, "filters must be [N, D+1]");
    ensure!(
        fs[1] == memory.dim + 1,
        "filter length {} does not match memory embedding length {} (+1 bias)",
        fs[1],
        memory.dim
    );
    let keep: Vec<usize> = (0..memory.len())
        .filter(|&i| memory.provenance[i].scene_id != scene_id)
        .collect();
    if keep.is_empty() {
        return Ok((graph.weighted_sum(&[])?, 0));
    }
    // memory as a [D, 1, M] "feature map" so the dynamic filter does the GEMM
    let (d, m) = (memory.dim, keep.len());
    let mut cols = vec![T::zero(); d * m];
    for (j, &i) in keep.iter().enumerate() {
        for c in 0..d {
            cols[c * m + j] = memory.embeddings[i * d + c];
        }
    }
    let e = graph.constant(Tensor::from_vec(&[d, 1, m], cols)?);
    let logits = graph.dynamic_filter(filters, e)?;
    let (v, g) = negative_pairs_loss(graph.value(logits).data(), cfg);
    Ok((graph.scalar_fn(logits, v, g)?, m))
}

/// Transformed-branch decoding: `queries_g` applied to `g` of the original
/// feature map, with targets `g` of the groundtruth masks.
#[derive(Debug, Clone)]
pub struct EquiBranch {
    /// `[N, H, W]` mask logits.
    pub mask_logits: Var,
    pub targets: Vec<Mask>,
}

pub fn equivariance_decode<T: Float>(
    graph: &mut Graph<T>,
    filters_g: Var,
    fm: FeatureVar,
    g: &TransformSpec,
    masks: &[Mask],
) -> Result<EquiBranch> {
    let warped = apply_to_feature_var(graph, g, fm)?;
    let mask_logits = decode_masks_var(graph, filters_g, warped)?;
    let targets = masks
        .iter()
        .map(|m| apply_to_mask(g, m))
        .collect::<Result<_>>()?;
    Ok(EquiBranch {
        mask_logits,
        targets,
    })
}

/// Equivariance loss: mean dice over matched pairs of the transformed
/// branch.
pub fn equivariance_loss<T: Float>(
    graph: &mut Graph<T>,
    branch: &EquiBranch,
    assignment: &Assignment,
    eps: f64,
) -> Result<Var> {
    matched_dice(graph, branch.mask_logits, assignment, &branch.targets, eps)
}

/// Loss nodes of one scene.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub cls: Var,
    pub intra: Var,
    pub inter: Var,
    pub equi: Var,
    pub matched_pairs: usize,
    pub memory_pixels: usize,
}

/// `cls + intra + inter + lambda * equi`, with a report of the values.
pub fn total_objective<T: Float>(
    graph: &mut Graph<T>,
    parts: &LossParts,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    let val = |g: &Graph<T>, v: Var| g.value(v).item().as_f64();
    let mut report = LossReport {
        cls: val(graph, parts.cls),
        intra_mask: val(graph, parts.intra),
        inter_mask: val(graph, parts.inter),
        equi: val(graph, parts.equi),
        total: 0.0,
        matched_pairs: parts.matched_pairs,
        memory_pixels: parts.memory_pixels,
    };
    let one = T::one();
    let total = graph.weighted_sum(&[
        (parts.cls, one),
        (parts.intra, one),
        (parts.inter, one),
        (parts.equi, T::of(cfg.lambda_equi)),
    ])?;
    report.total = val(graph, total);
    if !report.all_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite loss component: {report:?}"),
            last_good: String::new(),
        });
    }
    Ok((total, report))
}

/// Total from plain component values (used for reporting and checks).
pub fn combine(cls: f64, intra: f64, inter: f64, equi: f64, lambda: f64) -> f64 {
    cls + intra + inter + lambda * equi
}
