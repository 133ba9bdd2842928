//! Slow reference implementations used to cross-check the fast paths.
//!
//! Nothing here calls into the code it verifies: each function restates
//! its definition directly (plain formulas, exhaustive enumeration).

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::error::{ensure, Result};
use crate::eval::{APReport, Detection, GroundTruth};
use crate::mask::Mask;

/// Focal loss of one logit, straight from the textbook formula.
pub fn focal_scalar(x: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    if target {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

pub fn focal_mean(xs: &[f64], ts: &[bool], alpha: f64, gamma: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..xs.len() {
        s += focal_scalar(xs[i], ts[i], alpha, gamma);
    }
    s / xs.len() as f64
}

pub fn dice_scalar(p: &[f64], m: &[bool], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sm = 0.0;
    for i in 0..p.len() {
        let mi = if m[i] { 1.0 } else { 0.0 };
        inter += p[i] * mi;
        sp += p[i] * p[i];
        sm += mi * mi;
    }
    1.0 - (2.0 * inter + eps) / (sp + sm + eps)
}

/// Every injective map of `k` groundtruth indices into `n` predictions, as
/// `assign[k] = n`.
fn injective_maps(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for c in 0..n {
            if !cur.contains(&c) {
                cur.push(c);
                rec(n, k, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::new(), &mut out);
    out
}

/// Brute-force minimum of `cost[n][k]` over injective maps, with the
/// lexicographically least `(n, k)`-sorted pair list among optimal ones.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let n = cost.len();
    let k = cost.first().map_or(0, Vec::len);
    let scale = cost.iter().flatten().fold(0.0f64, |a, c| a.max(c.abs())) * k as f64;
    let tol = 1e-9 * scale.max(f64::MIN_POSITIVE);
    let mut best = f64::INFINITY;
    let mut all = Vec::new();
    for map in injective_maps(n, k) {
        let c: f64 = map.iter().enumerate().map(|(gk, &pn)| cost[pn][gk]).sum();
        let mut pairs: Vec<(usize, usize)> =
            map.iter().enumerate().map(|(gk, &pn)| (pn, gk)).collect();
        pairs.sort();
        best = best.min(c);
        all.push((c, pairs));
    }
    let least = all
        .into_iter()
        .filter(|(c, _)| *c <= best + tol)
        .map(|(_, p)| p)
        .min()
        .unwrap_or_default();
    (best, least)
}

/// Cross-image loss computed pair by pair: each query of `query_scene`
/// against each foreign pixel, focal loss with target 0, averaged.
pub fn cross_image_focal(
    filters: &[Vec<f64>],
    pixels: &[(String, Vec<f64>)],
    query_scene: &str,
    alpha: f64,
    gamma: f64,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for q in filters {
        let d = q.len() - 1;
        for (scene, e) in pixels {
            if scene == query_scene {
                continue;
            }
            let mut logit = q[d];
            for c in 0..d {
                logit += q[c] * e[c];
            }
            total += focal_scalar(logit, false, alpha, gamma);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn iou(a: &Mask, b: &Mask) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        i += (x && y) as usize;
        u += (x || y) as usize;
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

fn hash(m: &Mask) -> u64 {
    let mut h = DefaultHasher::new();
    m.hash(&mut h);
    h.finish()
}

/// Partial injective matchings of `dets` to `gts` allowed at `thr`:
/// `choice[d] = Some(g)` or `None`.
fn partial_matchings(dets: &[&Detection], gts: &[&Mask], thr: f64) -> Vec<Vec<Option<usize>>> {
    let mut out = Vec::new();
    let mut cur: Vec<Option<usize>> = Vec::new();
    fn rec(
        dets: &[&Detection],
        gts: &[&Mask],
        thr: f64,
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        let d = cur.len();
        if d == dets.len() {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        rec(dets, gts, thr, cur, out);
        cur.pop();
        for g in 0..gts.len() {
            if !cur.contains(&Some(g)) && iou(&dets[d].mask, gts[g]) >= thr {
                cur.push(Some(g));
                rec(dets, gts, thr, cur, out);
                cur.pop();
            }
        }
    }
    rec(dets, gts, thr, &mut cur, &mut out);
    out
}

/// 101-point interpolated AP from `(score, image, hash, outcome)` where
/// outcome is `Some(true)` for a hit, `Some(false)` for a miss and `None`
/// for an ignored detection.
fn interpolated_ap(mut rows: Vec<(f64, usize, u64, Option<bool>)>, positives: usize) -> f64 {
    rows.retain(|r| r.3.is_some());
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (i, r) in rows.iter().enumerate() {
        if r.3 == Some(true) {
            tp += 1.0;
        }
        points.push((tp / positives as f64, tp / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

/// Exhaustive AP: maximise over all matchings per (class, range,
/// threshold). Use through [`crate::eval::evaluate_oracle`].
pub(crate) fn enumerate_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_count: usize,
) -> Result<APReport> {
    ensure!(!gts.is_empty(), "evaluation split is empty");
    let (h, w) = gts
        .iter()
        .flat_map(|g| g.masks.first())
        .chain(dets.iter().map(|d| &d.mask))
        .map(Mask::dims)
        .next()
        .unwrap_or((1, 1));
    let scale = (h * w) as f64 / (640.0 * 480.0);
    let ranges = [
        (0.0, f64::INFINITY),
        (0.0, 1024.0 * scale),
        (1024.0 * scale, 9216.0 * scale),
        (9216.0 * scale, f64::INFINITY),
    ];
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let out_of = |area: usize, (lo, hi): (f64, f64)| (area as f64) < lo || (area as f64) > hi;
    let mut grid: Vec<Vec<Vec<Option<f64>>>> = vec![vec![vec![None; 10]; 4]; class_count];
    for c in 1..=class_count as u32 {
        let images: Vec<(Vec<&Detection>, Vec<&Mask>)> = gts
            .iter()
            .map(|g| {
                let mut ds: Vec<&Detection> = dets
                    .iter()
                    .filter(|d| d.class_id == c && d.scene_id == g.scene_id)
                    .collect();
                ds.sort_by(|a, b| {
                    b.score
                        .total_cmp(&a.score)
                        .then(hash(&a.mask).cmp(&hash(&b.mask)))
                });
                let gs = g
                    .masks
                    .iter()
                    .zip(&g.labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(m, _)| m)
                    .collect();
                (ds, gs)
            })
            .collect();
        for (ri, &range) in ranges.iter().enumerate() {
            let positives: usize = images
                .iter()
                .map(|(_, gs)| gs.iter().filter(|m| !out_of(m.area(), range)).count())
                .sum();
            if positives == 0 {
                continue;
            }
            for (ti, &thr) in thresholds.iter().enumerate() {
                let thr = thr.min(1.0 - 1e-10);
                let options: Vec<Vec<Vec<Option<usize>>>> = images
                    .iter()
                    .map(|(ds, gs)| partial_matchings(ds, gs, thr))
                    .collect();
                let combos: usize = options.iter().map(Vec::len).product();
                ensure!(
                    combos <= 1_000_000,
                    "oracle search space too large ({combos})"
                );
                let mut best = 0.0f64;
                let mut idx = vec![0usize; options.len()];
                loop {
                    let mut rows = Vec::new();
                    for (im, ((ds, gs), opts)) in images.iter().zip(&options).enumerate() {
                        for (d, choice) in ds.iter().zip(&opts[idx[im]]) {
                            let outcome = match choice {
                                Some(g) if out_of(gs[*g].area(), range) => None,
                                Some(_) => Some(true),
                                None if out_of(d.mask.area(), range) => None,
                                None => Some(false),
                            };
                            rows.push((d.score, im, hash(&d.mask), outcome));
                        }
                    }
                    best = best.max(interpolated_ap(rows, positives));
                    // odometer over per-image options
                    let mut pos = 0;
                    while pos < idx.len() {
                        idx[pos] += 1;
                        if idx[pos] < options[pos].len() {
                            break;
                        }
                        idx[pos] = 0;
                        pos += 1;
                    }
                    if pos == idx.len() {
                        break;
                    }
                }
                grid[c as usize - 1][ri][ti] = Some(best);
            }
        }
    }
    let avg = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let pick = |ri: usize, ts: &[usize]| -> Vec<f64> {
        let mut v = Vec::new();
        for cls in &grid {
            for &t in ts {
                if let Some(x) = cls[ri][t] {
                    v.push(x);
                }
            }
        }
        v
    };
    let every: Vec<usize> = (0..10).collect();
    let mut per_class = BTreeMap::new();
    for (ci, cls) in grid.iter().enumerate() {
        if let Some(v) = avg(cls[0].iter().flatten().copied().collect()) {
            per_class.insert(ci as u32 + 1, v);
        }
    }
    Ok(APReport {
        ap: avg(pick(0, &every)).unwrap_or(0.0),
        ap50: avg(pick(0, &[0])).unwrap_or(0.0),
        ap75: avg(pick(0, &[5])).unwrap_or(0.0),
        ap_s: avg(pick(1, &every)),
        ap_m: avg(pick(2, &every)),
        ap_l: avg(pick(3, &every)),
        per_class,
    })
}
