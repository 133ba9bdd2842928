//! COCO-style mask AP.
//!
//! Per class, IoU threshold and area range: detections are taken in
//! descending score order and greedily matched to the unmatched
//! groundtruth of best IoU; the precision/recall curve is made monotone and
//! sampled at 101 recall points.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::float::Float;
use crate::mask::Mask;
use crate::scene::SyntheticScene;
use crate::segmenter::{forward, softmax_rows, ModelParams};

pub const SCORE_THRESHOLD: f64 = 0.05;
pub const MAX_DETECTIONS: usize = 100;
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;
/// Reference image area the COCO size thresholds are defined for.
const REFERENCE_AREA: f64 = 640.0 * 480.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub mask: Mask,
    pub class_id: u32,
    pub score: f64,
    pub scene_id: String,
}

/// Groundtruth instances of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene_id: String,
    pub masks: Vec<Mask>,
    pub labels: Vec<u32>,
}

impl From<&SyntheticScene> for GroundTruth {
    fn from(s: &SyntheticScene) -> Self {
        GroundTruth {
            scene_id: s.scene_id.clone(),
            masks: s.masks.clone(),
            labels: s.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no groundtruth falls in the size range.
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    /// Keyed by class id; classes without groundtruth are omitted.
    pub per_class: BTreeMap<u32, f64>,
}

impl fmt::Display for APReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell =
            |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
        writeln!(
            f,
            "{:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"
        )?;
        write!(
            f,
            "{:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            cell(Some(self.ap)),
            cell(Some(self.ap50)),
            cell(Some(self.ap75)),
            cell(self.ap_s),
            cell(self.ap_m),
            cell(self.ap_l)
        )
    }
}

/// `[lo, hi]` pixel-area bounds of the all/small/medium/large ranges for
/// images of `image_area` pixels.
pub fn area_ranges(image_area: usize) -> [(f64, f64); 4] {
    let s = image_area as f64 / REFERENCE_AREA;
    let (a, b) = (32.0 * 32.0 * s, 96.0 * 96.0 * s);
    [(0.0, f64::INFINITY), (0.0, a), (a, b), (b, f64::INFINITY)]
}

fn mask_hash(m: &Mask) -> u64 {
    let mut h = DefaultHasher::new();
    m.hash(&mut h);
    h.finish()
}

/// Detections of one image from raw model outputs: class = argmax over the
/// real classes, score = its probability, mask = probability >= 0.5.
pub fn detections_from_logits<T: Float>(
    mask_logits: &crate::tensor::Tensor<T>,
    class_logits: &crate::tensor::Tensor<T>,
    scene_id: &str,
) -> Result<Vec<Detection>> {
    let ms = mask_logits.shape();
    let cs = class_logits.shape();
    ensure!(
        ms.len() == 3 && cs.len() == 2 && ms[0] == cs[0] && cs[1] >= 2,
        "output shapes {:?} / {:?}",
        ms,
        cs
    );
    let probs = softmax_rows(class_logits);
    let (h, w) = (ms[1], ms[2]);
    let mut dets = Vec::new();
    for n in 0..ms[0] {
        let row = &probs.data()[n * cs[1]..(n + 1) * cs[1]];
        let mut best = 1;
        for c in 2..cs[1] {
            if row[c] > row[best] {
                best = c;
            }
        }
        let score = row[best].as_f64();
        if score < SCORE_THRESHOLD {
            continue;
        }
        let logits = &mask_logits.data()[n * h * w..(n + 1) * h * w];
        let mask = Mask::from_vec(h, w, logits.iter().map(|&x| x >= T::zero()).collect())?;
        dets.push(Detection {
            mask,
            class_id: best as u32,
            score,
            scene_id: scene_id.to_string(),
        });
    }
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(mask_hash(&a.mask).cmp(&mask_hash(&b.mask)))
    });
    dets.truncate(MAX_DETECTIONS);
    Ok(dets)
}

/// Run the model on every scene and evaluate.
pub fn evaluate<T: Float>(params: &ModelParams<T>, scenes: &[SyntheticScene]) -> Result<APReport> {
    ensure!(!scenes.is_empty(), "evaluation split is empty");
    let mut dets = Vec::new();
    for s in scenes {
        let out = forward(&s.image, params, &s.scene_id)?;
        dets.extend(detections_from_logits(
            &out.mask_logits,
            &out.queries.class_logits,
            &s.scene_id,
        )?);
    }
    let gts: Vec<GroundTruth> = scenes.iter().map(GroundTruth::from).collect();
    evaluate_detections(&dets, &gts, params.config.class_count)
}

/// Per image, the evaluation inputs of one class.
struct ImageClass<'a> {
    gts: Vec<&'a Mask>,
    /// Detections in processing order.
    dets: Vec<&'a Detection>,
}

/// AP over precomputed detections. Images are the scenes of `gts`;
/// detections whose scene is unknown are an error.
pub fn evaluate_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_count: usize,
) -> Result<APReport> {
    ensure!(!gts.is_empty(), "evaluation split is empty");
    let (h, w) = gts
        .iter()
        .flat_map(|g| g.masks.first())
        .map(Mask::dims)
        .chain(dets.iter().map(|d| d.mask.dims()))
        .next()
        .unwrap_or((1, 1));
    let image_index: BTreeMap<&str, usize> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| (g.scene_id.as_str(), i))
        .collect();
    ensure!(
        image_index.len() == gts.len(),
        "duplicate scene ids in groundtruth"
    );
    for d in dets {
        ensure!(
            image_index.contains_key(d.scene_id.as_str()),
            "detection for unknown scene {}",
            d.scene_id
        );
        ensure!(d.mask.dims() == (h, w), "detection mask shape differs");
        ensure!(
            (0.0..=1.0).contains(&d.score),
            "score {} outside [0,1]",
            d.score
        );
    }
    for g in gts {
        ensure!(
            g.masks.len() == g.labels.len(),
            "groundtruth masks/labels length mismatch"
        );
    }
    let ranges = area_ranges(h * w);
    // ap[class][range][threshold], None when the class has no groundtruth in the range
    let mut table: Vec<[[Option<f64>; 10]; 4]> = Vec::new();
    let classes: Vec<u32> = (1..=class_count as u32).collect();
    for &c in &classes {
        let per_image: Vec<ImageClass> = gts
            .iter()
            .map(|g| {
                let mut ds: Vec<&Detection> = dets
                    .iter()
                    .filter(|d| d.class_id == c && d.scene_id == g.scene_id)
                    .collect();
                ds.sort_by(|a, b| {
                    b.score
                        .total_cmp(&a.score)
                        .then(mask_hash(&a.mask).cmp(&mask_hash(&b.mask)))
                });
                ds.truncate(MAX_DETECTIONS);
                ImageClass {
                    gts: g
                        .masks
                        .iter()
                        .zip(&g.labels)
                        .filter(|(_, &l)| l == c)
                        .map(|(m, _)| m)
                        .collect(),
                    dets: ds,
                }
            })
            .collect();
        let mut cell = [[None; 10]; 4];
        for (r, &range) in ranges.iter().enumerate() {
            for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
                cell[r][t] = class_ap(&per_image, range, thr)?;
            }
        }
        table.push(cell);
    }
    let mean = |vals: Vec<f64>| -> Option<f64> {
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let collect = |r: usize, ts: &[usize]| -> Vec<f64> {
        table
            .iter()
            .flat_map(|cell| ts.iter().filter_map(move |&t| cell[r][t]))
            .collect()
    };
    let all: Vec<usize> = (0..10).collect();
    let mut per_class = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        if let Some(v) = mean(all.iter().filter_map(|&t| table[i][0][t]).collect()) {
            per_class.insert(c, v);
        }
    }
    Ok(APReport {
        ap: mean(collect(0, &all)).unwrap_or(0.0),
        ap50: mean(collect(0, &[0])).unwrap_or(0.0),
        ap75: mean(collect(0, &[5])).unwrap_or(0.0),
        ap_s: mean(collect(1, &all)),
        ap_m: mean(collect(2, &all)),
        ap_l: mean(collect(3, &all)),
        per_class,
    })
}

fn outside(area: usize, (lo, hi): (f64, f64)) -> bool {
    let a = area as f64;
    a < lo || a > hi
}

/// AP of one class at one threshold and area range; `None` when no
/// groundtruth counts.
fn class_ap(images: &[ImageClass], range: (f64, f64), thr: f64) -> Result<Option<f64>> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut positives = 0usize;
    for img in images {
        // non-ignored groundtruth first
        let mut order: Vec<(usize, bool)> = img
            .gts
            .iter()
            .enumerate()
            .map(|(i, m)| (i, outside(m.area(), range)))
            .collect();
        order.sort_by_key(|&(_, ig)| ig);
        positives += order.iter().filter(|o| !o.1).count();
        let mut taken = vec![false; order.len()];
        for d in &img.dets {
            let mut best_iou = thr.min(1.0 - 1e-10);
            let mut matched: Option<usize> = None;
            for (slot, &(gi, ignored)) in order.iter().enumerate() {
                if taken[slot] {
                    continue;
                }
                if let Some(m) = matched {
                    if !order[m].1 && ignored {
                        break;
                    }
                }
                let iou = d.mask.iou(img.gts[gi])?;
                if iou < best_iou {
                    continue;
                }
                best_iou = iou;
                matched = Some(slot);
            }
            match matched {
                Some(slot) => {
                    taken[slot] = true;
                    if !order[slot].1 {
                        scored.push((d.score, true));
                    }
                }
                None => {
                    if !outside(d.mask.area(), range) {
                        scored.push((d.score, false));
                    }
                }
            }
        }
    }
    if positives == 0 {
        return Ok(None);
    }
    // stable: equal scores keep image order, then per-image order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &scored {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Ok(Some(sum / RECALL_POINTS as f64))
}

/// Exhaustive-search AP for small problems: at every threshold and area
/// range, each scene's detection-to-groundtruth matching is chosen among
/// all valid partial matchings so as to maximise AP.
pub fn evaluate_oracle(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_count: usize,
) -> Result<APReport> {
    for g in gts {
        let n = dets.iter().filter(|d| d.scene_id == g.scene_id).count();
        if g.masks.len() > 3 || n > 5 {
            return Err(Error::Contract(format!(
                "oracle limited to 3 instances and 5 detections per scene, scene {} has {} and {n}",
                g.scene_id,
                g.masks.len()
            )));
        }
    }
    crate::oracle::enumerate_ap(dets, gts, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(size: usize, y0: usize, x0: usize, side: usize) -> Mask {
        let mut m = Mask::empty(size, size);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(y, x, true);
            }
        }
        m
    }

    fn one_gt(mask: Mask) -> Vec<GroundTruth> {
        vec![GroundTruth {
            scene_id: "s".into(),
            masks: vec![mask],
            labels: vec![1],
        }]
    }

    #[test]
    fn iou_point_six_case() {
        // 10x10 gt, detection covering 6 of its rows: IoU 60/100
        let gt = square(32, 0, 0, 10);
        let mut det = Mask::empty(32, 32);
        for y in 0..6 {
            for x in 0..10 {
                det.set(y, x, true);
            }
        }
        assert!((det.iou(&gt).unwrap() - 0.6).abs() < 1e-12);
        let d = Detection {
            mask: det,
            class_id: 1,
            score: 0.9,
            scene_id: "s".into(),
        };
        let r = evaluate_detections(&[d], &one_gt(gt), 1).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);
    }

    #[test]
    fn perfect_and_empty() {
        let gt = square(32, 4, 4, 8);
        let d = Detection {
            mask: gt.clone(),
            class_id: 1,
            score: 1.0,
            scene_id: "s".into(),
        };
        let r = evaluate_detections(&[d], &one_gt(gt.clone()), 1).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        let r = evaluate_detections(&[], &one_gt(gt), 1).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(evaluate_detections(&[], &[], 1).is_err());
    }

    #[test]
    fn area_thresholds_scale_with_image() {
        let r = area_ranges(128 * 128);
        assert!((r[1].1 - 1024.0 * 16384.0 / 307200.0).abs() < 1e-9);
        assert_eq!(area_ranges(640 * 480)[2], (1024.0, 9216.0));
    }
}
