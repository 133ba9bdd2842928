//! Verification batteries run by `uniquery verify`.
//!
//! Each check compares a fast path against an independent restatement
//! (closed-form scalars, exhaustive enumeration, finite differences) on
//! seeded random inputs and reports pass/fail with the worst deviation.

use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph};
use crate::error::Result;
use crate::eval::{evaluate_detections, evaluate_oracle, APReport, Detection, GroundTruth};
use crate::features::FeatureMap;
use crate::gradcheck::{grad_check, LOSS_NAMES};
use crate::mask::Mask;
use crate::matching::{match_predictions, solve_assignment, MatchWeights};
use crate::memory::{sample_pixels, MemoryBank, PixelSample, Provenance, SamplingKind, SamplingStrategy};
use crate::objectives::{
    dice_loss, equivariance_decode, equivariance_loss, focal_loss, inter_mask_loss, intra_mask_loss, LossConfig,
};
use crate::oracle::{brute_force_assignment, cross_image_focal, dice_scalar, focal_mean};
use crate::scene::{generate_scene, SceneSpec};
use crate::segmenter::{
    create_queries_var, encode_var, forward, forward_var, image_tensor, softmax_rows, ModelConfig, ModelParams,
};
use crate::tensor::Tensor;
use crate::transform::TransformSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Grads,
    Oracles,
    Memory,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<24} {} ({:.1}s)", self.name, self.detail, self.seconds)
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Result<Check> {
    let t = Instant::now();
    let (passed, detail) = f()?;
    Ok(Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    })
}

pub fn run_suite(suite: Suite) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Grads | Suite::All) {
        out.extend(gradient_checks()?);
    }
    if matches!(suite, Suite::Oracles | Suite::All) {
        out.push(timed("focal_oracle", || focal_oracle(1000, 1))?);
        out.push(timed("dice_oracle", || dice_oracle(1000, 2))?);
        out.push(timed("hand_scalars", hand_scalars)?);
        out.push(timed("identity_collapse", || identity_collapse(100, 3))?);
        out.push(timed("batch_equivalence", || batch_equivalence(100, 4))?);
        out.push(timed("matching_optimality", || matching_optimality(1000, 5))?);
        out.push(timed("ap_oracle", || ap_oracle(1000, 6))?);
    }
    if matches!(suite, Suite::Memory | Suite::All) {
        out.push(timed("memory_fuzz", || memory_fuzz(10_000, 7))?);
        out.push(timed("memory_detach", || memory_detach(20, 8))?);
    }
    Ok(out)
}

pub fn gradient_checks() -> Result<Vec<Check>> {
    LOSS_NAMES
        .iter()
        .map(|name| {
            timed(&format!("grad_{name}"), || {
                let r = grad_check(name, 1e-4)?;
                Ok((
                    r.passed,
                    format!("max rel {:.2e} over {} entries", r.max_rel_error, r.checked),
                ))
            })
        })
        .collect()
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(1..=64);
    let xs = (0..n).map(|_| rng.gen_range(-12.0..12.0)).collect();
    let ts = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    (xs, ts)
}

pub fn focal_oracle(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (xs, ts) = random_case(&mut rng);
        let alpha = rng.gen_range(0.01..0.99);
        let gamma = rng.gen_range(0.0..4.0);
        let (v, _) = focal_loss(&xs, &ts, alpha, gamma)?;
        worst = worst.max((v - focal_mean(&xs, &ts, alpha, gamma)).abs());
    }
    Ok((worst <= 1e-10, format!("max abs diff {worst:.2e} over {trials} inputs")))
}

pub fn dice_oracle(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (xs, ts) = random_case(&mut rng);
        let p: Vec<f64> = xs.iter().map(|&x| sigmoid(x)).collect();
        let (v, _) = dice_loss(&p, &ts, 1e-6)?;
        worst = worst.max((v - dice_scalar(&p, &ts, 1e-6)).abs());
    }
    Ok((worst <= 1e-10, format!("max abs diff {worst:.2e} over {trials} inputs")))
}

pub fn hand_scalars() -> Result<(bool, String)> {
    let (f, _) = focal_loss(&[0.0f64], &[false], 0.1, 2.5)?;
    let (d, _) = dice_loss(&[0.5f64; 4], &[true; 4], 1e-6)?;
    let expect_f = 0.9 * 0.5f64.powf(2.5) * 2f64.ln();
    let ok = (f - 0.11027).abs() < 1e-5 && (f - expect_f).abs() < 1e-12 && (d - 0.2).abs() < 1e-5;
    Ok((ok, format!("focal {f:.6}, dice {d:.6}")))
}

fn small_spec() -> SceneSpec {
    SceneSpec {
        image_size: 32,
        class_count: 2,
        instances_per_scene: [1, 2],
        min_instance_area: 16,
        occlusion: false,
    }
}

fn tiny_params(seed: u64) -> Result<ModelParams<f64>> {
    ModelParams::init(&ModelConfig {
        init_seed: seed,
        ..ModelConfig::tiny()
    })
}

fn sigmoid_t(t: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&x| sigmoid(x)).collect()).expect("same shape")
}

pub fn identity_collapse(draws: usize, seed: u64) -> Result<(bool, String)> {
    let eps = LossConfig::default().dice_eps;
    let mut mismatches = 0;
    for i in 0..draws as u64 {
        let params = tiny_params(seed * 1000 + i)?;
        let scene = generate_scene(seed * 1000 + i, &small_spec())?;
        let mut graph = Graph::new();
        let b = params.bind(&mut graph, false);
        let img = graph.constant(image_tensor(&scene.image));
        let fwd = forward_var(&mut graph, &params.config, &b, img)?;
        let w = MatchWeights::default();
        let a = match_predictions(
            &sigmoid_t(graph.value(fwd.mask_logits)),
            &softmax_rows(graph.value(fwd.queries.class_logits)),
            &scene.masks,
            &scene.labels,
            w,
            eps,
        )?;
        let intra = intra_mask_loss(&mut graph, fwd.mask_logits, &a, &scene.masks, eps)?;
        let img_g = graph.constant(image_tensor(&scene.image));
        let low_g = encode_var(&mut graph, &b, img_g)?;
        let q = create_queries_var(&mut graph, &params.config, &b, low_g)?;
        let branch = equivariance_decode(&mut graph, q.filters, fwd.features, &TransformSpec::identity(), &scene.masks)?;
        let a_g = match_predictions(
            &sigmoid_t(graph.value(branch.mask_logits)),
            &softmax_rows(graph.value(q.class_logits)),
            &branch.targets,
            &scene.labels,
            w,
            eps,
        )?;
        let equi = equivariance_loss(&mut graph, &branch, &a_g, eps)?;
        if graph.value(equi).item().to_bits() != graph.value(intra).item().to_bits() {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} of {draws} draws differ")))
}

/// Foreground cells by plurality vote, restated: every pixel votes for its
/// instance (or 0), the largest count wins, lower label on ties.
fn foreground_cells(masks: &[Mask], stride: usize) -> Vec<(usize, usize)> {
    let (h, w) = masks[0].dims();
    let mut cells = Vec::new();
    for cy in 0..h / stride {
        for cx in 0..w / stride {
            let mut votes = vec![0usize; masks.len() + 1];
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    let mut label = 0;
                    for (k, m) in masks.iter().enumerate() {
                        if m.get(y, x) {
                            label = k + 1;
                            break;
                        }
                    }
                    votes[label] += 1;
                }
            }
            let top = *votes.iter().max().expect("nonempty");
            let winner = votes.iter().position(|&v| v == top).expect("max exists");
            if winner != 0 {
                cells.push((cy, cx));
            }
        }
    }
    cells
}

pub fn batch_equivalence(batches: usize, seed: u64) -> Result<(bool, String)> {
    let cfg = LossConfig::default();
    let dense = SamplingStrategy {
        kind: SamplingKind::Dense,
        ..SamplingStrategy::default()
    };
    let mut worst = 0.0f64;
    for i in 0..batches as u64 {
        let params = tiny_params(seed * 1000 + i)?;
        let a = generate_scene(seed * 1000 + 2 * i, &small_spec())?;
        let b = generate_scene(seed * 1000 + 2 * i + 1, &small_spec())?;
        let fa = forward(&a.image, &params, &a.scene_id)?;
        let fb = forward(&b.image, &params, &b.scene_id)?;
        let mut bank = MemoryBank::new(100_000, params.config.feature_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        for (s, out) in [(&a, &fa), (&b, &fb)] {
            bank.push(sample_pixels(&out.features, &s.masks, &s.labels, &s.scene_id, &dense, &mut rng, 0)?)?;
        }
        let snap = bank.snapshot(&HashSet::new());
        let mut graph = Graph::new();
        let filters = graph.constant(fa.queries.filters.clone());
        let (loss, _) = inter_mask_loss(&mut graph, filters, &a.scene_id, &snap, &cfg)?;
        let via_memory = graph.value(loss).item();

        let fm = &fb.features;
        let pixels: Vec<(String, Vec<f64>)> = foreground_cells(&b.masks, fm.stride)
            .into_iter()
            .map(|(y, x)| (b.scene_id.clone(), fm.embedding(y, x)))
            .collect();
        let rows: Vec<Vec<f64>> = fa.queries.filters.data().chunks(fa.queries.filters.shape()[1]).map(<[f64]>::to_vec).collect();
        let brute = cross_image_focal(&rows, &pixels, &a.scene_id, cfg.focal_alpha, cfg.focal_gamma);
        worst = worst.max((via_memory - brute).abs());
    }
    Ok((worst <= 1e-10, format!("max abs diff {worst:.2e} over {batches} batches")))
}

pub fn matching_optimality(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..trials {
        let n = rng.gen_range(1..=6);
        let k = rng.gen_range(0..=n);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let (best, pairs) = brute_force_assignment(&cost);
        let a = solve_assignment(&cost)?;
        let scale = rng.gen_range(0.01..100.0);
        let scaled: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|c| c * scale).collect()).collect();
        let b = solve_assignment(&scaled)?;
        if (a.total_cost(&cost) - best).abs() > 1e-9 || a.pairs != pairs || b.pairs != a.pairs {
            failures += 1;
        }
    }
    Ok((failures == 0, format!("{failures} of {trials} trials disagree")))
}

fn random_rect(rng: &mut ChaCha8Rng, size: usize) -> Mask {
    let h = rng.gen_range(2..=size / 2);
    let w = rng.gen_range(2..=size / 2);
    let y0 = rng.gen_range(0..=size - h);
    let x0 = rng.gen_range(0..=size - w);
    let mut m = Mask::empty(size, size);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            m.set(y, x, true);
        }
    }
    m
}

/// Copy of `m` with each pixel flipped with probability `p`.
fn jitter(rng: &mut ChaCha8Rng, m: &Mask, p: f64) -> Mask {
    let mut out = m.clone();
    for v in out.data_mut() {
        if rng.gen_bool(p) {
            *v = !*v;
        }
    }
    out
}

/// Random small evaluation problem: 1-2 scenes, each with up to 2
/// disjoint groundtruth instances and up to 3 noisy detections.
pub fn random_ap_problem(rng: &mut ChaCha8Rng, size: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in 0..rng.gen_range(1..=2) {
        let scene_id = format!("s{s}");
        let mut masks: Vec<Mask> = Vec::new();
        for _ in 0..rng.gen_range(0..=2) {
            let m = random_rect(rng, size);
            if masks.iter().all(|o| o.intersection(&m) == 0) {
                masks.push(m);
            }
        }
        let labels: Vec<u32> = masks.iter().map(|_| rng.gen_range(1..=2)).collect();
        for _ in 0..rng.gen_range(0..=3) {
            let (mask, class_id) = if !masks.is_empty() && rng.gen_bool(0.8) {
                let k = rng.gen_range(0..masks.len());
                let c = if rng.gen_bool(0.85) { labels[k] } else { 3 - labels[k] };
                let p = rng.gen_range(0.0..0.08);
                (jitter(rng, &masks[k], p), c)
            } else {
                (random_rect(rng, size), rng.gen_range(1..=2))
            };
            let score = (rng.gen_range(1..=20) as f64) / 20.0;
            dets.push(Detection {
                mask,
                class_id,
                score,
                scene_id: scene_id.clone(),
            });
        }
        gts.push(GroundTruth {
            scene_id,
            masks,
            labels,
        });
    }
    (dets, gts)
}

pub fn reports_close(a: &APReport, b: &APReport, tol: f64) -> bool {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    };
    (a.ap - b.ap).abs() <= tol
        && (a.ap50 - b.ap50).abs() <= tol
        && (a.ap75 - b.ap75).abs() <= tol
        && opt(a.ap_s, b.ap_s)
        && opt(a.ap_m, b.ap_m)
        && opt(a.ap_l, b.ap_l)
        && a.per_class.len() == b.per_class.len()
        && a.per_class.iter().zip(&b.per_class).all(|((ka, va), (kb, vb))| ka == kb && (va - vb).abs() <= tol)
}

pub fn ap_oracle(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..trials {
        let (dets, gts) = random_ap_problem(&mut rng, 48);
        let fast = evaluate_detections(&dets, &gts, 2)?;
        let slow = evaluate_oracle(&dets, &gts, 2)?;
        if !reports_close(&fast, &slow, 1e-9) {
            failures += 1;
        }
    }
    let mut gt = Mask::empty(32, 32);
    let mut det = Mask::empty(32, 32);
    for y in 0..10 {
        for x in 0..10 {
            gt.set(y, x, true);
            det.set(y, x, y < 6);
        }
    }
    let gts = vec![GroundTruth {
        scene_id: "hand".into(),
        masks: vec![gt],
        labels: vec![1],
    }];
    let dets = vec![Detection {
        mask: det,
        class_id: 1,
        score: 0.9,
        scene_id: "hand".into(),
    }];
    let fast = evaluate_detections(&dets, &gts, 1)?;
    let slow = evaluate_oracle(&dets, &gts, 1)?;
    let hand = fast.ap50 == 1.0 && fast.ap75 == 0.0 && fast == slow;
    Ok((
        failures == 0 && hand,
        format!("{failures} of {trials} trials disagree; hand case {}", if hand { "ok" } else { "wrong" }),
    ))
}

fn random_masks(rng: &mut ChaCha8Rng, size: usize, k: usize) -> Vec<Mask> {
    // disjoint via a random label map
    let mut masks = vec![Mask::empty(size, size); k];
    for y in 0..size {
        for x in 0..size {
            let l = rng.gen_range(0..=k);
            if l > 0 && rng.gen_bool(0.7) {
                masks[l - 1].set(y, x, true);
            }
        }
    }
    masks
}

/// Random operation sequences against a plain list model of the queue.
pub fn memory_fuzz(sequences: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations: Vec<String> = Vec::new();
    for seq in 0..sequences {
        let capacity = rng.gen_range(1..=40);
        let dim = rng.gen_range(1..=3);
        let mut bank = MemoryBank::<f64>::new(capacity, dim)?;
        let mut model: Vec<PixelSample<f64>> = Vec::new();
        let mut step = 0u64;
        let mut fail = |what: &str| violations.push(format!("seq {seq}: {what}"));
        for _ in 0..rng.gen_range(1..=12) {
            let batch: Vec<PixelSample<f64>> = match rng.gen_range(0..3) {
                0 => {
                    let ids: HashSet<String> = (0..5).filter(|_| rng.gen_bool(0.4)).map(|s| format!("s{s}")).collect();
                    let snap = bank.snapshot(&ids);
                    let tail = &model[model.len().saturating_sub(capacity)..];
                    let expect: Vec<&PixelSample<f64>> =
                        tail.iter().filter(|s| !ids.contains(&s.provenance.scene_id)).collect();
                    let same = snap.len() == expect.len()
                        && expect.iter().enumerate().all(|(i, s)| snap.row(i) == &s.embedding[..] && snap.provenance[i] == s.provenance);
                    if !same {
                        fail("snapshot differs from filtered queue");
                    }
                    Vec::new()
                }
                1 => (0..rng.gen_range(0..=15))
                    .map(|_| PixelSample {
                        embedding: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        provenance: Provenance {
                            scene_id: format!("s{}", rng.gen_range(0..5)),
                            instance_id: rng.gen_range(1..=3),
                            class_id: rng.gen_range(1..=4),
                            step_added: step,
                        },
                    })
                    .collect(),
                _ => {
                    let stride = rng.gen_range(1..=2);
                    let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
                    let k = rng.gen_range(0..=3);
                    let size_h = h * stride;
                    let size_w = w * stride;
                    let sq = size_h.max(size_w);
                    let masks: Vec<Mask> = random_masks(&mut rng, sq, k)
                        .into_iter()
                        .map(|m| {
                            let mut c = Mask::empty(size_h, size_w);
                            for y in 0..size_h {
                                for x in 0..size_w {
                                    c.set(y, x, m.get(y, x));
                                }
                            }
                            c
                        })
                        .collect();
                    let labels: Vec<u32> = (0..k).map(|_| rng.gen_range(1..=4)).collect();
                    let fm = FeatureMap::new(
                        Tensor::from_vec(&[dim, h, w], (0..dim * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())?,
                        stride,
                        0,
                    )?;
                    let per = rng.gen_range(1..=5);
                    let strategy = SamplingStrategy {
                        kind: SamplingKind::InstanceBalanced,
                        pixels_per_image: 512,
                        pixels_per_instance: per,
                    };
                    let scene_id = format!("s{}", rng.gen_range(0..5));
                    let samples = sample_pixels(&fm, &masks, &labels, &scene_id, &strategy, &mut rng, step)?;
                    let fg: HashSet<(usize, usize)> = if k == 0 {
                        HashSet::new()
                    } else {
                        foreground_cells(&masks, stride).into_iter().collect()
                    };
                    for s in &samples {
                        if s.provenance.instance_id == 0 {
                            fail("background sample");
                        }
                    }
                    if samples.iter().any(|s| {
                        !(0..h * w).any(|i| fg.contains(&(i / w, i % w)) && fm.embedding(i / w, i % w) == s.embedding)
                    }) {
                        fail("sample outside the foreground");
                    }
                    for inst in 1..=k as u32 {
                        if samples.iter().filter(|s| s.provenance.instance_id == inst).count() > per {
                            fail("per-instance bound exceeded");
                        }
                    }
                    samples
                }
            };
            model.extend(batch.iter().cloned());
            bank.push(batch)?;
            step += rng.gen_range(0..=2);
            if bank.len() > capacity {
                fail("capacity exceeded");
            }
            let tail = &model[model.len().saturating_sub(capacity)..];
            if bank.len() != tail.len() || bank.iter().zip(tail).any(|(a, b)| a != b) {
                fail("queue differs from FIFO model");
            }
            if bank.inserted() != model.len() as u64 {
                fail("insertion counter wrong");
            }
        }
    }
    Ok((
        violations.is_empty(),
        match violations.first() {
            None => format!("{sequences} sequences clean"),
            Some(v) => format!("{} violations, first: {v}", violations.len()),
        },
    ))
}

/// Gradient of the inter loss with respect to the network that produced
/// the stored pixels, with query filters held constant: must be exactly 0.
pub fn memory_detach(draws: usize, seed: u64) -> Result<(bool, String)> {
    let cfg = LossConfig::default();
    let mut nonzero = 0usize;
    for i in 0..draws as u64 {
        let params = tiny_params(seed * 1000 + i)?;
        let scene = generate_scene(seed * 1000 + i, &small_spec())?;
        let mut graph = Graph::new();
        let b = params.bind(&mut graph, false);
        let img = graph.constant(image_tensor(&scene.image));
        let fwd = forward_var(&mut graph, &params.config, &b, img)?;
        let fv = fwd.features;
        let fm = FeatureMap::new(graph.value(fv.var).clone(), fv.stride, fv.coord_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let mut bank = MemoryBank::new(1000, params.config.feature_dim)?;
        bank.push(sample_pixels(
            &fm,
            &scene.masks,
            &scene.labels,
            &scene.scene_id,
            &SamplingStrategy::default(),
            &mut rng,
            0,
        )?)?;
        let snap = bank.snapshot(&HashSet::new());
        let n = params.config.num_queries;
        let d1 = params.config.filter_len();
        let filters = graph.constant(Tensor::from_vec(
            &[n, d1],
            (0..n * d1).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?);
        let (loss, pixels) = inter_mask_loss(&mut graph, filters, "another-scene", &snap, &cfg)?;
        let grads = graph.backward(loss);
        if pixels == 0 {
            continue;
        }
        let g = b.gradients(&graph, &grads);
        nonzero += g.iter().flatten().filter(|v| **v != 0.0).count();
    }
    Ok((nonzero == 0, format!("{nonzero} nonzero gradient entries over {draws} draws")))
}
